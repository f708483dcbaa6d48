//! Run orchestration: dispatch a resolved config to the solvers and write
//! the artifact set (history CSV, residual-trace CSVs, VTK snapshots).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use perihom_core::errors::CoreError;
use perihom_core::field::{RealSymField, RealTensorField, RealVectorField};
use perihom_core::grid::Grid;
use perihom_core::load::Kinematics;
use perihom_core::materials::evaluate_all;
use perihom_core::nonlinear::{deformation_gradient, run_increment, IncrementState, NewtonReport};
use perihom_core::residuals::ResidualTriple;
use perihom_core::solver::{solve_small_strain, IterationRecord};
use perihom_core::tensor::{Mat3, Sym3, FULL_PAIRS};
use sha2::{Digest, Sha256};

use crate::config::{FieldSelection, ResolvedRun, RunConfig, FULL_NAMES, SYM_NAMES};
use crate::vtk::{write_vtk, FieldKind, VtkField};

/// Parse, validate, solve, and write artifacts. Returns the process exit
/// code: 0 converged, 2 solver did not converge (artifacts still written).
/// Configuration and I/O problems surface as errors (exit 1 in main).
pub fn execute(config_path: &Path) -> Result<i32> {
    let bytes = fs::read(config_path)
        .with_context(|| format!("reading config {}", config_path.display()))?;
    let digest = hex_digest(&bytes);
    let text = String::from_utf8(bytes).context("config is not valid UTF-8")?;
    let cfg = RunConfig::parse(&text)?;
    let base_dir = config_path.parent().unwrap_or(Path::new("."));
    let run = cfg.resolve(base_dir)?;

    if run.config.solver.threads > 0 {
        // Ignore failure: the global pool can only be sized once per
        // process, which is fine for a CLI.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(run.config.solver.threads)
            .build_global();
    }

    fs::create_dir_all(&run.config.output.directory).with_context(|| {
        format!(
            "creating output directory {}",
            run.config.output.directory.display()
        )
    })?;

    match run.load.kinematics {
        Kinematics::SmallStrain => run_small_strain(&run, &digest),
        Kinematics::FiniteStrain => run_finite_strain(&run, &digest),
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        write!(s, "{b:02x}").unwrap();
    }
    s
}

struct Paths {
    dir: PathBuf,
    base: String,
}

impl Paths {
    fn new(run: &ResolvedRun) -> Paths {
        Paths {
            dir: run.config.output.directory.clone(),
            base: run.config.output.basename.clone(),
        }
    }
    fn history(&self) -> PathBuf {
        self.dir.join(format!("{}_history.csv", self.base))
    }
    fn trace(&self, increment: usize) -> PathBuf {
        self.dir
            .join(format!("{}_trace_inc{increment:03}.csv", self.base))
    }
    fn snapshot(&self, increment: usize) -> PathBuf {
        self.dir.join(format!("{}_inc{increment:03}.vtk", self.base))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn trace_csv(digest: &str, records: &[&IterationRecord]) -> String {
    let mut out = format!("# config sha256: {digest}\n");
    out.push_str("iteration,equilibrium,compatibility,loading\n");
    for (row, r) in records.iter().enumerate() {
        writeln!(
            out,
            "{},{:.16e},{:.16e},{:.16e}",
            row + 1,
            r.equilibrium,
            r.compatibility,
            r.loading
        )
        .unwrap();
    }
    out
}

fn history_header(digest: &str, kin: Kinematics) -> String {
    let mut out = format!("# config sha256: {digest}\n");
    out.push_str("increment");
    match kin {
        Kinematics::SmallStrain => {
            for n in SYM_NAMES {
                write!(out, ",eps_{n}").unwrap();
            }
            for n in SYM_NAMES {
                write!(out, ",sig_{n}").unwrap();
            }
        }
        Kinematics::FiniteStrain => {
            for n in FULL_NAMES {
                write!(out, ",F_{n}").unwrap();
            }
            for n in FULL_NAMES {
                write!(out, ",P_{n}").unwrap();
            }
        }
    }
    out.push_str(",newton_iterations,cg_iterations,equilibrium,compatibility,loading,wall_time_s\n");
    out
}

fn history_row(
    increment: usize,
    kinematic: &[f64],
    stress: &[f64],
    newton: usize,
    cg: usize,
    residuals: &ResidualTriple,
    wall: f64,
) -> String {
    let mut out = format!("{increment}");
    for v in kinematic.iter().chain(stress) {
        write!(out, ",{v:.16e}").unwrap();
    }
    writeln!(
        out,
        ",{newton},{cg},{:.16e},{:.16e},{:.16e},{wall:.6e}",
        residuals.equilibrium, residuals.compatibility, residuals.loading
    )
    .unwrap();
    out
}

fn mat3_row_major(m: &Mat3) -> Vec<f64> {
    FULL_PAIRS.iter().map(|&(i, j)| m.0[i][j]).collect()
}

/// Expand per-voxel symmetric storage (xx yy zz yz xz xy) to row-major 3x3.
fn sym_field_to_tensor_data(field: &RealSymField) -> Vec<f64> {
    let mut out = Vec::with_capacity(field.data().len() / 6 * 9);
    for s in field.data().chunks_exact(6) {
        out.extend_from_slice(&[
            s[0], s[5], s[4],
            s[5], s[1], s[3],
            s[4], s[3], s[2],
        ]);
    }
    out
}

/// Total displacement at voxel centers: the affine part from the mean
/// displacement gradient plus the periodic fluctuation, magnified by
/// `scale`.
fn total_displacement(
    grid: &Grid,
    mean_grad: &Mat3,
    fluct: &RealVectorField,
    scale: f64,
) -> Vec<f64> {
    let shape = grid.shape();
    let mut out = Vec::with_capacity(shape.nvox() * 3);
    for v in 0..shape.nvox() {
        let x = shape.center(shape.coords(v));
        for i in 0..3 {
            let affine: f64 = (0..3).map(|j| mean_grad.0[i][j] * x[j]).sum();
            out.push(scale * (affine + fluct.at(v, i)));
        }
    }
    out
}

fn vtk_title(digest: &str) -> String {
    format!("perihom config sha256 {digest}")
}

fn write_snapshot(
    path: &Path,
    digest: &str,
    grid: &Grid,
    fields: Vec<VtkField>,
) -> Result<()> {
    let shape = grid.shape();
    let h = shape.spacing();
    let origin = [h[0] / 2.0, h[1] / 2.0, h[2] / 2.0];
    write_vtk(path, &vtk_title(digest), shape.n, origin, h, &fields)
}

fn run_small_strain(run: &ResolvedRun, digest: &str) -> Result<i32> {
    let paths = Paths::new(run);
    let opts = run.config.solver.solver_options();
    let start = Instant::now();
    let sol = match solve_small_strain(&run.grid, &run.map, &run.materials, &run.load, &opts) {
        Ok(sol) => sol,
        Err(e) if is_solver_failure(&e) => {
            eprintln!("solve failed: {e}");
            return Ok(2);
        }
        Err(e) => return Err(e.into()),
    };
    let wall = start.elapsed().as_secs_f64();

    let mut history = history_header(digest, Kinematics::SmallStrain);
    history.push_str(&history_row(
        1,
        &sol.mean_strain.0,
        &sol.mean_stress.0,
        0,
        sol.report.iterations,
        &sol.report.residuals,
        wall,
    ));
    write_text(&paths.history(), &history)?;

    let records: Vec<&IterationRecord> = sol.report.trace.iter().collect();
    write_text(&paths.trace(1), &trace_csv(digest, &records))?;

    if run.config.output.field_selection()? != FieldSelection::None {
        let mean_grad = sol.mean_strain.to_mat3();
        let fields = vec![
            VtkField {
                name: "displacement".into(),
                kind: FieldKind::Vectors,
                data: total_displacement(
                    &run.grid,
                    &mean_grad,
                    &sol.displacement_fluctuation,
                    run.config.output.displacement_scale,
                ),
            },
            VtkField {
                name: "strain".into(),
                kind: FieldKind::Tensors,
                data: sym_field_to_tensor_data(&sol.strain),
            },
            VtkField {
                name: "stress".into(),
                kind: FieldKind::Tensors,
                data: sym_field_to_tensor_data(&sol.stress),
            },
        ];
        write_snapshot(&paths.snapshot(1), digest, &run.grid, fields)?;
    }

    report_small(&sol.mean_stress, &sol.report.residuals, sol.report.iterations, wall);
    if sol.report.converged {
        println!("artifacts written to {}", paths.dir.display());
        Ok(0)
    } else {
        println!(
            "NOT CONVERGED after {} iterations; artifacts written to {}",
            sol.report.iterations,
            paths.dir.display()
        );
        Ok(2)
    }
}

fn report_small(mean_stress: &Sym3, residuals: &ResidualTriple, iters: usize, wall: f64) {
    println!(
        "mean stress [{:.6e} {:.6e} {:.6e} {:.6e} {:.6e} {:.6e}]",
        mean_stress.0[0],
        mean_stress.0[1],
        mean_stress.0[2],
        mean_stress.0[3],
        mean_stress.0[4],
        mean_stress.0[5]
    );
    println!(
        "{iters} iterations in {wall:.3}s; residuals: equilibrium {:.3e}, compatibility \
         {:.3e}, loading {:.3e}",
        residuals.equilibrium, residuals.compatibility, residuals.loading
    );
}

fn is_solver_failure(e: &CoreError) -> bool {
    matches!(
        e,
        CoreError::NumericalBreakdown { .. }
            | CoreError::MacroBlockSingular
            | CoreError::IncrementFailed { .. }
    )
}

fn run_finite_strain(run: &ResolvedRun, digest: &str) -> Result<i32> {
    let paths = Paths::new(run);
    let opts = run.config.solver.newton_options();
    let selection = run.config.output.field_selection()?;
    let n = run.load.increments;

    let mut state = IncrementState::initial(&run.grid, &run.map, &run.materials, &run.load.layout());
    let mut history = history_header(digest, Kinematics::FiniteStrain);
    let mut failure: Option<String> = None;

    for k in 1..=n {
        let s = k as f64 / n as f64;
        let f_imposed = run.load.imposed_gradient(s);
        let targets = run.load.stress_targets_at(s);
        let start = Instant::now();
        let report = match run_increment(
            &run.grid,
            &run.map,
            &run.materials,
            &run.load.layout(),
            &mut state,
            f_imposed,
            &targets,
            &opts,
        ) {
            Ok(report) => report,
            Err(CoreError::IncrementFailed { increment, reason }) => {
                failure = Some(format!("increment {increment}: {reason}"));
                break;
            }
            Err(e) if is_solver_failure(&e) => {
                failure = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e.into()),
        };
        let wall = start.elapsed().as_secs_f64();

        history.push_str(&history_row(
            k,
            &mat3_row_major(&state.mean_f),
            &mat3_row_major(&state.mean_p),
            report.iterations,
            report.linear_iterations.iter().sum(),
            &report.residuals,
            wall,
        ));
        let records: Vec<&IterationRecord> =
            report.traces.iter().flat_map(|t| t.iter()).collect();
        write_text(&paths.trace(k), &trace_csv(digest, &records))?;

        let snapshot_now = match selection {
            FieldSelection::All => true,
            FieldSelection::Last => k == n,
            FieldSelection::None => false,
        };
        if snapshot_now {
            let fields = finite_snapshot_fields(run, &mut state)?;
            write_snapshot(&paths.snapshot(k), digest, &run.grid, fields)?;
        }
        report_increment(k, n, &report, wall);
    }

    write_text(&paths.history(), &history)?;
    if let Some(reason) = failure {
        println!(
            "NOT CONVERGED ({reason}); artifacts for completed increments written to {}",
            paths.dir.display()
        );
        Ok(2)
    } else {
        println!("artifacts written to {}", paths.dir.display());
        Ok(0)
    }
}

fn report_increment(k: usize, n: usize, report: &NewtonReport, wall: f64) {
    println!(
        "increment {k}/{n}: {} newton / {} cg iterations in {wall:.3}s{}; residuals: \
         equilibrium {:.3e}, compatibility {:.3e}, loading {:.3e}",
        report.iterations,
        report.linear_iterations.iter().sum::<usize>(),
        if report.bisected { " (bisected)" } else { "" },
        report.residuals.equilibrium,
        report.residuals.compatibility,
        report.residuals.loading
    );
}

/// Recompute the converged deformation-gradient and stress fields for
/// export. Evaluating from the just-committed state at the accepted
/// kinematics reproduces the accepted sweep.
fn finite_snapshot_fields(run: &ResolvedRun, state: &mut IncrementState) -> Result<Vec<VtkField>> {
    let f_field = deformation_gradient(&run.grid, &state.u, state.mean_f)?;
    let mut p_field = RealTensorField::zeros(run.grid.shape());
    let mut tangents = Vec::new();
    evaluate_all(
        &run.materials,
        run.map.ids(),
        &f_field,
        &mut state.internal,
        &mut p_field,
        &mut tangents,
    )?;
    let mean_grad = state.mean_f - Mat3::identity();
    Ok(vec![
        VtkField {
            name: "displacement".into(),
            kind: FieldKind::Vectors,
            data: total_displacement(
                &run.grid,
                &mean_grad,
                &state.u,
                run.config.output.displacement_scale,
            ),
        },
        VtkField {
            name: "deformation_gradient".into(),
            kind: FieldKind::Tensors,
            data: f_field.data().to_vec(),
        },
        VtkField {
            name: "piola_stress".into(),
            kind: FieldKind::Tensors,
            data: p_field.data().to_vec(),
        },
    ])
}
