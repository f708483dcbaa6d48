//! Incremental-iterative finite-strain driver.
//!
//! The macroscopic load path is split into increments; each increment runs
//! Newton iterations on the reference-configuration equilibrium
//! `div P(F) = 0` with `F = F_mean + grad u`. Every Newton step linearizes
//! around the current iterate and solves
//!
//! `-div(K : (grad du + dF_mean)) = div P`,
//!
//! plus, for stress-controlled mean-gradient components, the rows
//! `<K : (grad du + dF_mean)>_IJ = target_IJ - <P>_IJ` — the same
//! conjugate-gradient kernel as the small-strain solver, with the per-voxel
//! consistent tangent in place of the stiffness and the full (non-symmetric)
//! gradient in place of the symmetric one. The tangent field keeps major
//! symmetry for the materials implemented here, so the system stays
//! self-adjoint; a monitor logs the measured asymmetry each step in case a
//! future material breaks it.
//!
//! Newton convergence is declared on the size of the update,
//! `max(max|grad du|, max|dF_mean|)`, with a divergence guard that bisects
//! the increment once if the update grows by more than a factor of ten
//! between iterations. Internal material state is committed only when an
//! increment is accepted; a failed attempt leaves the committed state
//! untouched.

use log::{debug, warn};

use crate::errors::{CoreError, Result};
use crate::field::{RealTensorField, RealVectorField};
use crate::grid::Grid;
use crate::load::{ControlLayout, DofVector, Kinematics, LoadSpec};
use crate::materials::{average_tangent, evaluate_all, MaterialModel, StateField};
use crate::micro::PhaseMap;
use crate::operators::{contract_stiffness_full, div_tensor, grad, StiffnessField};
use crate::residuals::{
    curl_max_of_displacement, equilibrium_residual_tensor, loading_residual, ResidualTriple,
};
use crate::solver::{
    pcg_solve, IterationRecord, PcgInputs, SolverOptions, SpectralPreconditioner,
};
use crate::tensor::{Mat3, FULL_PAIRS};

/// Growth of the Newton update, relative to the smallest update seen in the
/// increment, that trips the divergence guard. Legitimate stiffness drops —
/// e.g. crossing a yield surface under stress control scales the step by the
/// elastic-to-tangent modulus ratio — produce one to two orders of magnitude,
/// so the guard only reacts to genuine blow-up beyond that.
const DIVERGENCE_GROWTH: f64 = 1e3;

/// Tangent-field asymmetry above which the monitor escalates from debug to
/// warning.
const ASYMMETRY_WARN: f64 = 1e-8;

/// Controls for the Newton loop; the inner linear solves use the embedded
/// [`SolverOptions`].
#[derive(Debug, Clone, PartialEq)]
pub struct NewtonOptions {
    /// Tolerance on `max(max|grad du|, max|dF_mean|)`.
    pub tolerance: f64,
    pub max_newton: usize,
    pub linear: SolverOptions,
    /// Rebuild the preconditioner from the current average tangent at every
    /// Newton iteration instead of once per increment.
    pub refresh_preconditioner: bool,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            tolerance: 1e-6,
            max_newton: 25,
            linear: SolverOptions::default(),
            refresh_preconditioner: false,
        }
    }
}

/// Committed state of the load path after the last accepted increment.
#[derive(Debug, Clone)]
pub struct IncrementState {
    /// Number of accepted increments.
    pub increment: usize,
    /// Zero-mean displacement fluctuation.
    pub u: RealVectorField,
    /// Solved deviations from identity on the stress-controlled
    /// mean-gradient components.
    pub macro_acc: Vec<f64>,
    /// Internal material state (committed side).
    pub internal: StateField,
    /// Imposed mean gradient at the last accepted increment (identity on
    /// stress-controlled components).
    pub f_imposed: Mat3,
    /// Stress targets at the last accepted increment.
    pub stress_targets: Vec<f64>,
    pub mean_f: Mat3,
    pub mean_p: Mat3,
}

impl IncrementState {
    pub fn initial(
        grid: &Grid,
        map: &PhaseMap,
        materials: &[MaterialModel],
        layout: &ControlLayout,
    ) -> IncrementState {
        IncrementState {
            increment: 0,
            u: RealVectorField::zeros(grid.shape()),
            macro_acc: vec![0.0; layout.n_macro()],
            internal: StateField::new(map.shape().nvox(), materials),
            f_imposed: Mat3::identity(),
            stress_targets: vec![0.0; layout.n_macro()],
            mean_f: Mat3::identity(),
            mean_p: Mat3::ZERO,
        }
    }

    /// Total mean gradient: imposed part plus accumulated stress-slot
    /// deviations.
    pub fn f_mean(&self, layout: &ControlLayout) -> Mat3 {
        self.f_imposed + layout.embed_full(&self.macro_acc)
    }
}

/// One Newton update and the diagnostics of its inner linear solve.
#[derive(Debug, Clone)]
pub struct NewtonStep {
    pub delta_u: RealVectorField,
    pub delta_macro: Vec<f64>,
    /// Mean deformation gradient at the linearization point.
    pub mean_f: Mat3,
    /// Mean first Piola-Kirchhoff stress at the linearization point.
    pub mean_p: Mat3,
    pub inner_iterations: usize,
    pub inner_converged: bool,
    pub trace: Vec<IterationRecord>,
    /// Measured self-adjointness defect of the tangent operator,
    /// `|<Ax,y> - <x,Ay>| / max(|<Ax,y>|, |<x,Ay>|)`.
    pub asymmetry: f64,
}

/// Report of one accepted (or failed) increment.
#[derive(Debug, Clone)]
pub struct NewtonReport {
    pub increment: usize,
    pub converged: bool,
    /// Newton iterations used (summed over both halves when bisected).
    pub iterations: usize,
    /// Update measure per Newton iteration.
    pub step_norms: Vec<f64>,
    /// Inner conjugate-gradient iterations per Newton iteration.
    pub linear_iterations: Vec<usize>,
    /// Inner residual traces per Newton iteration.
    pub traces: Vec<Vec<IterationRecord>>,
    /// Nonlinear residuals verified from the accepted fields.
    pub residuals: ResidualTriple,
    pub bisected: bool,
}

/// One row of a load-path history.
#[derive(Debug, Clone)]
pub struct PathRow {
    pub increment: usize,
    /// Load-path fraction in (0, 1].
    pub fraction: f64,
    pub mean_f: Mat3,
    pub mean_p: Mat3,
    pub report: NewtonReport,
}

/// Completed or aborted load path: per-increment history plus the final
/// committed state. `failure` names the first failed increment, whose rows
/// are absent.
#[derive(Debug)]
pub struct PathOutcome {
    pub rows: Vec<PathRow>,
    pub state: IncrementState,
    pub failure: Option<String>,
}

/// The linearized finite-strain operator around a frozen tangent field.
pub struct TangentOperator<'a> {
    grid: &'a Grid,
    tangents: StiffnessField<'a>,
    layout: &'a ControlLayout,
}

impl<'a> TangentOperator<'a> {
    pub fn new(
        grid: &'a Grid,
        tangents: StiffnessField<'a>,
        layout: &'a ControlLayout,
    ) -> Result<TangentOperator<'a>> {
        if tangents.len() != grid.nvox() {
            return Err(CoreError::ShapeMismatch {
                expected: grid.shape().n,
                got: [tangents.len(), 1, 1],
            });
        }
        Ok(TangentOperator {
            grid,
            tangents,
            layout,
        })
    }

    /// Gradient of the state's fluctuation plus the constant embedded macro
    /// part.
    fn gradient_of(&self, x: &DofVector) -> Result<RealTensorField> {
        let u_hat = self.grid.forward(&x.fluct)?;
        let mut g = self.grid.inverse(&grad(self.grid, &u_hat)?)?;
        let constant = self.layout.embed_full(&x.macro_dofs);
        add_constant_mat(&mut g, &constant);
        Ok(g)
    }

    pub fn apply(&self, x: &DofVector) -> Result<(DofVector, Mat3)> {
        let g = self.gradient_of(x)?;
        let s = contract_stiffness_full(&self.tangents, &g);
        let mean_s = s.mean_mat();

        let s_hat = self.grid.forward(&s)?;
        // Divergence of a near-equilibrated field: cancellation residue, so
        // the unchecked inverse applies (see the small-strain operator).
        let mut fluct = self
            .grid
            .inverse_diagnostic(&div_tensor(self.grid, &s_hat)?)?;
        fluct.scale(-1.0);
        fluct.subtract_mean();

        let macro_dofs = self.layout.extract_full(&mean_s);
        Ok((DofVector { fluct, macro_dofs }, mean_s))
    }

    /// Incompatibility of the update's own gradient relative to the current
    /// mean gradient; a gradient field is compatible by construction, so
    /// this measures transform noise.
    pub fn compatibility(&self, x: &DofVector, f_mean: Mat3) -> Result<(f64, bool)> {
        let u_hat = self.grid.forward(&x.fluct)?;
        let numerator = curl_max_of_displacement(self.grid, &u_hat)?;
        let denominator = f_mean.frobenius();
        Ok(crate::residuals::guarded_ratio(
            numerator, denominator, numerator,
        ))
    }
}

fn add_constant_mat(field: &mut RealTensorField, c: &Mat3) {
    let flat: Vec<f64> = FULL_PAIRS.iter().map(|&(i, j)| c.0[i][j]).collect();
    if flat.iter().all(|v| *v == 0.0) {
        return;
    }
    for chunk in field.data_mut().chunks_exact_mut(9) {
        for (s, v) in chunk.iter_mut().zip(flat.iter()) {
            *s += v;
        }
    }
}

/// Deformation-gradient field of an iterate: constant mean plus the
/// gradient of the fluctuation.
pub fn deformation_gradient(
    grid: &Grid,
    u: &RealVectorField,
    f_mean: Mat3,
) -> Result<RealTensorField> {
    let u_hat = grid.forward(u)?;
    let mut f = grid.inverse(&grad(grid, &u_hat)?)?;
    add_constant_mat(&mut f, &f_mean);
    Ok(f)
}

/// Max-norm of the gradient of a displacement update.
fn gradient_max(grid: &Grid, du: &RealVectorField) -> Result<f64> {
    let du_hat = grid.forward(du)?;
    Ok(grid.inverse(&grad(grid, &du_hat)?)?.max_abs())
}

/// Log the measured self-adjointness defect of the tangent operator on the
/// pair (b, M b); returns the relative defect.
fn monitor_symmetry(
    op: &TangentOperator,
    precondition: &dyn Fn(&DofVector) -> Result<DofVector>,
    b: &DofVector,
    weights: &[f64],
) -> Result<f64> {
    let y = precondition(b)?;
    let (ab, _) = op.apply(b)?;
    let (ay, _) = op.apply(&y)?;
    let aby = ab.dot(&y, weights);
    let bay = b.dot(&ay, weights);
    let scale = aby.abs().max(bay.abs());
    let defect = if scale > 0.0 {
        (aby - bay).abs() / scale
    } else {
        0.0
    };
    if defect > ASYMMETRY_WARN {
        warn!("tangent operator asymmetry {defect:.3e}; conjugate gradients retained");
    } else {
        debug!("tangent operator asymmetry {defect:.3e}");
    }
    Ok(defect)
}

/// One Newton step around the iterate `(u, macro_acc)`: constitutive sweep,
/// linearized solve, update direction. Writes trial internal state for the
/// linearization point into `internal`. A preconditioner is built from this
/// sweep's average tangent when `preconditioner` holds none.
#[allow(clippy::too_many_arguments)]
pub fn newton_step(
    grid: &Grid,
    map: &PhaseMap,
    materials: &[MaterialModel],
    layout: &ControlLayout,
    u: &RealVectorField,
    macro_acc: &[f64],
    f_imposed: Mat3,
    stress_targets: &[f64],
    internal: &mut StateField,
    preconditioner: &mut Option<SpectralPreconditioner>,
    opts: &SolverOptions,
) -> Result<NewtonStep> {
    let f_mean = f_imposed + layout.embed_full(macro_acc);
    let f_field = deformation_gradient(grid, u, f_mean)?;
    let mut p_field = RealTensorField::zeros(grid.shape());
    let mut tangents = Vec::new();
    evaluate_all(
        materials,
        map.ids(),
        &f_field,
        internal,
        &mut p_field,
        &mut tangents,
    )?;
    let mean_p = p_field.mean_mat();
    let mean_f = f_field.mean_mat();

    // Right-hand side: +div P on the fluctuation block, target - <P> on the
    // macro rows.
    let p_hat = grid.forward(&p_field)?;
    let mut b_fluct = grid.inverse_diagnostic(&div_tensor(grid, &p_hat)?)?;
    b_fluct.subtract_mean();
    let achieved = layout.extract_full(&mean_p);
    let b_macro: Vec<f64> = stress_targets
        .iter()
        .zip(achieved.iter())
        .map(|(t, a)| t - a)
        .collect();
    let b = DofVector {
        fluct: b_fluct,
        macro_dofs: b_macro,
    };

    if preconditioner.is_none() && opts.use_preconditioner {
        let k_avg = average_tangent(&tangents);
        *preconditioner = Some(SpectralPreconditioner::build(grid, &k_avg, layout)?);
    }

    let op = TangentOperator::new(
        grid,
        StiffnessField::PerVoxel(&tangents),
        layout,
    )?;
    let apply = |x: &DofVector| op.apply(x);
    let precondition = |r: &DofVector| match preconditioner.as_ref() {
        Some(m) => m.apply(grid, r),
        None => {
            let mut z = r.clone();
            z.fluct.subtract_mean();
            Ok(z)
        }
    };
    let compatibility = |x: &DofVector| op.compatibility(x, f_mean);

    let asymmetry = monitor_symmetry(&op, &precondition, &b, layout.weights())?;

    let inputs = PcgInputs {
        apply: &apply,
        precondition: &precondition,
        compatibility: &compatibility,
        macro_weights: layout.weights(),
        mean_stress_base: mean_p,
        stress_targets,
    };
    let x0 = DofVector::zeros(grid.shape(), layout.n_macro());
    let out = pcg_solve(&inputs, &b, x0, Mat3::ZERO, opts, 0)?;

    Ok(NewtonStep {
        delta_u: out.x.fluct,
        delta_macro: out.x.macro_dofs,
        mean_f,
        mean_p,
        inner_iterations: out.iterations,
        inner_converged: out.cheap_converged || out.stagnated,
        trace: out.trace,
        asymmetry,
    })
}

/// Why a Newton attempt on one (sub-)increment did not produce an accepted
/// state.
enum AttemptFailure {
    /// Update measure grew by more than [`DIVERGENCE_GROWTH`]; eligible for
    /// bisection.
    Diverged { iteration: usize, measure: f64 },
    /// Budget exhausted without meeting the tolerance.
    Exhausted { last_measure: f64 },
    /// Inner linear solve neither met its tolerances nor stagnated at the
    /// algebraic floor.
    InnerSolve { iteration: usize },
    /// Constitutive or structural failure.
    Hard(CoreError),
}

struct AcceptedAttempt {
    u: RealVectorField,
    macro_acc: Vec<f64>,
    mean_f: Mat3,
    mean_p: Mat3,
    iterations: usize,
    step_norms: Vec<f64>,
    linear_iterations: Vec<usize>,
    traces: Vec<Vec<IterationRecord>>,
    residuals: ResidualTriple,
}

/// Newton iteration toward the given targets, starting from the committed
/// state. Leaves trial internal state at the accepted iterate (the caller
/// commits); never touches committed internal state.
#[allow(clippy::too_many_arguments)]
fn attempt_increment(
    grid: &Grid,
    map: &PhaseMap,
    materials: &[MaterialModel],
    layout: &ControlLayout,
    state: &mut IncrementState,
    f_imposed: Mat3,
    stress_targets: &[f64],
    opts: &NewtonOptions,
) -> std::result::Result<AcceptedAttempt, AttemptFailure> {
    let mut u = state.u.clone();
    let mut macro_acc = state.macro_acc.clone();
    state.internal.reset_trial();
    let mut preconditioner: Option<SpectralPreconditioner> = None;

    let mut step_norms = Vec::new();
    let mut linear_iterations = Vec::new();
    let mut traces = Vec::new();
    let mut prev_measure = f64::INFINITY;

    for i in 1..=opts.max_newton {
        if opts.refresh_preconditioner {
            preconditioner = None;
        }
        let step = newton_step(
            grid,
            map,
            materials,
            layout,
            &u,
            &macro_acc,
            f_imposed,
            stress_targets,
            &mut state.internal,
            &mut preconditioner,
            &opts.linear,
        )
        .map_err(AttemptFailure::Hard)?;
        if !step.inner_converged {
            return Err(AttemptFailure::InnerSolve { iteration: i });
        }

        let grad_measure = gradient_max(grid, &step.delta_u).map_err(AttemptFailure::Hard)?;
        let macro_measure = step
            .delta_macro
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()));
        let measure = grad_measure.max(macro_measure);
        if !measure.is_finite() {
            return Err(AttemptFailure::Hard(CoreError::NumericalBreakdown {
                iteration: i,
                reason: "non-finite Newton update".into(),
            }));
        }
        step_norms.push(measure);
        linear_iterations.push(step.inner_iterations);
        traces.push(step.trace);
        debug!(
            "newton iteration {i}: update measure {measure:.3e}, inner iterations {}",
            step.inner_iterations
        );

        if i > 1 && measure > DIVERGENCE_GROWTH * prev_measure {
            return Err(AttemptFailure::Diverged {
                iteration: i,
                measure,
            });
        }
        prev_measure = prev_measure.min(measure);

        u.axpy(1.0, &step.delta_u);
        u.subtract_mean();
        for (a, d) in macro_acc.iter_mut().zip(step.delta_macro.iter()) {
            *a += d;
        }

        if measure < opts.tolerance {
            // Acceptance sweep at the updated iterate so the trial internal
            // state and the reported stresses belong to the accepted fields.
            let f_mean = f_imposed + layout.embed_full(&macro_acc);
            let f_field =
                deformation_gradient(grid, &u, f_mean).map_err(AttemptFailure::Hard)?;
            let mut p_field = RealTensorField::zeros(grid.shape());
            let mut tangents = Vec::new();
            evaluate_all(
                materials,
                map.ids(),
                &f_field,
                &mut state.internal,
                &mut p_field,
                &mut tangents,
            )
            .map_err(AttemptFailure::Hard)?;

            let (equilibrium, equilibrium_absolute) =
                equilibrium_residual_tensor(grid, &p_field).map_err(AttemptFailure::Hard)?;
            // The gradient field is compatible by construction; measure the
            // curl from the displacement spectrum so the number is not
            // dominated by the round trip through real space.
            let u_hat = grid.forward(&u).map_err(AttemptFailure::Hard)?;
            let numerator =
                curl_max_of_displacement(grid, &u_hat).map_err(AttemptFailure::Hard)?;
            let (compatibility, compatibility_absolute) = crate::residuals::guarded_ratio(
                numerator,
                (f_field.mean_mat() - Mat3::identity()).frobenius(),
                f_field.max_abs(),
            );
            let mean_p = p_field.mean_mat();
            let achieved = layout.extract_full(&mean_p);
            let pairs: Vec<(f64, f64)> = stress_targets
                .iter()
                .zip(achieved.iter())
                .map(|(t, a)| (*t, *a))
                .collect();
            let (loading, loading_absolute) = loading_residual(&pairs);

            return Ok(AcceptedAttempt {
                u,
                macro_acc,
                mean_f: f_field.mean_mat(),
                mean_p,
                iterations: i,
                step_norms,
                linear_iterations,
                traces,
                residuals: ResidualTriple {
                    equilibrium,
                    compatibility,
                    loading,
                    equilibrium_absolute,
                    compatibility_absolute,
                    loading_absolute,
                },
            });
        }
    }

    Err(AttemptFailure::Exhausted {
        last_measure: prev_measure,
    })
}

struct CommitSummary {
    iterations: usize,
    step_norms: Vec<f64>,
    linear_iterations: Vec<usize>,
    traces: Vec<Vec<IterationRecord>>,
    residuals: ResidualTriple,
}

fn commit_attempt(
    state: &mut IncrementState,
    accepted: AcceptedAttempt,
    f_imposed: Mat3,
    stress_targets: &[f64],
) -> CommitSummary {
    state.u = accepted.u;
    state.macro_acc = accepted.macro_acc;
    state.internal.commit();
    state.f_imposed = f_imposed;
    state.stress_targets = stress_targets.to_vec();
    state.mean_f = accepted.mean_f;
    state.mean_p = accepted.mean_p;
    CommitSummary {
        iterations: accepted.iterations,
        step_norms: accepted.step_norms,
        linear_iterations: accepted.linear_iterations,
        traces: accepted.traces,
        residuals: accepted.residuals,
    }
}

fn failure_reason(increment: usize, failure: &AttemptFailure) -> String {
    match failure {
        AttemptFailure::Diverged { iteration, measure } => format!(
            "newton update diverged at iteration {iteration} (measure {measure:.3e}) in increment {increment}"
        ),
        AttemptFailure::Exhausted { last_measure } => format!(
            "newton budget exhausted in increment {increment} (best update measure {last_measure:.3e})"
        ),
        AttemptFailure::InnerSolve { iteration } => format!(
            "inner linear solve failed to converge at newton iteration {iteration} of increment {increment}"
        ),
        AttemptFailure::Hard(e) => format!("increment {increment}: {e}"),
    }
}

/// Advance the state by one increment toward the given targets. On a
/// tripped divergence guard the increment is bisected once (two half
/// steps); any other failure — or a failing half — aborts with
/// [`CoreError::IncrementFailed`].
#[allow(clippy::too_many_arguments)]
pub fn run_increment(
    grid: &Grid,
    map: &PhaseMap,
    materials: &[MaterialModel],
    layout: &ControlLayout,
    state: &mut IncrementState,
    f_imposed: Mat3,
    stress_targets: &[f64],
    opts: &NewtonOptions,
) -> Result<NewtonReport> {
    let increment = state.increment + 1;
    match attempt_increment(
        grid,
        map,
        materials,
        layout,
        state,
        f_imposed,
        stress_targets,
        opts,
    ) {
        Ok(accepted) => {
            let accepted = commit_attempt(state, accepted, f_imposed, stress_targets);
            state.increment = increment;
            Ok(NewtonReport {
                increment,
                converged: true,
                iterations: accepted.iterations,
                step_norms: accepted.step_norms,
                linear_iterations: accepted.linear_iterations,
                traces: accepted.traces,
                residuals: accepted.residuals,
                bisected: false,
            })
        }
        Err(AttemptFailure::Diverged { iteration, measure }) => {
            warn!(
                "newton update grew {DIVERGENCE_GROWTH}x at iteration {iteration} \
                 (measure {measure:.3e}); bisecting increment {increment}"
            );
            let mid_f = midpoint_mat(&state.f_imposed, &f_imposed);
            let mid_targets: Vec<f64> = state
                .stress_targets
                .iter()
                .zip(stress_targets.iter())
                .map(|(a, b)| 0.5 * (a + b))
                .collect();

            let first = attempt_increment(
                grid, map, materials, layout, state, mid_f, &mid_targets, opts,
            )
            .map_err(|f| CoreError::IncrementFailed {
                increment,
                reason: format!("after bisection (first half): {}", failure_reason(increment, &f)),
            })?;
            let first = commit_attempt(state, first, mid_f, &mid_targets);

            let second = attempt_increment(
                grid,
                map,
                materials,
                layout,
                state,
                f_imposed,
                stress_targets,
                opts,
            )
            .map_err(|f| CoreError::IncrementFailed {
                increment,
                reason: format!("after bisection (second half): {}", failure_reason(increment, &f)),
            })?;
            let second = commit_attempt(state, second, f_imposed, stress_targets);
            state.increment = increment;

            let mut step_norms = first.step_norms;
            step_norms.extend(second.step_norms);
            let mut linear_iterations = first.linear_iterations;
            linear_iterations.extend(second.linear_iterations);
            let mut traces = first.traces;
            traces.extend(second.traces);
            Ok(NewtonReport {
                increment,
                converged: true,
                iterations: first.iterations + second.iterations,
                step_norms,
                linear_iterations,
                traces,
                residuals: second.residuals,
                bisected: true,
            })
        }
        Err(other) => Err(CoreError::IncrementFailed {
            increment,
            reason: failure_reason(increment, &other),
        }),
    }
}

fn midpoint_mat(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = Mat3::ZERO;
    for i in 0..3 {
        for j in 0..3 {
            out.0[i][j] = 0.5 * (a.0[i][j] + b.0[i][j]);
        }
    }
    out
}

/// Run the whole load path of a finite-strain load specification. The first
/// failing increment aborts the path; its error message is recorded and the
/// rows of the accepted increments are returned.
pub fn run_load_path(
    grid: &Grid,
    map: &PhaseMap,
    materials: &[MaterialModel],
    load: &LoadSpec,
    opts: &NewtonOptions,
) -> Result<PathOutcome> {
    load.validate()?;
    if load.kinematics != Kinematics::FiniteStrain {
        return Err(CoreError::InvalidLoad(
            "finite-strain driver requires finite-strain kinematics".into(),
        ));
    }
    if map.shape() != grid.shape() {
        return Err(CoreError::ShapeMismatch {
            expected: grid.shape().n,
            got: map.shape().n,
        });
    }
    if map.phase_count() as usize != materials.len() {
        return Err(CoreError::InvalidMicrostructure(format!(
            "phase map declares {} phases but {} materials were supplied",
            map.phase_count(),
            materials.len()
        )));
    }

    let layout = load.layout();
    let mut state = IncrementState::initial(grid, map, materials, &layout);
    let mut rows = Vec::with_capacity(load.increments);
    let mut failure = None;

    for k in 1..=load.increments {
        let s = k as f64 / load.increments as f64;
        let f_imposed = load.imposed_gradient(s);
        let targets = load.stress_targets_at(s);
        match run_increment(
            grid, map, materials, &layout, &mut state, f_imposed, &targets, opts,
        ) {
            Ok(report) => {
                rows.push(PathRow {
                    increment: k,
                    fraction: s,
                    mean_f: state.mean_f,
                    mean_p: state.mean_p,
                    report,
                });
            }
            Err(e @ CoreError::IncrementFailed { .. }) => {
                warn!("load path aborted: {e}");
                failure = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        }
    }

    Ok(PathOutcome {
        rows,
        state,
        failure,
    })
}
