//! `perihom` — FFT-based periodic homogenization of heterogeneous solids.
//!
//! Verbs: `run <config.toml>` solves and writes artifacts, `gen` produces
//! microstructure files, `diff` compares two VTK exports field by field.
//! Exit codes: 0 success/converged, 1 usage or configuration error,
//! 2 solver non-convergence.

mod config;
mod run;
mod vtk;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use perihom_core::grid::Grid;
use perihom_core::micro::{random_spheres, save_phase_map, sphere_inclusion};

#[derive(Parser)]
#[command(
    name = "perihom",
    version,
    about = "Matrix-free spectral homogenization of periodic heterogeneous solids"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the problem described by a TOML config and write artifacts.
    Run {
        /// Path to the run configuration.
        config: PathBuf,
    },
    /// Generate a voxel microstructure file.
    Gen {
        #[command(subcommand)]
        generator: Generator,
    },
    /// Compare two VTK exports; prints the relative difference per field.
    Diff {
        a: PathBuf,
        b: PathBuf,
    },
}

#[derive(Subcommand)]
enum Generator {
    /// Centered spherical inclusion at a target volume fraction.
    Sphere {
        /// Voxels per edge.
        #[arg(long)]
        n: usize,
        #[arg(long)]
        volume_fraction: f64,
        /// Cell edge length.
        #[arg(long, default_value_t = 1.0)]
        length: f64,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Random periodic non-overlapping equal spheres.
    Spheres {
        /// Voxels per edge.
        #[arg(long)]
        n: usize,
        #[arg(long)]
        count: usize,
        /// Total sphere volume fraction.
        #[arg(long)]
        porosity: f64,
        #[arg(long)]
        seed: u64,
        /// Cell edge length.
        #[arg(long, default_value_t = 1.0)]
        length: f64,
        #[arg(short, long)]
        output: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    let outcome = match cli.command {
        Command::Run { config } => run::execute(&config),
        Command::Gen { generator } => generate(generator).map(|()| 0),
        Command::Diff { a, b } => diff(&a, &b).map(|()| 0),
    };
    match outcome {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn generate(generator: Generator) -> Result<()> {
    let (map, output) = match generator {
        Generator::Sphere {
            n,
            volume_fraction,
            length,
            output,
        } => {
            let grid = Grid::new([n; 3], [length; 3])?;
            (sphere_inclusion(grid.shape(), volume_fraction)?, output)
        }
        Generator::Spheres {
            n,
            count,
            porosity,
            seed,
            length,
            output,
        } => {
            let grid = Grid::new([n; 3], [length; 3])?;
            (random_spheres(grid.shape(), count, porosity, seed)?, output)
        }
    };
    save_phase_map(&map, &output)?;
    let vf = map.volume_fractions();
    println!(
        "wrote {} ({} phases, volume fractions {})",
        output.display(),
        map.phase_count(),
        vf.iter()
            .map(|v| format!("{v:.4}"))
            .collect::<Vec<_>>()
            .join(" / ")
    );
    Ok(())
}

fn diff(a: &PathBuf, b: &PathBuf) -> Result<()> {
    let da = vtk::read_vtk(a)?;
    let db = vtk::read_vtk(b)?;
    if da.dimensions != db.dimensions {
        bail!(
            "dimension mismatch: {:?} vs {:?}",
            da.dimensions,
            db.dimensions
        );
    }
    if da.origin != db.origin || da.spacing != db.spacing {
        println!(
            "note: geometry differs (origin {:?} vs {:?}, spacing {:?} vs {:?})",
            da.origin, db.origin, da.spacing, db.spacing
        );
    }
    let fields_a: BTreeMap<&str, &vtk::VtkField> =
        da.fields.iter().map(|f| (f.name.as_str(), f)).collect();
    let fields_b: BTreeMap<&str, &vtk::VtkField> =
        db.fields.iter().map(|f| (f.name.as_str(), f)).collect();
    for name in fields_a.keys() {
        if !fields_b.contains_key(name) {
            bail!("field {name} is only present in {}", a.display());
        }
    }
    for name in fields_b.keys() {
        if !fields_a.contains_key(name) {
            bail!("field {name} is only present in {}", b.display());
        }
    }
    for (name, fa) in &fields_a {
        let fb = fields_b[name];
        if fa.kind != fb.kind {
            bail!("field {name} has different kinds in the two files");
        }
        let d = vtk::relative_difference(&fa.data, &fb.data);
        println!("field {name}: {d:.3e}");
    }
    Ok(())
}
