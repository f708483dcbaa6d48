//! Run-configuration parsing and validation.
//!
//! The configuration is TOML with strict key checking: unknown keys are
//! rejected so typos surface as errors instead of silently falling back to
//! defaults. Validation messages name the offending key.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use perihom_core::load::{Control, Kinematics, LoadSpec};
use perihom_core::materials::MaterialModel;
use perihom_core::micro::{load_phase_map, random_spheres, sphere_inclusion, PhaseMap};
use perihom_core::nonlinear::NewtonOptions;
use perihom_core::residuals::ResidualTolerances;
use perihom_core::solver::SolverOptions;
use perihom_core::grid::{Grid, GridShape};
use serde::Deserialize;

/// Small-strain component names in storage order (diagonal, then the
/// off-diagonal pairs yz, xz, xy).
pub const SYM_NAMES: [&str; 6] = ["xx", "yy", "zz", "yz", "xz", "xy"];
/// Deformation-gradient component names in row-major storage order.
pub const FULL_NAMES: [&str; 9] = [
    "xx", "xy", "xz", "yx", "yy", "yz", "zx", "zy", "zz",
];

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridConfig,
    pub microstructure: MicrostructureConfig,
    #[serde(rename = "material")]
    pub materials: Vec<MaterialConfig>,
    pub load: LoadConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub n: [usize; 3],
    #[serde(default = "unit_lengths")]
    pub length: [f64; 3],
}

fn unit_lengths() -> [f64; 3] {
    [1.0; 3]
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MicrostructureConfig {
    /// One of "homogeneous", "sphere", "spheres", "file".
    pub kind: String,
    pub volume_fraction: Option<f64>,
    pub count: Option<usize>,
    pub porosity: Option<f64>,
    pub seed: Option<u64>,
    pub path: Option<PathBuf>,
}

impl MicrostructureConfig {
    /// Build the phase map on `shape`; `base_dir` anchors relative file
    /// paths to the config file's directory.
    pub fn build(&self, shape: GridShape, base_dir: &Path) -> Result<PhaseMap> {
        let forbid = |key: &str, set: bool| -> Result<()> {
            if set {
                bail!(
                    "[microstructure] key `{key}` is not valid for kind \"{}\"",
                    self.kind
                );
            }
            Ok(())
        };
        match self.kind.as_str() {
            "homogeneous" => {
                forbid("volume_fraction", self.volume_fraction.is_some())?;
                forbid("count", self.count.is_some())?;
                forbid("porosity", self.porosity.is_some())?;
                forbid("seed", self.seed.is_some())?;
                forbid("path", self.path.is_some())?;
                Ok(PhaseMap::new(shape, 1, vec![0; shape.nvox()])?)
            }
            "sphere" => {
                forbid("count", self.count.is_some())?;
                forbid("porosity", self.porosity.is_some())?;
                forbid("seed", self.seed.is_some())?;
                forbid("path", self.path.is_some())?;
                let vf = self.volume_fraction.with_context(|| {
                    "[microstructure] kind \"sphere\" requires `volume_fraction`"
                })?;
                Ok(sphere_inclusion(shape, vf)?)
            }
            "spheres" => {
                forbid("volume_fraction", self.volume_fraction.is_some())?;
                forbid("path", self.path.is_some())?;
                let count = self
                    .count
                    .context("[microstructure] kind \"spheres\" requires `count`")?;
                let porosity = self
                    .porosity
                    .context("[microstructure] kind \"spheres\" requires `porosity`")?;
                let seed = self
                    .seed
                    .context("[microstructure] kind \"spheres\" requires `seed`")?;
                Ok(random_spheres(shape, count, porosity, seed)?)
            }
            "file" => {
                forbid("volume_fraction", self.volume_fraction.is_some())?;
                forbid("count", self.count.is_some())?;
                forbid("porosity", self.porosity.is_some())?;
                forbid("seed", self.seed.is_some())?;
                let rel = self
                    .path
                    .as_ref()
                    .context("[microstructure] kind \"file\" requires `path`")?;
                let path = if rel.is_absolute() {
                    rel.clone()
                } else {
                    base_dir.join(rel)
                };
                let map = load_phase_map(&path)
                    .with_context(|| format!("loading microstructure {}", path.display()))?;
                if map.shape().n != shape.n {
                    bail!(
                        "[microstructure] file {} holds a {}x{}x{} map but [grid] n is \
                         {}x{}x{}",
                        path.display(),
                        map.shape().n[0],
                        map.shape().n[1],
                        map.shape().n[2],
                        shape.n[0],
                        shape.n[1],
                        shape.n[2]
                    );
                }
                // The [grid] section governs the cell geometry; re-anchor the
                // stored ids on it so the edge lengths agree.
                Ok(PhaseMap::new(shape, map.phase_count(), map.ids().to_vec())?)
            }
            other => bail!(
                "[microstructure] unknown kind \"{other}\"; expected \"homogeneous\", \
                 \"sphere\", \"spheres\", or \"file\""
            ),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialConfig {
    /// One of "linear_elastic", "saint_venant_kirchhoff", "j2_plasticity".
    pub kind: String,
    pub youngs_modulus: f64,
    pub poisson_ratio: f64,
    pub yield_stress: Option<f64>,
    pub hardening: Option<f64>,
}

impl MaterialConfig {
    pub fn to_model(&self, index: usize) -> Result<MaterialModel> {
        let forbid = |key: &str, set: bool| -> Result<()> {
            if set {
                bail!(
                    "[[material]] #{index}: key `{key}` is only valid for kind \
                     \"j2_plasticity\""
                );
            }
            Ok(())
        };
        let model = match self.kind.as_str() {
            "linear_elastic" => {
                forbid("yield_stress", self.yield_stress.is_some())?;
                forbid("hardening", self.hardening.is_some())?;
                MaterialModel::linear_elastic(self.youngs_modulus, self.poisson_ratio)?
            }
            "saint_venant_kirchhoff" => {
                forbid("yield_stress", self.yield_stress.is_some())?;
                forbid("hardening", self.hardening.is_some())?;
                MaterialModel::saint_venant_kirchhoff(self.youngs_modulus, self.poisson_ratio)?
            }
            "j2_plasticity" => {
                let yield_stress = self.yield_stress.with_context(|| {
                    format!("[[material]] #{index}: kind \"j2_plasticity\" requires `yield_stress`")
                })?;
                let hardening = self.hardening.with_context(|| {
                    format!("[[material]] #{index}: kind \"j2_plasticity\" requires `hardening`")
                })?;
                MaterialModel::j2_plasticity(perihom_core::materials::J2Params {
                    e: self.youngs_modulus,
                    nu: self.poisson_ratio,
                    yield_stress,
                    hardening,
                })?
            }
            other => bail!(
                "[[material]] #{index}: unknown kind \"{other}\"; expected \
                 \"linear_elastic\", \"saint_venant_kirchhoff\", or \"j2_plasticity\""
            ),
        };
        Ok(model)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadConfig {
    /// "small_strain" or "finite_strain".
    pub kinematics: String,
    /// Imposed mean-strain components at full load (small strain only).
    pub strain: Option<BTreeMap<String, f64>>,
    /// Imposed mean deformation-gradient entries at full load (finite
    /// strain only); unspecified entries stay at identity.
    pub gradient: Option<BTreeMap<String, f64>>,
    /// Imposed conjugate mean-stress components at full load.
    pub stress: Option<BTreeMap<String, f64>>,
    #[serde(default = "one")]
    pub increments: usize,
}

fn one() -> usize {
    1
}

fn check_names(
    table: &BTreeMap<String, f64>,
    names: &[&str],
    table_key: &str,
) -> Result<()> {
    for key in table.keys() {
        if !names.contains(&key.as_str()) {
            bail!(
                "[load] unknown component `{key}` in `{table_key}`; valid names: {}",
                names.join(", ")
            );
        }
    }
    Ok(())
}

impl LoadConfig {
    pub fn to_load_spec(&self) -> Result<LoadSpec> {
        let stress = self.stress.clone().unwrap_or_default();
        match self.kinematics.as_str() {
            "small_strain" => {
                if self.gradient.is_some() {
                    bail!(
                        "[load] `gradient` is only valid for finite_strain; use `strain` \
                         for small_strain loads"
                    );
                }
                if self.increments != 1 {
                    bail!(
                        "[load] increments must be 1 for small_strain (the linear solve \
                         is path-independent), got {}",
                        self.increments
                    );
                }
                let strain = self.strain.clone().unwrap_or_default();
                check_names(&strain, &SYM_NAMES, "strain")?;
                check_names(&stress, &SYM_NAMES, "stress")?;
                let mut control = vec![Control::Strain; 6];
                let mut strain_targets = vec![0.0; 6];
                let mut stress_targets = vec![0.0; 6];
                for (a, name) in SYM_NAMES.iter().enumerate() {
                    let e = strain.get(*name);
                    let s = stress.get(*name);
                    match (e, s) {
                        (Some(_), Some(_)) => bail!(
                            "[load] component `{name}` has both a strain and a stress \
                             target; impose exactly one"
                        ),
                        (None, Some(v)) => {
                            control[a] = Control::Stress;
                            stress_targets[a] = *v;
                        }
                        (Some(v), None) => strain_targets[a] = *v,
                        (None, None) => {}
                    }
                }
                Ok(LoadSpec {
                    kinematics: Kinematics::SmallStrain,
                    control,
                    strain_targets,
                    stress_targets,
                    increments: 1,
                    time_per_increment: 1.0,
                })
            }
            "finite_strain" => {
                if self.strain.is_some() {
                    bail!(
                        "[load] `strain` is only valid for small_strain; use `gradient` \
                         for finite_strain loads"
                    );
                }
                let gradient = self.gradient.clone().unwrap_or_default();
                check_names(&gradient, &FULL_NAMES, "gradient")?;
                check_names(&stress, &FULL_NAMES, "stress")?;
                let mut control = vec![Control::Strain; 9];
                let mut strain_targets = vec![0.0; 9];
                let mut stress_targets = vec![0.0; 9];
                for (a, name) in FULL_NAMES.iter().enumerate() {
                    let identity = if name.as_bytes()[0] == name.as_bytes()[1] {
                        1.0
                    } else {
                        0.0
                    };
                    strain_targets[a] = identity;
                    let g = gradient.get(*name);
                    let s = stress.get(*name);
                    match (g, s) {
                        (Some(_), Some(_)) => bail!(
                            "[load] component `{name}` has both a gradient and a stress \
                             target; impose exactly one"
                        ),
                        (None, Some(v)) => {
                            control[a] = Control::Stress;
                            stress_targets[a] = *v;
                        }
                        (Some(v), None) => strain_targets[a] = *v,
                        (None, None) => {}
                    }
                }
                if self.increments == 0 {
                    bail!("[load] increments must be at least 1");
                }
                Ok(LoadSpec {
                    kinematics: Kinematics::FiniteStrain,
                    control,
                    strain_targets,
                    stress_targets,
                    increments: self.increments,
                    time_per_increment: 1.0,
                })
            }
            other => bail!(
                "[load] unknown kinematics \"{other}\"; expected \"small_strain\" or \
                 \"finite_strain\""
            ),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub equilibrium_tolerance: f64,
    pub compatibility_tolerance: f64,
    pub loading_tolerance: f64,
    pub newton_tolerance: f64,
    pub max_iterations: usize,
    pub max_newton_iterations: usize,
    pub preconditioner: bool,
    pub refresh_preconditioner: bool,
    /// Worker threads for the kernels; 0 keeps the library default.
    pub threads: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let solver = SolverOptions::default();
        let newton = NewtonOptions::default();
        SolverConfig {
            equilibrium_tolerance: solver.tolerances.equilibrium,
            compatibility_tolerance: solver.tolerances.compatibility,
            loading_tolerance: solver.tolerances.loading,
            newton_tolerance: newton.tolerance,
            max_iterations: solver.max_iterations,
            max_newton_iterations: newton.max_newton,
            preconditioner: solver.use_preconditioner,
            refresh_preconditioner: newton.refresh_preconditioner,
            threads: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("equilibrium_tolerance", self.equilibrium_tolerance),
            ("compatibility_tolerance", self.compatibility_tolerance),
            ("loading_tolerance", self.loading_tolerance),
            ("newton_tolerance", self.newton_tolerance),
        ] {
            if !(v.is_finite() && v > 0.0) {
                bail!("[solver] `{key}` must be positive and finite, got {v}");
            }
        }
        if self.max_iterations == 0 {
            bail!("[solver] `max_iterations` must be at least 1");
        }
        if self.max_newton_iterations == 0 {
            bail!("[solver] `max_newton_iterations` must be at least 1");
        }
        Ok(())
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            tolerances: ResidualTolerances {
                equilibrium: self.equilibrium_tolerance,
                compatibility: self.compatibility_tolerance,
                loading: self.loading_tolerance,
            },
            max_iterations: self.max_iterations,
            use_preconditioner: self.preconditioner,
            ..SolverOptions::default()
        }
    }

    pub fn newton_options(&self) -> NewtonOptions {
        NewtonOptions {
            tolerance: self.newton_tolerance,
            max_newton: self.max_newton_iterations,
            linear: self.solver_options(),
            refresh_preconditioner: self.refresh_preconditioner,
        }
    }
}

/// Which increments get field snapshots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldSelection {
    None,
    Last,
    All,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub directory: PathBuf,
    pub basename: String,
    /// "none", "last", or "all": increments whose fields are exported.
    pub fields: String,
    /// Magnification applied to exported displacements (deformed-shape
    /// plots conventionally exaggerate them).
    pub displacement_scale: f64,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            directory: PathBuf::from("."),
            basename: "run".into(),
            fields: "last".into(),
            displacement_scale: 1.0,
        }
    }
}

impl OutputConfig {
    pub fn field_selection(&self) -> Result<FieldSelection> {
        match self.fields.as_str() {
            "none" => Ok(FieldSelection::None),
            "last" => Ok(FieldSelection::Last),
            "all" => Ok(FieldSelection::All),
            other => bail!(
                "[output] unknown fields selection \"{other}\"; expected \"none\", \
                 \"last\", or \"all\""
            ),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.field_selection()?;
        if !(self.displacement_scale.is_finite()) {
            bail!(
                "[output] `displacement_scale` must be finite, got {}",
                self.displacement_scale
            );
        }
        if self.basename.is_empty() {
            bail!("[output] `basename` must not be empty");
        }
        Ok(())
    }
}

/// Everything a run needs, resolved and validated.
pub struct ResolvedRun {
    pub grid: Grid,
    pub map: PhaseMap,
    pub materials: Vec<MaterialModel>,
    pub load: LoadSpec,
    pub config: RunConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).context("parsing config")?;
        Ok(cfg)
    }

    /// Validate every section and build the solver inputs. `base_dir`
    /// anchors relative paths.
    pub fn resolve(self, base_dir: &Path) -> Result<ResolvedRun> {
        self.solver.validate()?;
        self.output.validate()?;
        let grid = Grid::new(self.grid.n, self.grid.length).context("[grid]")?;
        let map = self.microstructure.build(grid.shape(), base_dir)?;
        if self.materials.is_empty() {
            bail!("at least one [[material]] section is required");
        }
        if self.materials.len() != map.phase_count() as usize {
            bail!(
                "config declares {} [[material]] sections but the microstructure has {} \
                 phases; every phase id needs a material",
                self.materials.len(),
                map.phase_count()
            );
        }
        let materials: Vec<MaterialModel> = self
            .materials
            .iter()
            .enumerate()
            .map(|(i, m)| m.to_model(i))
            .collect::<Result<_>>()?;
        let load = self.load.to_load_spec()?;
        load.validate().context("[load]")?;
        Ok(ResolvedRun {
            grid,
            map,
            materials,
            load,
            config: self,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [grid]
        n = [5, 5, 5]

        [microstructure]
        kind = "homogeneous"

        [[material]]
        kind = "linear_elastic"
        youngs_modulus = 70.0
        poisson_ratio = 0.3

        [load]
        kinematics = "small_strain"
        strain = { xx = 0.001 }
    "#;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        let run = cfg.resolve(Path::new(".")).unwrap();
        assert_eq!(run.load.control, vec![Control::Strain; 6]);
        assert_eq!(run.load.strain_targets[0], 0.001);
        assert_eq!(run.load.increments, 1);
        assert_eq!(run.config.solver.max_iterations, 10_000);
        assert!(run.config.solver.preconditioner);
        assert_eq!(run.config.output.basename, "run");
        assert_eq!(run.config.output.fields, "last");
    }

    #[test]
    fn unknown_key_is_rejected() {
        let text = MINIMAL.replace("[load]", "[load]\n        typo_key = 1");
        let err = RunConfig::parse(&text).unwrap_err();
        assert!(format!("{err:#}").contains("typo_key"), "{err:#}");
    }

    #[test]
    fn conflicting_targets_name_the_component() {
        let text = MINIMAL.replace(
            "strain = { xx = 0.001 }",
            "strain = { xx = 0.001 }\n        stress = { xx = 0.05 }",
        );
        let cfg = RunConfig::parse(&text).unwrap();
        let msg = match cfg.resolve(Path::new(".")) {
            Err(e) => format!("{e:#}"),
            Ok(_) => panic!("conflicting targets were accepted"),
        };
        assert!(msg.contains("`xx`") && msg.contains("exactly one"), "{msg}");
    }

    #[test]
    fn missing_material_for_phase_is_rejected() {
        let text = MINIMAL.replace(
            "kind = \"homogeneous\"",
            "kind = \"sphere\"\n        volume_fraction = 0.2",
        );
        let cfg = RunConfig::parse(&text).unwrap();
        let msg = match cfg.resolve(Path::new(".")) {
            Err(e) => format!("{e:#}"),
            Ok(_) => panic!("uncovered phase was accepted"),
        };
        assert!(msg.contains("2 phases"), "{msg}");
    }

    #[test]
    fn finite_strain_defaults_to_identity() {
        let text = MINIMAL.replace(
            "kinematics = \"small_strain\"\n        strain = { xx = 0.001 }",
            "kinematics = \"finite_strain\"\n        gradient = { xx = 1.2 }\n        increments = 3",
        );
        let cfg = RunConfig::parse(&text).unwrap();
        let run = cfg.resolve(Path::new(".")).unwrap();
        assert_eq!(run.load.strain_targets[0], 1.2);
        assert_eq!(run.load.strain_targets[4], 1.0);
        assert_eq!(run.load.strain_targets[1], 0.0);
        assert_eq!(run.load.increments, 3);
    }
}
