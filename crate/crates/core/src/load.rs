//! Macroscopic load control: which components of the mean strain (or
//! deformation gradient) are imposed, which are solved for so that the mean
//! stress hits a target, and how the extra macroscopic unknowns are carried
//! alongside the displacement fluctuation.
//!
//! Small-strain problems control the six independent components of the
//! symmetric mean strain/stress; finite-strain problems control all nine
//! components of the mean deformation gradient / first Piola-Kirchhoff
//! stress. Every component is under exactly one kind of control.

use crate::errors::{CoreError, Result};
use crate::field::RealVectorField;
use crate::grid::GridShape;
use crate::tensor::{Mat3, Sym3, FULL_PAIRS, SYM_PAIRS, SYM_WEIGHTS};

/// Strain measure the problem is posed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kinematics {
    SmallStrain,
    FiniteStrain,
}

impl Kinematics {
    /// Number of independent macroscopic components.
    pub fn components(&self) -> usize {
        match self {
            Kinematics::SmallStrain => 6,
            Kinematics::FiniteStrain => 9,
        }
    }
}

/// Control assignment of one macroscopic component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    /// The strain (or deformation-gradient) component is imposed.
    Strain,
    /// The conjugate stress component is imposed; the kinematic component
    /// becomes an extra unknown.
    Stress,
}

/// One macroscopic loading programme.
///
/// `strain_targets` holds the imposed kinematic values at the end of the
/// path — mean strain components for small strain (component order
/// 11, 22, 33, 23, 13, 12), mean deformation-gradient entries in row-major
/// order for finite strain. `stress_targets` holds the conjugate stress
/// targets in the same slots. Only the entries whose control matches are
/// read. The path is traversed in `increments` equal steps.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadSpec {
    pub kinematics: Kinematics,
    pub control: Vec<Control>,
    pub strain_targets: Vec<f64>,
    pub stress_targets: Vec<f64>,
    pub increments: usize,
    /// Physical duration of one increment; reserved for rate-dependent
    /// materials, unused by the rate-independent models shipped here.
    pub time_per_increment: f64,
}

impl LoadSpec {
    /// Full strain control toward a small-strain target.
    pub fn strain_control(eps: Sym3) -> LoadSpec {
        LoadSpec {
            kinematics: Kinematics::SmallStrain,
            control: vec![Control::Strain; 6],
            strain_targets: eps.0.to_vec(),
            stress_targets: vec![0.0; 6],
            increments: 1,
            time_per_increment: 1.0,
        }
    }

    /// Full stress control toward a small-strain mean-stress target.
    pub fn stress_control(sigma: Sym3) -> LoadSpec {
        LoadSpec {
            kinematics: Kinematics::SmallStrain,
            control: vec![Control::Stress; 6],
            strain_targets: vec![0.0; 6],
            stress_targets: sigma.0.to_vec(),
            increments: 1,
            time_per_increment: 1.0,
        }
    }

    /// Full deformation-gradient control toward a finite-strain target.
    pub fn gradient_control(f: Mat3, increments: usize) -> LoadSpec {
        let mut targets = vec![0.0; 9];
        for (a, &(i, j)) in FULL_PAIRS.iter().enumerate() {
            targets[a] = f.0[i][j];
        }
        LoadSpec {
            kinematics: Kinematics::FiniteStrain,
            control: vec![Control::Strain; 9],
            strain_targets: targets,
            stress_targets: vec![0.0; 9],
            increments,
            time_per_increment: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.kinematics.components();
        if self.control.len() != m {
            return Err(CoreError::InvalidLoad(format!(
                "control mask has {} entries, expected {m}",
                self.control.len()
            )));
        }
        if self.strain_targets.len() != m || self.stress_targets.len() != m {
            return Err(CoreError::InvalidLoad(format!(
                "target vectors must have {m} entries, got {} strain / {} stress",
                self.strain_targets.len(),
                self.stress_targets.len()
            )));
        }
        if self.increments == 0 {
            return Err(CoreError::InvalidLoad(
                "load path needs at least one increment".into(),
            ));
        }
        for (a, c) in self.control.iter().enumerate() {
            let v = match c {
                Control::Strain => self.strain_targets[a],
                Control::Stress => self.stress_targets[a],
            };
            if !v.is_finite() {
                return Err(CoreError::InvalidLoad(format!(
                    "target for component {a} is not finite: {v}"
                )));
            }
        }
        if !(self.time_per_increment.is_finite() && self.time_per_increment > 0.0) {
            return Err(CoreError::InvalidLoad(format!(
                "time per increment must be positive, got {}",
                self.time_per_increment
            )));
        }
        Ok(())
    }

    pub fn layout(&self) -> ControlLayout {
        ControlLayout::new(self.kinematics, &self.control)
    }

    /// Imposed mean strain at path fraction `s` in [0, 1]; stress-controlled
    /// slots are zero (their kinematics is solved, not imposed).
    pub fn imposed_strain(&self, s: f64) -> Sym3 {
        debug_assert_eq!(self.kinematics, Kinematics::SmallStrain);
        let mut e = Sym3::ZERO;
        for a in 0..6 {
            if self.control[a] == Control::Strain {
                e.0[a] = self.strain_targets[a] * s;
            }
        }
        e
    }

    /// Imposed mean deformation gradient at path fraction `s`: identity plus
    /// the scaled imposed departure on strain-controlled slots; identity on
    /// stress-controlled slots (their departure accumulates in the solved
    /// macro block).
    pub fn imposed_gradient(&self, s: f64) -> Mat3 {
        debug_assert_eq!(self.kinematics, Kinematics::FiniteStrain);
        let mut f = Mat3::identity();
        for (a, &(i, j)) in FULL_PAIRS.iter().enumerate() {
            if self.control[a] == Control::Strain {
                let id = if i == j { 1.0 } else { 0.0 };
                f.0[i][j] = id + (self.strain_targets[a] - id) * s;
            }
        }
        f
    }

    /// Stress targets at path fraction `s`, ordered like the macro block of
    /// the layout.
    pub fn stress_targets_at(&self, s: f64) -> Vec<f64> {
        self.control
            .iter()
            .enumerate()
            .filter(|(_, c)| **c == Control::Stress)
            .map(|(a, _)| self.stress_targets[a] * s)
            .collect()
    }
}

/// Index bookkeeping for the macroscopic unknowns of one load spec.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlLayout {
    kinematics: Kinematics,
    /// Component slots under stress control, ascending.
    stress_slots: Vec<usize>,
    /// Inner-product weight of each macro unknown: the multiplicity of its
    /// component in the tensor double contraction (2 for the off-diagonal
    /// symmetric pairs, 1 otherwise).
    weights: Vec<f64>,
}

impl ControlLayout {
    pub fn new(kinematics: Kinematics, control: &[Control]) -> ControlLayout {
        assert_eq!(control.len(), kinematics.components());
        let stress_slots: Vec<usize> = control
            .iter()
            .enumerate()
            .filter(|(_, c)| **c == Control::Stress)
            .map(|(a, _)| a)
            .collect();
        let weights = stress_slots
            .iter()
            .map(|&a| match kinematics {
                Kinematics::SmallStrain => SYM_WEIGHTS[a],
                Kinematics::FiniteStrain => 1.0,
            })
            .collect();
        ControlLayout {
            kinematics,
            stress_slots,
            weights,
        }
    }

    pub fn kinematics(&self) -> Kinematics {
        self.kinematics
    }

    pub fn n_macro(&self) -> usize {
        self.stress_slots.len()
    }

    pub fn stress_slots(&self) -> &[usize] {
        &self.stress_slots
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Macro unknowns as a symmetric mean-strain contribution.
    pub fn embed_sym(&self, macro_dofs: &[f64]) -> Sym3 {
        debug_assert_eq!(self.kinematics, Kinematics::SmallStrain);
        debug_assert_eq!(macro_dofs.len(), self.n_macro());
        let mut e = Sym3::ZERO;
        for (k, &a) in self.stress_slots.iter().enumerate() {
            e.0[a] = macro_dofs[k];
        }
        e
    }

    /// Macro unknowns as a mean deformation-gradient departure.
    pub fn embed_full(&self, macro_dofs: &[f64]) -> Mat3 {
        debug_assert_eq!(self.kinematics, Kinematics::FiniteStrain);
        debug_assert_eq!(macro_dofs.len(), self.n_macro());
        let mut f = Mat3::ZERO;
        for (k, &a) in self.stress_slots.iter().enumerate() {
            let (i, j) = FULL_PAIRS[a];
            f.0[i][j] = macro_dofs[k];
        }
        f
    }

    /// Stress-controlled components of a symmetric tensor, in macro order.
    pub fn extract_sym(&self, m: &Sym3) -> Vec<f64> {
        debug_assert_eq!(self.kinematics, Kinematics::SmallStrain);
        self.stress_slots.iter().map(|&a| m.0[a]).collect()
    }

    /// Stress-controlled components of a full tensor, in macro order.
    pub fn extract_full(&self, m: &Mat3) -> Vec<f64> {
        self.stress_slots
            .iter()
            .map(|&a| {
                let (i, j) = match self.kinematics {
                    Kinematics::SmallStrain => SYM_PAIRS[a],
                    Kinematics::FiniteStrain => FULL_PAIRS[a],
                };
                m.0[i][j]
            })
            .collect()
    }
}

/// One unknown of the augmented system: the displacement-fluctuation field
/// plus the solved macroscopic components.
#[derive(Debug, Clone)]
pub struct DofVector {
    pub fluct: RealVectorField,
    pub macro_dofs: Vec<f64>,
}

impl DofVector {
    pub fn zeros(shape: GridShape, n_macro: usize) -> DofVector {
        DofVector {
            fluct: RealVectorField::zeros(shape),
            macro_dofs: vec![0.0; n_macro],
        }
    }

    /// Weighted inner product: volume-mean dot of the fields plus the
    /// weighted dot of the macro blocks. Under these weights the augmented
    /// operator is self-adjoint.
    pub fn dot(&self, other: &DofVector, weights: &[f64]) -> f64 {
        debug_assert_eq!(self.macro_dofs.len(), other.macro_dofs.len());
        debug_assert_eq!(self.macro_dofs.len(), weights.len());
        let mut s = self.fluct.dot(&other.fluct, &[1.0; 3]);
        for ((x, y), w) in self
            .macro_dofs
            .iter()
            .zip(other.macro_dofs.iter())
            .zip(weights.iter())
        {
            s += w * x * y;
        }
        s
    }

    pub fn norm(&self, weights: &[f64]) -> f64 {
        self.dot(self, weights).sqrt()
    }

    pub fn axpy(&mut self, a: f64, x: &DofVector) {
        self.fluct.axpy(a, &x.fluct);
        for (s, v) in self.macro_dofs.iter_mut().zip(x.macro_dofs.iter()) {
            *s += a * v;
        }
    }

    pub fn scale(&mut self, a: f64) {
        self.fluct.scale(a);
        for v in self.macro_dofs.iter_mut() {
            *v *= a;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.macro_dofs.iter().all(|v| v.is_finite())
            && self.fluct.data().iter().all(|v| v.is_finite())
    }
}
