//! Local inversion of the conserved combinations: solve
//! `alpha · p(u, uo, phi) = f` for the interactive controls `u`.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::History;
use crate::numerics::{newton_solve, NewtonOptions, NumericsError};
use crate::probes::{ProbeError, ProbeSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InversionSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub trust_radius: f64,
    pub singularity_threshold: f64,
}

impl Default for InversionSettings {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 25,
            trust_radius: 10.0,
            singularity_threshold: 1e-10,
        }
    }
}

impl InversionSettings {
    /// Defaults with the trust radius set to ten times the largest observed
    /// control magnitude.
    pub fn for_history(history: &History) -> Self {
        let amp = history.control_amplitude();
        Self {
            trust_radius: if amp > 0.0 { 10.0 * amp } else { 10.0 },
            ..Self::default()
        }
    }

    fn newton(&self) -> NewtonOptions {
        NewtonOptions {
            tol: self.tol,
            max_iter: self.max_iter,
            trust_radius: self.trust_radius,
            singularity_threshold: self.singularity_threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InversionError {
    Probe(ProbeError),
    SingularJacobian { sigma_ratio: f64 },
    NoConvergence { residual: f64 },
    LeftLocalBranch { distance: f64 },
}

impl core::fmt::Display for InversionError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Self::Probe(e) => e.fmt(f),
            Self::SingularJacobian { sigma_ratio } => write!(f, "SingularJacobian (sigma ratio {sigma_ratio:e})"),
            Self::NoConvergence { residual } => write!(f, "NoConvergence (residual {residual:e})"),
            Self::LeftLocalBranch { distance } => write!(f, "LeftLocalBranch (distance {distance:e})"),
        }
    }
}

impl InversionError {
    /// Short machine-readable reason.
    pub fn code(&self) -> &'static str {
        match self {
            Self::Probe(_) => "NonFiniteValue",
            Self::SingularJacobian { .. } => "SingularJacobian",
            Self::NoConvergence { .. } => "NoConvergence",
            Self::LeftLocalBranch { .. } => "LeftLocalBranch",
        }
    }
}

impl From<ProbeError> for InversionError {
    fn from(e: ProbeError) -> Self {
        Self::Probe(e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inversion {
    pub u: DVector<f64>,
    pub iterations: usize,
    /// `sigma_min / sigma_max` of the control Jacobian at the seed.
    pub sigma_ratio: f64,
}

/// `alpha · dp/du`, the `d x d` Jacobian of `u -> f`.
pub fn control_jacobian(
    alpha: &DMatrix<f64>,
    set: &ProbeSet,
    u: &DVector<f64>,
    uo: &DVector<f64>,
    phi: &DVector<f64>,
) -> Result<DMatrix<f64>, ProbeError> {
    Ok(alpha * set.jacobian_u(u, uo, phi)?)
}

/// Damped Newton from `seed` on `alpha · p(u, uo, phi_eval) - f_target`.
pub fn invert_controls(
    alpha: &DMatrix<f64>,
    f_target: &DVector<f64>,
    set: &ProbeSet,
    uo: &DVector<f64>,
    phi_eval: &DVector<f64>,
    seed: &DVector<f64>,
    settings: &InversionSettings,
) -> Result<Inversion, InversionError> {
    // Probe errors inside the closures surface as non-finite residuals.
    set.eval(seed, uo, phi_eval)?;
    let residual = |u: &DVector<f64>| match set.eval(u, uo, phi_eval) {
        Ok(p) => alpha * p - f_target,
        Err(_) => DVector::from_element(f_target.len(), f64::NAN),
    };
    let jacobian = |u: &DVector<f64>| {
        control_jacobian(alpha, set, u, uo, phi_eval).unwrap_or_else(|_| DMatrix::zeros(seed.len(), seed.len()))
    };
    let sol = newton_solve(residual, jacobian, seed, &settings.newton()).map_err(|e| match e {
        NumericsError::SingularJacobian { sigma_ratio } => InversionError::SingularJacobian { sigma_ratio },
        NumericsError::NoConvergence { residual } => InversionError::NoConvergence { residual },
        NumericsError::LeftLocalBranch { distance } => InversionError::LeftLocalBranch { distance },
        NumericsError::NonFiniteState | NumericsError::InvalidGrid => InversionError::NoConvergence { residual: f64::NAN },
    })?;
    Ok(Inversion {
        u: sol.root,
        iterations: sol.iterations,
        sigma_ratio: sol.sigma_ratio,
    })
}
