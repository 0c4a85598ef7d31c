//! Pointwise conserved combinations `f = alpha · p` along an observed history.
//!
//! At every grid point the rows of `alpha` span the orthogonal complement of
//! the probe derivative `p'(tau)`, so each `f_i` is stationary there. Rows are
//! carried continuously from one grid point to the next.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::dynamics::History;
use crate::numerics::{central_difference, orthonormal_complement};
use crate::probes::{ProbeError, ProbeSet};

#[derive(Debug, Clone, PartialEq)]
pub struct ConservedFrame {
    pub tau: f64,
    /// `d x K`, orthonormal rows.
    pub alpha: DMatrix<f64>,
    pub f: DVector<f64>,
    pub pdot_norm: f64,
}

impl ConservedFrame {
    pub fn conserved_values(&self, p: &DVector<f64>) -> DVector<f64> {
        conserved_values(&self.alpha, p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameSeries {
    pub frames: Vec<ConservedFrame>,
    /// `max_k |alpha(tau_{k+1}) - alpha(tau_k)|_F / h`.
    pub lipschitz_diagnostic: f64,
}

/// `f = alpha · p`.
pub fn conserved_values(alpha: &DMatrix<f64>, p: &DVector<f64>) -> DVector<f64> {
    alpha * p
}

/// Probe values sampled along the history, one `K`-vector per grid point.
pub fn probe_samples(history: &History, set: &ProbeSet) -> Result<Vec<DVector<f64>>, ProbeError> {
    (0..history.len())
        .map(|k| set.eval(&history.u_realized[k], &history.u_intended[k], &history.phi[k]))
        .collect()
}

/// Numerical `p'(tau_k)` at every grid point.
pub fn probe_derivatives(history: &History, set: &ProbeSet) -> Result<Vec<DVector<f64>>, ProbeError> {
    let samples = probe_samples(history, set)?;
    Ok(differentiate(&samples, history.grid.h))
}

fn differentiate(samples: &[DVector<f64>], h: f64) -> Vec<DVector<f64>> {
    let n = samples.len();
    assert!(n >= 2, "need at least two samples");
    let k_dim = samples[0].len();
    let columns: Vec<Vec<f64>> = (0..k_dim).map(|j| samples.iter().map(|s| s[j]).collect()).collect();
    (0..n)
        .map(|k| DVector::from_iterator(k_dim, columns.iter().map(|col| central_difference(col, h, k))))
        .collect()
}

/// One frame per grid point of `history`.
pub fn estimate_frames(history: &History, set: &ProbeSet) -> Result<FrameSeries, ProbeError> {
    assert!(history.len() >= 3, "frame estimation needs three samples");
    let samples = probe_samples(history, set)?;
    let derivs = differentiate(&samples, history.grid.h);
    let mut frames: Vec<ConservedFrame> = Vec::with_capacity(samples.len());
    for (k, (p, pdot)) in samples.iter().zip(&derivs).enumerate() {
        let prev = frames.last().map(|fr| &fr.alpha);
        let alpha = orthonormal_complement(pdot, prev);
        let f = conserved_values(&alpha, p);
        if f.iter().any(|x| !x.is_finite()) {
            return Err(ProbeError::NonFiniteValue { probe: 0 });
        }
        frames.push(ConservedFrame {
            tau: history.grid.time(k),
            alpha,
            f,
            pdot_norm: pdot.norm(),
        });
    }
    let h = history.grid.h;
    let lipschitz_diagnostic = frames
        .windows(2)
        .map(|w| (&w[1].alpha - &w[0].alpha).norm() / h)
        .fold(0.0, f64::max);
    Ok(FrameSeries { frames, lipschitz_diagnostic })
}
