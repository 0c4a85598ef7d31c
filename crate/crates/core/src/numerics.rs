//! Small-dimension numerical kernels shared by the simulator and the predictor.
//!
//! Everything here works on `nalgebra` dynamic vectors and matrices; the
//! dimensions involved (control and probe counts) are tiny, typically 2 to 6.

use core::fmt;

use nalgebra::{DMatrix, DVector};

/// Uniform sampling of the time axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub t_start: f64,
    pub h: f64,
    pub count: usize,
}

impl TimeGrid {
    pub fn new(t_start: f64, h: f64, count: usize) -> Result<Self, NumericsError> {
        if !(h > 0.0) || !h.is_finite() || !t_start.is_finite() || count == 0 {
            return Err(NumericsError::InvalidGrid);
        }
        Ok(Self { t_start, h, count })
    }

    #[inline]
    pub fn time(&self, k: usize) -> f64 {
        self.t_start + k as f64 * self.h
    }

    pub fn t_end(&self) -> f64 {
        self.time(self.count - 1)
    }

    /// Index of the grid point at `t`, if `t` lies on the grid (relative
    /// tolerance 1e-9 of a step).
    pub fn index_of(&self, t: f64) -> Option<usize> {
        steps_in(t - self.t_start, self.h).filter(|&k| k < self.count)
    }

    /// The same grid cut to its first `count` points.
    pub fn truncated(&self, count: usize) -> Self {
        Self {
            count: count.min(self.count),
            ..*self
        }
    }
}

/// Number of whole steps of size `h` in `span`, if `span` is a non-negative
/// integer multiple of `h` (to 1e-9 of a step).
pub fn steps_in(span: f64, h: f64) -> Option<usize> {
    let q = span / h;
    if !q.is_finite() {
        return None;
    }
    let r = libm::round(q);
    if r < 0.0 || libm::fabs(q - r) > 1e-9 * r.max(1.0) {
        return None;
    }
    Some(r as usize)
}

#[derive(Debug, Clone, PartialEq)]
pub enum NumericsError {
    InvalidGrid,
    NonFiniteState,
    SingularJacobian { sigma_ratio: f64 },
    NoConvergence { residual: f64 },
    LeftLocalBranch { distance: f64 },
}

impl fmt::Display for NumericsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::InvalidGrid => f.write_str("time grid needs h > 0 and at least one point"),
            Self::NonFiniteState => f.write_str("integration produced a non-finite state"),
            Self::SingularJacobian { sigma_ratio } => {
                write!(f, "singular jacobian (sigma_min/sigma_max = {sigma_ratio:e})")
            }
            Self::NoConvergence { residual } => {
                write!(f, "newton iteration did not converge (residual {residual:e})")
            }
            Self::LeftLocalBranch { distance } => {
                write!(f, "newton iterate left the trust region (distance {distance:e})")
            }
        }
    }
}

/// Deterministic orthonormal basis of the complement of `v`, taken from the
/// rows of the Householder reflector that maps `v` onto the last axis.
///
/// For `v = 0` this is the complement of the last unit vector, i.e. the first
/// `K - 1` unit vectors.
pub fn householder_complement(v: &DVector<f64>) -> DMatrix<f64> {
    let k = v.len();
    assert!(k >= 2, "complement needs K >= 2");
    let norm = v.norm();
    if norm == 0.0 || !norm.is_finite() {
        return DMatrix::identity(k - 1, k);
    }
    let mut w = v / norm;
    let last = w[k - 1];
    // w = v̂ + sign(v̂_K) e_K keeps the reflector well conditioned.
    w[k - 1] += if last >= 0.0 { 1.0 } else { -1.0 };
    let ww = w.norm_squared();
    let reflector = DMatrix::identity(k, k) - (&w * w.transpose()) * (2.0 / ww);
    reflector.rows(0, k - 1).into_owned()
}

/// Orthonormal basis (as rows) of the orthogonal complement of `v`.
///
/// With `prev` present the basis is aligned to it: every previous row is
/// projected onto the complement of `v` and the projections are
/// re-orthonormalized by Gram–Schmidt. That keeps the rows continuous when
/// `v` varies smoothly. If a projection degenerates the Householder basis is
/// used instead.
pub fn orthonormal_complement(v: &DVector<f64>, prev: Option<&DMatrix<f64>>) -> DMatrix<f64> {
    let k = v.len();
    assert!(k >= 2, "complement needs K >= 2");
    let norm = v.norm();
    let prev = match prev {
        Some(p) => p,
        None => return householder_complement(v),
    };
    assert_eq!(prev.shape(), (k - 1, k), "previous basis has the wrong shape");
    if norm == 0.0 {
        return prev.clone();
    }
    let v_hat = v / norm;
    match align_to_previous(&v_hat, prev) {
        Some(rows) => rows,
        None => householder_complement(v),
    }
}

const DEGENERATE_PROJECTION: f64 = 1e-6;

fn align_to_previous(v_hat: &DVector<f64>, prev: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let k = v_hat.len();
    let mut basis: alloc::vec::Vec<DVector<f64>> = alloc::vec::Vec::with_capacity(k - 1);
    for i in 0..k - 1 {
        let mut r: DVector<f64> = prev.row(i).transpose();
        // Two passes of classical projection ("twice is enough").
        for _ in 0..2 {
            let c = r.dot(v_hat);
            r.axpy(-c, v_hat, 1.0);
            for b in &basis {
                let c = r.dot(b);
                r.axpy(-c, b, 1.0);
            }
        }
        let n = r.norm();
        if !(n > DEGENERATE_PROJECTION) {
            return None;
        }
        basis.push(r / n);
    }
    let mut out = DMatrix::zeros(k - 1, k);
    for (i, b) in basis.iter().enumerate() {
        out.set_row(i, &b.transpose());
    }
    Some(out)
}

/// Ratio of the smallest to the largest singular value; zero for the zero
/// matrix.
pub fn sigma_ratio(m: &DMatrix<f64>) -> f64 {
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if max > 0.0 && max.is_finite() {
        min / max
    } else {
        0.0
    }
}

/// Settings for [`newton_solve`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub trust_radius: f64,
    /// Relative singular value below which the Jacobian counts as singular.
    pub singularity_threshold: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 25,
            trust_radius: 10.0,
            singularity_threshold: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewtonSolution {
    pub root: DVector<f64>,
    /// Number of Newton steps taken (zero if the seed already satisfied `tol`).
    pub iterations: usize,
    /// `sigma_min / sigma_max` of the Jacobian at the seed.
    pub sigma_ratio: f64,
}

const MAX_HALVINGS: usize = 40;

/// Damped Newton iteration for `residual(u) = 0` started from `seed`.
///
/// Each full step is halved until the residual sup-norm decreases. The
/// iterate must stay within `trust_radius` (Euclidean) of the seed, since the
/// inverse being computed is only local.
pub fn newton_solve<R, J>(
    residual: R,
    jacobian: J,
    seed: &DVector<f64>,
    opts: &NewtonOptions,
) -> Result<NewtonSolution, NumericsError>
where
    R: Fn(&DVector<f64>) -> DVector<f64>,
    J: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    let mut u = seed.clone();
    let mut r = residual(&u);
    let mut r_norm = sup_norm(&r);
    if !r_norm.is_finite() {
        return Err(NumericsError::NonFiniteState);
    }
    // The Jacobian must be nondegenerate at the seed even if the seed already solves.
    let seed_ratio = sigma_ratio(&jacobian(seed));
    if !(seed_ratio >= opts.singularity_threshold) {
        return Err(NumericsError::SingularJacobian { sigma_ratio: seed_ratio });
    }
    for iter in 0..=opts.max_iter {
        if r_norm <= opts.tol {
            return Ok(NewtonSolution {
                root: u,
                iterations: iter,
                sigma_ratio: seed_ratio,
            });
        }
        if iter == opts.max_iter {
            break;
        }
        let jac = if iter == 0 { jacobian(seed) } else { jacobian(&u) };
        let ratio = if iter == 0 { seed_ratio } else { sigma_ratio(&jac) };
        if !(ratio >= opts.singularity_threshold) {
            return Err(NumericsError::SingularJacobian { sigma_ratio: ratio });
        }
        let step = match jac.lu().solve(&r) {
            Some(s) => s,
            None => return Err(NumericsError::SingularJacobian { sigma_ratio: ratio }),
        };
        let mut lambda = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let cand = &u - &step * lambda;
            let cand_r = residual(&cand);
            let cand_norm = sup_norm(&cand_r);
            if cand_norm.is_finite() && cand_norm < r_norm {
                accepted = Some((cand, cand_r, cand_norm));
                break;
            }
            lambda *= 0.5;
        }
        let Some((cand, cand_r, cand_norm)) = accepted else {
            return Err(NumericsError::NoConvergence { residual: r_norm });
        };
        let distance = (&cand - seed).norm();
        if distance > opts.trust_radius {
            return Err(NumericsError::LeftLocalBranch { distance });
        }
        u = cand;
        r = cand_r;
        r_norm = cand_norm;
    }
    Err(NumericsError::NoConvergence { residual: r_norm })
}

/// One classical fourth-order Runge–Kutta step of `phi' = rhs(t, phi)`.
pub fn rk4_step<F>(rhs: F, t: f64, phi: &DVector<f64>, h: f64) -> Result<DVector<f64>, NumericsError>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let half = 0.5 * h;
    let k1 = rhs(t, phi);
    let k2 = rhs(t + half, &(phi + &k1 * half));
    let k3 = rhs(t + half, &(phi + &k2 * half));
    let k4 = rhs(t + h, &(phi + &k3 * h));
    let next = phi + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    if next.iter().all(|x| x.is_finite()) {
        Ok(next)
    } else {
        Err(NumericsError::NonFiniteState)
    }
}

/// Derivative estimate of uniformly sampled data at index `k`: central
/// differences inside, one-sided first-order differences at both ends.
pub fn central_difference(samples: &[f64], h: f64, k: usize) -> f64 {
    let n = samples.len();
    assert!(n >= 2, "need at least two samples");
    assert!(k < n, "index out of range");
    if k == 0 {
        (samples[1] - samples[0]) / h
    } else if k == n - 1 {
        (samples[n - 1] - samples[n - 2]) / h
    } else {
        (samples[k + 1] - samples[k - 1]) / (2.0 * h)
    }
}

pub fn sup_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |acc, x| {
        if x.is_nan() {
            f64::NAN
        } else {
            acc.max(libm::fabs(*x))
        }
    })
}
