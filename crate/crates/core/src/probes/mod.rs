//! Probe functions `p_j(u, uo, phi)`, ordered probe sets and the library
//! candidate sets are drawn from.

mod expr;

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use expr::{Expr, Point, Var};

#[derive(Debug, Clone, PartialEq)]
pub enum ProbeError {
    /// A set must hold exactly `d + 1` probes.
    WrongSize { expected: usize, got: usize },
    VariableOutOfRange(Var),
    DimensionMismatch,
    NonFiniteValue { probe: usize },
    ExhaustedDraws,
    LibraryTooSmall,
    Parse(String),
}

impl fmt::Display for ProbeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::WrongSize { expected, got } => write!(f, "probe set needs {expected} probes, got {got}"),
            Self::VariableOutOfRange(v) => write!(f, "variable {v} out of range"),
            Self::DimensionMismatch => f.write_str("argument dimensions do not match the probe set"),
            Self::NonFiniteValue { probe } => write!(f, "probe {probe} evaluated to a non-finite value"),
            Self::ExhaustedDraws => f.write_str("no u-dependent probe set found after 1000 draws"),
            Self::LibraryTooSmall => f.write_str("library has fewer than d + 1 entries"),
            Self::Parse(msg) => write!(f, "probe parse error: {msg}"),
        }
    }
}

/// An ordered set of `K = d + 1` probes over `d` controls and `m` states.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    probes: Vec<Expr>,
    d: usize,
    m: usize,
}

impl ProbeSet {
    pub fn new(probes: Vec<Expr>, d: usize, m: usize) -> Result<Self, ProbeError> {
        if probes.len() != d + 1 {
            return Err(ProbeError::WrongSize { expected: d + 1, got: probes.len() });
        }
        for p in &probes {
            for v in p.variables() {
                let ok = match v {
                    Var::U(i) | Var::Uo(i) => i < d,
                    Var::Phi(i) => i < m,
                };
                if !ok {
                    return Err(ProbeError::VariableOutOfRange(v));
                }
            }
        }
        Ok(Self { probes, d, m })
    }

    /// Coordinate probes `u_0 .. u_{d-1}, phi_0`.
    pub fn canonical(d: usize, m: usize) -> Self {
        let mut probes: Vec<Expr> = (0..d).map(Expr::u).collect();
        probes.push(Expr::phi(0));
        Self::new(probes, d, m).expect("canonical set is well formed")
    }

    pub fn probes(&self) -> &[Expr] {
        &self.probes
    }

    pub fn control_dim(&self) -> usize {
        self.d
    }

    pub fn state_dim(&self) -> usize {
        self.m
    }

    /// `K = d + 1`.
    pub fn len(&self) -> usize {
        self.probes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probes.is_empty()
    }

    fn point<'a>(&self, u: &'a DVector<f64>, uo: &'a DVector<f64>, phi: &'a DVector<f64>) -> Result<Point<'a>, ProbeError> {
        if u.len() != self.d || uo.len() != self.d || phi.len() != self.m {
            return Err(ProbeError::DimensionMismatch);
        }
        Ok(Point { u: u.as_slice(), uo: uo.as_slice(), phi: phi.as_slice() })
    }

    pub fn eval(&self, u: &DVector<f64>, uo: &DVector<f64>, phi: &DVector<f64>) -> Result<DVector<f64>, ProbeError> {
        let at = self.point(u, uo, phi)?;
        let mut out = DVector::zeros(self.len());
        for (j, p) in self.probes.iter().enumerate() {
            let v = p.eval(&at);
            if !v.is_finite() {
                return Err(ProbeError::NonFiniteValue { probe: j });
            }
            out[j] = v;
        }
        Ok(out)
    }

    /// Exact `K x d` matrix of partials `dp_j / du_l`.
    pub fn jacobian_u(&self, u: &DVector<f64>, uo: &DVector<f64>, phi: &DVector<f64>) -> Result<DMatrix<f64>, ProbeError> {
        let at = self.point(u, uo, phi)?;
        let mut out = DMatrix::zeros(self.len(), self.d);
        let mut grad = alloc::vec![0.0; self.d];
        for (j, p) in self.probes.iter().enumerate() {
            p.eval_grad_u(&at, &mut grad);
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(ProbeError::NonFiniteValue { probe: j });
            }
            for (l, g) in grad.iter().enumerate() {
                out[(j, l)] = *g;
            }
        }
        Ok(out)
    }

    pub fn depends_on_u(&self) -> bool {
        self.probes.iter().any(Expr::depends_on_u)
    }
}

impl fmt::Display for ProbeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (j, p) in self.probes.iter().enumerate() {
            if j > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{p}")?;
        }
        f.write_str("}")
    }
}

pub fn eval_probe_vector(set: &ProbeSet, u: &DVector<f64>, uo: &DVector<f64>, phi: &DVector<f64>) -> Result<DVector<f64>, ProbeError> {
    set.eval(u, uo, phi)
}

pub fn probe_jacobian_u(set: &ProbeSet, u: &DVector<f64>, uo: &DVector<f64>, phi: &DVector<f64>) -> Result<DMatrix<f64>, ProbeError> {
    set.jacobian_u(u, uo, phi)
}

/// Pool of base expressions for drawing candidate probe sets.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeLibrary {
    pub d: usize,
    pub m: usize,
    pub entries: Vec<Expr>,
}

impl ProbeLibrary {
    pub fn from_entries(d: usize, m: usize, entries: Vec<Expr>) -> Self {
        Self { d, m, entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Degree-1 monomials, then degree-2 monomials, then `tanh` of each variable.
/// Variables are ordered `u`, `uo`, `phi`.
pub fn generate_library(d: usize, m: usize) -> ProbeLibrary {
    let vars: Vec<Expr> = (0..d).map(Expr::u).chain((0..d).map(Expr::uo)).chain((0..m).map(Expr::phi)).collect();
    let mut entries = vars.clone();
    for i in 0..vars.len() {
        for j in i..vars.len() {
            entries.push(if i == j {
                Expr::pow(vars[i].clone(), 2)
            } else {
                Expr::mul(vars[i].clone(), vars[j].clone())
            });
        }
    }
    entries.extend(vars.iter().cloned().map(Expr::tanh));
    ProbeLibrary { d, m, entries }
}

const MAX_REDRAWS: usize = 1000;

/// `d + 1` distinct library entries in random order, with at least one
/// depending on `u`.
pub fn random_probe_set(lib: &ProbeLibrary, seed: u64) -> Result<ProbeSet, ProbeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_probe_set_with(lib, &mut rng)
}

pub(crate) fn random_probe_set_with<R: rand::Rng>(lib: &ProbeLibrary, rng: &mut R) -> Result<ProbeSet, ProbeError> {
    let k = lib.d + 1;
    if lib.len() < k {
        return Err(ProbeError::LibraryTooSmall);
    }
    let mut order: Vec<usize> = (0..lib.len()).collect();
    for _ in 0..MAX_REDRAWS {
        let (picks, _) = order.partial_shuffle(rng, k);
        let probes: Vec<Expr> = picks.iter().map(|&i| lib.entries[i].clone()).collect();
        if probes.iter().any(Expr::depends_on_u) {
            return ProbeSet::new(probes, lib.d, lib.m);
        }
    }
    Err(ProbeError::ExhaustedDraws)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;
    use proptest::prelude::*;
    use std::collections::BTreeSet;
    use std::string::ToString;

    #[test]
    fn coordinate_probes() {
        let p0 = ProbeSet::canonical(2, 1);
        let v = p0.eval(&dvector![0.7, -0.35], &dvector![9.0, 9.0], &dvector![1.0]).unwrap();
        assert_eq!(v, dvector![0.7, -0.35, 1.0]);
        let j = p0.jacobian_u(&dvector![0.3, 0.1], &dvector![0.0, 0.0], &dvector![2.0]).unwrap();
        assert_eq!(j, DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]));
    }

    #[test]
    fn quadratic_probes() {
        let set = ProbeSet::new(vec![Expr::pow(Expr::u(0), 2), Expr::mul(Expr::u(0), Expr::u(1)), Expr::phi(0)], 2, 1).unwrap();
        let (u, uo, phi) = (dvector![2.0, 3.0], dvector![0.0, 0.0], dvector![5.0]);
        assert_eq!(set.eval(&u, &uo, &phi).unwrap(), dvector![4.0, 6.0, 5.0]);
        let j = set.jacobian_u(&u, &uo, &phi).unwrap();
        assert_eq!(j.row(1).iter().copied().collect::<Vec<_>>(), vec![3.0, 2.0]);
        let t = ProbeSet::new(vec![Expr::tanh(Expr::u(0)), Expr::u(1), Expr::phi(0)], 2, 1).unwrap();
        assert_eq!(t.eval(&dvector![0.0, 1.0], &uo, &phi).unwrap()[0], 0.0);
    }

    #[test]
    fn construction_checks() {
        assert_eq!(
            ProbeSet::new(vec![Expr::u(0), Expr::u(1)], 2, 1).unwrap_err(),
            ProbeError::WrongSize { expected: 3, got: 2 }
        );
        assert_eq!(
            ProbeSet::new(vec![Expr::u(0), Expr::u(2), Expr::phi(0)], 2, 1).unwrap_err(),
            ProbeError::VariableOutOfRange(Var::U(2))
        );
        let p0 = ProbeSet::canonical(2, 1);
        assert_eq!(p0.eval(&dvector![0.0], &dvector![0.0, 0.0], &dvector![0.0]).unwrap_err(), ProbeError::DimensionMismatch);
        let inv = ProbeSet::new(vec![Expr::pow(Expr::u(0), -1), Expr::u(1), Expr::phi(0)], 2, 1).unwrap();
        assert_eq!(inv.eval(&dvector![0.0, 0.0], &dvector![0.0, 0.0], &dvector![0.0]).unwrap_err(), ProbeError::NonFiniteValue { probe: 0 });
    }

    #[test]
    fn library_enumeration() {
        let lib = generate_library(2, 1);
        assert_eq!(lib.len(), 25);
        let first: Vec<String> = lib.entries[..5].iter().map(ToString::to_string).collect();
        assert_eq!(first, ["u0", "u1", "uo0", "uo1", "phi0"]);
        assert_eq!(lib.entries[5].to_string(), "(^ u0 2)");
        assert_eq!(lib.entries[6].to_string(), "(* u0 u1)");
        assert_eq!(lib.entries[24].to_string(), "(tanh phi0)");
        assert_eq!(lib, generate_library(2, 1));
    }

    #[test]
    fn random_sets() {
        let lib = generate_library(2, 1);
        let a = random_probe_set(&lib, 7).unwrap();
        assert_eq!(a, random_probe_set(&lib, 7).unwrap());
        assert!(a.depends_on_u());
        let distinct: BTreeSet<String> = (0..100).map(|s| random_probe_set(&lib, s).unwrap().to_string()).collect();
        assert!(distinct.len() >= 99, "{} distinct", distinct.len());
        let phi_only = ProbeLibrary::from_entries(2, 1, vec![Expr::phi(0), Expr::pow(Expr::phi(0), 2), Expr::tanh(Expr::phi(0))]);
        assert_eq!(random_probe_set(&phi_only, 1).unwrap_err(), ProbeError::ExhaustedDraws);
    }

    fn fd_jacobian(set: &ProbeSet, u: &DVector<f64>, uo: &DVector<f64>, phi: &DVector<f64>) -> DMatrix<f64> {
        let step = 1e-6;
        let mut out = DMatrix::zeros(set.len(), u.len());
        for l in 0..u.len() {
            let mut up = u.clone();
            let mut dn = u.clone();
            up[l] += step;
            dn[l] -= step;
            let diff = (set.eval(&up, uo, phi).unwrap() - set.eval(&dn, uo, phi).unwrap()) / (2.0 * step);
            out.set_column(l, &diff);
        }
        out
    }

    proptest! {
        #[test]
        fn jacobian_matches_finite_differences(
            seed in 0u64..500,
            u in proptest::collection::vec(-2.0f64..2.0, 2),
            uo in proptest::collection::vec(-2.0f64..2.0, 2),
            phi in -2.0f64..2.0,
        ) {
            let lib = generate_library(2, 1);
            let set = random_probe_set(&lib, seed).unwrap();
            let (u, uo, phi) = (DVector::from_vec(u), DVector::from_vec(uo), dvector![phi]);
            let exact = set.jacobian_u(&u, &uo, &phi).unwrap();
            let approx = fd_jacobian(&set, &u, &uo, &phi);
            for (e, a) in exact.iter().zip(approx.iter()) {
                prop_assert!((e - a).abs() <= 1e-6 * e.abs().max(1.0), "{} vs {}", e, a);
            }
            // pure: repeated calls agree bitwise
            prop_assert_eq!(exact, set.jacobian_u(&u, &uo, &phi).unwrap());
        }

        #[test]
        fn text_form_round_trips(seed in 0u64..1000, c in -1e3f64..1e3) {
            let lib = generate_library(3, 2);
            let set = random_probe_set(&lib, seed).unwrap();
            for p in set.probes() {
                let scaled = Expr::mul(Expr::Const(c), p.clone());
                prop_assert_eq!(&Expr::parse(&scaled.to_string()).unwrap(), &scaled);
            }
        }
    }
}
