//! Module parametrizations `θ ↦ g_θ` and the quadratic-in-`g` objective
//! `gᵀ A g - 2 bᵀ g` minimized by every θ update.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{NebError, Result};
use crate::lti::RationalTf;
use crate::optim::{bfgs, BfgsOptions};
use crate::scalar::Scalar;

/// Number of randomized restarts tried when the warm-started descent fails.
pub const MAX_RESTARTS: usize = 5;

/// How a module's lag-zero impulse response `g_θ = [g(0), g(1), ...]`
/// depends on `θ`.
#[derive(Debug, Clone, PartialEq)]
pub enum ModuleParametrization<T: Scalar> {
    /// `(b_1 q⁻¹ + ... + b_nb q⁻ⁿᵇ) / (1 + a_1 q⁻¹ + ... + a_na q⁻ⁿᵃ)`
    /// with `θ = [b_1..b_nb, a_1..a_na]`.
    Rational { nb: usize, na: usize },
    /// `g_θ = L θ` for a fixed basis `L` with at least `N` rows.
    Linear { basis: DMatrix<T> },
}

impl<T: Scalar> ModuleParametrization<T> {
    /// Second-order rational module as used in all experiments.
    pub fn second_order() -> Self {
        Self::Rational { nb: 2, na: 2 }
    }

    /// Strictly proper FIR module `θ_1 q⁻¹ + ... + θ_k q⁻ᵏ` as a linear
    /// parametrization of responses of length `len`.
    pub fn fir(order: usize, len: usize) -> Self {
        let mut basis = DMatrix::zeros(len, order);
        for k in 0..order.min(len.saturating_sub(1)) {
            basis[(k + 1, k)] = T::one();
        }
        Self::Linear { basis }
    }

    pub fn n_theta(&self) -> usize {
        match self {
            Self::Rational { nb, na } => nb + na,
            Self::Linear { basis } => basis.ncols(),
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, Self::Linear { .. })
    }

    fn check(&self, theta: &[T], len: usize) -> Result<()> {
        if theta.len() != self.n_theta() {
            return Err(NebError::DimensionMismatch(format!(
                "θ has {} entries, parametrization expects {}",
                theta.len(),
                self.n_theta()
            )));
        }
        if let Self::Linear { basis } = self {
            if basis.nrows() < len {
                return Err(NebError::DimensionMismatch(format!(
                    "basis has {} rows, {len} requested",
                    basis.nrows()
                )));
            }
        }
        Ok(())
    }

    /// Transfer function for rational parametrizations.
    pub fn transfer_function(&self, theta: &[T]) -> Option<RationalTf<T>> {
        match self {
            Self::Rational { nb, .. } => Some(RationalTf::new(
                theta[..*nb].to_vec(),
                theta[*nb..].to_vec(),
            )),
            Self::Linear { .. } => None,
        }
    }

    /// Whether `θ` lies in the admissible set (stable denominator).
    pub fn is_admissible(&self, theta: &[T]) -> bool {
        if theta.iter().any(|t| !t.is_finite()) {
            return false;
        }
        match self.transfer_function(theta) {
            Some(tf) => tf.is_stable(),
            None => true,
        }
    }

    /// Lag-zero impulse response of length `len`.
    pub fn impulse(&self, theta: &[T], len: usize) -> Result<Vec<T>> {
        self.check(theta, len)?;
        match self {
            Self::Rational { nb, na } => {
                let x = inverse_denominator(&theta[*nb..*nb + *na], len);
                let mut g = vec![T::zero(); len];
                for (k, &b) in theta[..*nb].iter().enumerate() {
                    for t in (k + 1)..len {
                        g[t] += b * x[t - k - 1];
                    }
                }
                Ok(g)
            }
            Self::Linear { basis } => {
                let th = DVector::from_column_slice(theta);
                Ok((basis.rows(0, len) * th).iter().copied().collect())
            }
        }
    }

    /// `∂g_θ / ∂θ`, a `len x n_θ` matrix.
    pub fn jacobian(&self, theta: &[T], len: usize) -> Result<DMatrix<T>> {
        self.check(theta, len)?;
        match self {
            Self::Rational { nb, na } => {
                let x = inverse_denominator(&theta[*nb..*nb + *na], len);
                let g = self.impulse(theta, len)?;
                // (1/A) * g, i.e. B/A².
                let mut xg = vec![T::zero(); len];
                for (t, v) in xg.iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for u in 0..=t {
                        acc += x[u] * g[t - u];
                    }
                    *v = acc;
                }
                let mut jac = DMatrix::zeros(len, nb + na);
                for k in 0..*nb {
                    for t in (k + 1)..len {
                        jac[(t, k)] = x[t - k - 1];
                    }
                }
                for k in 0..*na {
                    for t in (k + 1)..len {
                        jac[(t, nb + k)] = -xg[t - k - 1];
                    }
                }
                Ok(jac)
            }
            Self::Linear { basis } => Ok(basis.rows(0, len).into_owned()),
        }
    }

    /// Pulls the denominator of a rational `θ` inside the unit circle by
    /// radial scaling `a_k ↦ a_k ρᵏ` so that its pole radius is at most
    /// `radius`. Linear parametrizations are returned unchanged.
    pub fn stabilize(&self, theta: &[T], radius: T) -> Vec<T> {
        let mut out = theta.to_vec();
        if let Self::Rational { nb, na } = self {
            let Some(tf) = self.transfer_function(theta) else {
                return out;
            };
            let rho = tf.pole_radius();
            if rho.is_finite() && rho > radius {
                let scale = radius / rho;
                let mut f = T::one();
                for k in 0..*na {
                    f *= scale;
                    out[nb + k] *= f;
                }
            }
        }
        out
    }
}

/// Lag-zero impulse response of `1 / A(q)`.
fn inverse_denominator<T: Scalar>(a: &[T], len: usize) -> Vec<T> {
    let mut x = vec![T::zero(); len];
    if len == 0 {
        return x;
    }
    x[0] = T::one();
    for t in 1..len {
        let mut acc = T::zero();
        for (k, &ak) in a.iter().enumerate() {
            if t > k {
                acc -= ak * x[t - k - 1];
            }
        }
        x[t] = acc;
    }
    x
}

/// `J(g) = gᵀ A g - 2 bᵀ g` over the stacked responses `g = [g_1; ...; g_p]`,
/// each of length `len`.
#[derive(Debug, Clone)]
pub struct QuadraticForm<T: Scalar> {
    pub a: DMatrix<T>,
    pub b: DVector<T>,
    pub len: usize,
}

impl<T: Scalar> QuadraticForm<T> {
    pub fn new(a: DMatrix<T>, b: DVector<T>, len: usize) -> Result<Self> {
        if a.nrows() != a.ncols() || a.nrows() != b.len() || len == 0 || b.len() % len != 0 {
            return Err(NebError::DimensionMismatch(format!(
                "quadratic form {}x{} with linear term {} and block length {len}",
                a.nrows(),
                a.ncols(),
                b.len()
            )));
        }
        Ok(Self { a, b, len })
    }

    pub fn blocks(&self) -> usize {
        self.b.len() / self.len
    }

    /// Weighted sum `Σ w_k J_k` of forms sharing a layout.
    pub fn combine(parts: &[(T, &QuadraticForm<T>)]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| NebError::InvalidArgument("no forms to combine".into()))?
            .1;
        let mut a = DMatrix::zeros(first.a.nrows(), first.a.ncols());
        let mut b = DVector::zeros(first.b.len());
        for (w, f) in parts {
            if f.a.shape() != a.shape() || f.len != first.len {
                return Err(NebError::DimensionMismatch("forms differ in layout".into()));
            }
            a += &f.a * *w;
            b += &f.b * *w;
        }
        Self::new(a, b, first.len)
    }

    pub fn value(&self, g: &DVector<T>) -> T {
        (&self.a * g).dot(g) - (self.b.dot(g) + self.b.dot(g))
    }

    fn stacked(&self, params: &[ModuleParametrization<T>], thetas: &[Vec<T>]) -> Result<DVector<T>> {
        let mut g = DVector::zeros(self.b.len());
        for (i, (p, th)) in params.iter().zip(thetas).enumerate() {
            g.rows_mut(i * self.len, self.len)
                .copy_from(&DVector::from_vec(p.impulse(th, self.len)?));
        }
        Ok(g)
    }

    /// `J(θ)`.
    pub fn objective(&self, params: &[ModuleParametrization<T>], thetas: &[Vec<T>]) -> Result<T> {
        self.check_params(params, thetas)?;
        Ok(self.value(&self.stacked(params, thetas)?))
    }

    /// `J(θ)` and `∂J/∂θ` for the flattened parameter vector.
    pub fn objective_and_gradient(
        &self,
        params: &[ModuleParametrization<T>],
        thetas: &[Vec<T>],
    ) -> Result<(T, DVector<T>)> {
        self.check_params(params, thetas)?;
        let g = self.stacked(params, thetas)?;
        let ag = &self.a * &g;
        let value = ag.dot(&g) - (self.b.dot(&g) + self.b.dot(&g));
        let resid = (ag - &self.b) * T::lit(2.0);
        let total: usize = params.iter().map(|p| p.n_theta()).sum();
        let mut grad = DVector::zeros(total);
        let mut off = 0;
        for (i, (p, th)) in params.iter().zip(thetas).enumerate() {
            let jac = p.jacobian(th, self.len)?;
            let k = p.n_theta();
            grad.rows_mut(off, k)
                .copy_from(&jac.tr_mul(&resid.rows(i * self.len, self.len)));
            off += k;
        }
        Ok((value, grad))
    }

    fn check_params(&self, params: &[ModuleParametrization<T>], thetas: &[Vec<T>]) -> Result<()> {
        if params.len() != self.blocks() || thetas.len() != params.len() {
            return Err(NebError::DimensionMismatch(format!(
                "{} parametrizations and {} parameter vectors for {} blocks",
                params.len(),
                thetas.len(),
                self.blocks()
            )));
        }
        Ok(())
    }
}

pub(crate) fn split_theta<T: Scalar>(params: &[ModuleParametrization<T>], flat: &[T]) -> Vec<Vec<T>> {
    let mut out = Vec::with_capacity(params.len());
    let mut off = 0;
    for p in params {
        let k = p.n_theta();
        out.push(flat[off..off + k].to_vec());
        off += k;
    }
    out
}

pub(crate) fn flatten_theta<T: Scalar>(thetas: &[Vec<T>]) -> Vec<T> {
    thetas.iter().flatten().copied().collect()
}

/// Closed-form minimizer for purely linear parametrizations:
/// `θ = (Φᵀ A Φ)⁻¹ Φᵀ b` with `Φ` the block-diagonal basis.
pub fn solve_linear<T: Scalar>(form: &QuadraticForm<T>, params: &[ModuleParametrization<T>]) -> Result<Vec<Vec<T>>> {
    let total: usize = params.iter().map(|p| p.n_theta()).sum();
    let mut phi = DMatrix::zeros(form.b.len(), total);
    let mut off = 0;
    for (i, p) in params.iter().enumerate() {
        let ModuleParametrization::Linear { basis } = p else {
            return Err(NebError::InvalidArgument("closed form needs linear parametrizations".into()));
        };
        let k = basis.ncols();
        phi.view_mut((i * form.len, off), (form.len, k))
            .copy_from(&basis.rows(0, form.len));
        off += k;
    }
    let h = phi.transpose() * (&form.a * &phi);
    let rhs = phi.tr_mul(&form.b);
    let scale = h.diagonal().amax();
    let chol = h
        .clone()
        .cholesky()
        .filter(|c| {
            let d = c.l_dirty().diagonal();
            let min = d.iter().fold(T::lit(f64::INFINITY), |a, &v| a.min(v));
            min * min > T::lit(1e-13) * scale
        })
        .ok_or_else(|| NebError::RankDeficient("ΦᵀAΦ is singular".into()))?;
    let theta = chol.solve(&rhs);
    Ok(split_theta(params, theta.as_slice()))
}

/// Minimizes `J(θ)` starting from `theta0`. Linear parametrizations use the
/// closed form; otherwise quasi-Newton descent with up to
/// [`MAX_RESTARTS`] seeded random restarts when the warm start fails.
/// The result never has a larger objective than an admissible `theta0`.
pub fn minimize_theta<T: Scalar>(
    form: &QuadraticForm<T>,
    params: &[ModuleParametrization<T>],
    theta0: &[Vec<T>],
    seed: u64,
) -> Result<Vec<Vec<T>>> {
    form.check_params(params, theta0)?;
    if params.iter().all(|p| p.is_linear()) {
        return solve_linear(form, params);
    }
    let opts = BfgsOptions {
        max_iter: 400,
        grad_tol: 1e-12,
        x_tol: 1e-13,
    };
    let objective = |x: &DVector<T>| {
        let th = split_theta(params, x.as_slice());
        if !params.iter().zip(&th).all(|(p, t)| p.is_admissible(t)) {
            return None;
        }
        form.objective_and_gradient(params, &th).ok()
    };
    let start_ok = params.iter().zip(theta0).all(|(p, t)| p.is_admissible(t));
    let start_value = if start_ok {
        form.objective(params, theta0).ok().filter(|v| v.is_finite())
    } else {
        None
    };

    let mut best: Option<(T, Vec<T>)> = start_value.map(|v| (v, flatten_theta(theta0)));
    let run = |x0: Vec<T>, best: &mut Option<(T, Vec<T>)>| -> bool {
        match bfgs(objective, DVector::from_vec(x0), &opts) {
            Ok(res) if res.value.is_finite() => {
                if best.as_ref().is_none_or(|(v, _)| res.value <= *v) {
                    *best = Some((res.value, res.x.iter().copied().collect()));
                }
                true
            }
            _ => false,
        }
    };

    let succeeded = start_ok && run(flatten_theta(theta0), &mut best);
    if !succeeded {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..MAX_RESTARTS {
            let perturbed: Vec<Vec<T>> = params
                .iter()
                .zip(theta0)
                .map(|(p, th)| {
                    let x: Vec<T> = th
                        .iter()
                        .map(|&t| {
                            let base = if t.is_finite() { t } else { T::zero() };
                            let u: f64 = rng.random_range(-1.0..1.0);
                            base + T::lit(0.2 * u) * (T::one() + base.abs())
                        })
                        .collect();
                    p.stabilize(&x, T::lit(0.95))
                })
                .collect();
            if run(flatten_theta(&perturbed), &mut best) {
                break;
            }
        }
    }
    best.map(|(_, x)| split_theta(params, &x))
        .ok_or_else(|| NebError::OptimizerFailure("θ update failed after restarts".into()))
}
