//! First-order stable spline kernel `K_β(i, j) = β^max(i, j)` (1-based).
//!
//! Besides the dense matrix and a jittered Cholesky factor, the kernel has
//! closed forms that the estimators rely on: it is the covariance of a
//! Brownian motion sampled at the decreasing times `t_i = β^i`, so its
//! inverse is tridiagonal and its determinant is a product of increments.
//! With `d_i = β^i (1 - β)` for `i < n` and `d_n = β^n`:
//!
//! ```text
//! log det K_β = n(n+1)/2 · log β + (n-1) · log(1-β)
//! tr(K_β⁻¹ S) = Σ_{i<n} (S_ii - 2 S_{i,i+1} + S_{i+1,i+1}) / d_i + S_nn / d_n
//! ```

use std::sync::OnceLock;

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{NebError, Result};
use crate::scalar::Scalar;

/// Lower end of the β search interval.
pub const BETA_MIN: f64 = 1e-6;
/// Upper end of the β search interval.
pub const BETA_MAX: f64 = 1.0 - 1e-6;

const JITTER_START: f64 = 1e-12;
const JITTER_CAP: f64 = 1e-6;

#[derive(Debug, Clone)]
struct Factor<T: Scalar> {
    lower: DMatrix<T>,
    jitter: T,
}

/// Dense stable spline kernel with a lazily computed Cholesky factor.
#[derive(Debug)]
pub struct KernelMatrix<T: Scalar> {
    n: usize,
    beta: T,
    entries: DMatrix<T>,
    factor: OnceLock<Result<Factor<T>>>,
}

impl<T: Scalar> Clone for KernelMatrix<T> {
    fn clone(&self) -> Self {
        let factor = OnceLock::new();
        if let Some(f) = self.factor.get() {
            let _ = factor.set(f.clone());
        }
        Self {
            n: self.n,
            beta: self.beta,
            entries: self.entries.clone(),
            factor,
        }
    }
}

/// Builds the `n x n` kernel for `β ∈ [0, 1)`.
pub fn build_kernel<T: Scalar>(n: usize, beta: T) -> Result<KernelMatrix<T>> {
    if n == 0 {
        return Err(NebError::InvalidArgument("kernel size must be positive".into()));
    }
    if !(beta >= T::zero() && beta < T::one()) {
        return Err(NebError::InvalidArgument(format!(
            "stable spline beta must lie in [0, 1), got {beta}"
        )));
    }
    let powers = beta_powers(beta, n);
    let entries = DMatrix::from_fn(n, n, |i, j| powers[i.max(j)]);
    Ok(KernelMatrix {
        n,
        beta,
        entries,
        factor: OnceLock::new(),
    })
}

/// `[β^1, ..., β^n]`, indexed from zero.
fn beta_powers<T: Scalar>(beta: T, n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n);
    let mut p = beta;
    for _ in 0..n {
        out.push(p);
        p *= beta;
    }
    out
}

impl<T: Scalar> KernelMatrix<T> {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn beta(&self) -> T {
        self.beta
    }

    pub fn entries(&self) -> &DMatrix<T> {
        &self.entries
    }

    /// Lower Cholesky factor of `K_β + jitter·I`. Jitter starts at
    /// `1e-12·tr(K)/n` and grows tenfold up to `1e-6·tr(K)/n`.
    pub fn cholesky(&self) -> Result<&DMatrix<T>> {
        self.factor_inner().map(|f| &f.lower)
    }

    /// Jitter that was needed for the factorization (zero if none).
    pub fn jitter(&self) -> Result<T> {
        self.factor_inner().map(|f| f.jitter)
    }

    fn factor_inner(&self) -> Result<&Factor<T>> {
        self.factor
            .get_or_init(|| self.factorize())
            .as_ref()
            .map_err(Clone::clone)
    }

    fn factorize(&self) -> Result<Factor<T>> {
        if let Some(ch) = Cholesky::new(self.entries.clone()) {
            return Ok(Factor {
                lower: ch.unpack(),
                jitter: T::zero(),
            });
        }
        let scale = self.entries.trace() / T::count(self.n);
        let mut jitter = T::lit(JITTER_START) * scale;
        let cap = T::lit(JITTER_CAP) * scale;
        while jitter > T::zero() && jitter <= cap * T::lit(1.000001) {
            let mut m = self.entries.clone();
            for i in 0..self.n {
                m[(i, i)] += jitter;
            }
            if let Some(ch) = Cholesky::<T, Dyn>::new(m) {
                return Ok(Factor {
                    lower: ch.unpack(),
                    jitter,
                });
            }
            jitter *= T::lit(10.0);
        }
        Err(NebError::IllConditionedKernel {
            beta: self.beta.as_f64(),
            lambda: 1.0,
            n: self.n,
        })
    }

    /// Closed-form `log det K_β`.
    pub fn log_det_analytic(&self) -> T {
        analytic_log_det(self.beta, self.n)
    }

    /// Closed-form `tr(K_β⁻¹ S)` from the tridiagonal inverse.
    pub fn precision_trace(&self, s: &DMatrix<T>) -> Result<T> {
        precision_trace(self.beta, s)
    }

    /// Tridiagonal `K_β⁻¹`, dense.
    pub fn precision_matrix(&self) -> DMatrix<T> {
        let n = self.n;
        let d = increments(self.beta, n);
        let mut q = DMatrix::zeros(n, n);
        for i in 0..n {
            q[(i, i)] += T::one() / d[i];
            if i + 1 < n {
                q[(i + 1, i + 1)] += T::one() / d[i];
                q[(i, i + 1)] = -T::one() / d[i];
                q[(i + 1, i)] = -T::one() / d[i];
            }
        }
        q
    }

    /// Diagonal `β^1 >= ... >= β^n`.
    pub fn diagonal(&self) -> Vec<T> {
        (0..self.n).map(|i| self.entries[(i, i)]).collect()
    }
}

fn increments<T: Scalar>(beta: T, n: usize) -> Vec<T> {
    let powers = beta_powers(beta, n);
    (0..n)
        .map(|i| {
            if i + 1 < n {
                powers[i] * (T::one() - beta)
            } else {
                powers[i]
            }
        })
        .collect()
}

/// `log det K_β = n(n+1)/2 · log β + (n-1) · log(1-β)`.
pub fn analytic_log_det<T: Scalar>(beta: T, n: usize) -> T {
    let nn = T::count(n);
    nn * (nn + T::one()) / T::lit(2.0) * beta.ln() + (nn - T::one()) * (T::one() - beta).ln()
}

/// Second differences `S_ii - 2 S_{i,i+1} + S_{i+1,i+1}` (clipped at zero)
/// and the last diagonal entry: the quadratic data entering
/// `tr(K_β⁻¹ S)` for every β.
#[derive(Debug, Clone)]
pub struct PrecisionTraceData<T> {
    diffs: Vec<T>,
    last: T,
}

impl<T: Scalar> PrecisionTraceData<T> {
    pub fn new(s: &DMatrix<T>) -> Result<Self> {
        let n = s.nrows();
        if n == 0 || s.ncols() != n {
            return Err(NebError::DimensionMismatch(format!(
                "expected a nonempty square matrix, got {}x{}",
                s.nrows(),
                s.ncols()
            )));
        }
        let diffs = (0..n - 1)
            .map(|i| {
                let d = s[(i, i)] - (s[(i, i + 1)] + s[(i + 1, i)]) + s[(i + 1, i + 1)];
                d.max(T::zero())
            })
            .collect();
        Ok(Self {
            diffs,
            last: s[(n - 1, n - 1)].max(T::zero()),
        })
    }

    pub fn n(&self) -> usize {
        self.diffs.len() + 1
    }

    pub fn is_zero(&self) -> bool {
        self.last == T::zero() && self.diffs.iter().all(|&d| d == T::zero())
    }

    /// `log tr(K_β⁻¹ S)` evaluated in log space so that tiny β does not
    /// overflow. Returns `-inf` when the trace is zero.
    pub fn log_trace(&self, beta: T) -> T {
        let n = self.n();
        let lb = beta.ln();
        let l1b = (T::one() - beta).ln();
        let mut terms: Vec<T> = Vec::with_capacity(n);
        for (i, &d) in self.diffs.iter().enumerate() {
            if d > T::zero() {
                terms.push(d.ln() - T::count(i + 1) * lb - l1b);
            }
        }
        if self.last > T::zero() {
            terms.push(self.last.ln() - T::count(n) * lb);
        }
        log_sum_exp(&terms)
    }

    pub fn trace(&self, beta: T) -> T {
        self.log_trace(beta).exp()
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(terms: &[T]) -> T {
    let neg_inf = -T::lit(f64::INFINITY);
    let max = terms.iter().copied().fold(neg_inf, |a, b| a.max(b));
    if !max.is_finite() {
        return max;
    }
    let sum = terms.iter().fold(T::zero(), |acc, &t| acc + (t - max).exp());
    max + sum.ln()
}

/// Closed-form `tr(K_β⁻¹ S)` for any square `S`.
pub fn precision_trace<T: Scalar>(beta: T, s: &DMatrix<T>) -> Result<T> {
    let n = s.nrows();
    if n == 0 || s.ncols() != n {
        return Err(NebError::DimensionMismatch(format!(
            "expected a nonempty square matrix, got {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    let d = increments(beta, n);
    let mut acc = s[(n - 1, n - 1)] / d[n - 1];
    for i in 0..n - 1 {
        let diff = s[(i, i)] - (s[(i, i + 1)] + s[(i + 1, i)]) + s[(i + 1, i + 1)];
        acc += diff / d[i];
    }
    Ok(acc)
}

/// The prior covariance `λ K_β`.
#[derive(Debug, Clone)]
pub struct ScaledKernel<T: Scalar> {
    pub kernel: KernelMatrix<T>,
    pub lambda: T,
}

impl<T: Scalar> ScaledKernel<T> {
    pub fn new(kernel: KernelMatrix<T>, lambda: T) -> Result<Self> {
        if !(lambda > T::zero()) || !lambda.is_finite() {
            return Err(NebError::InvalidArgument(format!(
                "kernel scale lambda must be positive and finite, got {lambda}"
            )));
        }
        Ok(Self { kernel, lambda })
    }

    /// Convenience constructor from `(n, λ, β)`.
    pub fn build(n: usize, lambda: T, beta: T) -> Result<Self> {
        Self::new(build_kernel(n, beta)?, lambda)
    }

    pub fn n(&self) -> usize {
        self.kernel.n()
    }

    pub fn beta(&self) -> T {
        self.kernel.beta()
    }

    pub fn matrix(&self) -> DMatrix<T> {
        self.kernel.entries() * self.lambda
    }

    /// Lower Cholesky factor of `λ K_β` (including any kernel jitter).
    pub fn cholesky(&self) -> Result<DMatrix<T>> {
        let l = self.kernel.cholesky().map_err(|_| self.ill_conditioned())?;
        Ok(l * self.lambda.sqrt())
    }

    fn ill_conditioned(&self) -> NebError {
        NebError::IllConditionedKernel {
            beta: self.kernel.beta().as_f64(),
            lambda: self.lambda.as_f64(),
            n: self.kernel.n(),
        }
    }

    /// `(tr((λK_β)⁻¹ S), log det(λK_β))` through the Cholesky factor.
    pub fn inv_quad_and_logdet(&self, s: &DMatrix<T>) -> Result<(T, T)> {
        let n = self.n();
        if s.nrows() != n || s.ncols() != n {
            return Err(NebError::DimensionMismatch(format!(
                "kernel is {n}x{n}, matrix is {}x{}",
                s.nrows(),
                s.ncols()
            )));
        }
        let l = self.kernel.cholesky().map_err(|_| self.ill_conditioned())?;
        let x = l
            .solve_lower_triangular(s)
            .ok_or_else(|| self.ill_conditioned())?;
        let y = l
            .transpose()
            .solve_upper_triangular(&x)
            .ok_or_else(|| self.ill_conditioned())?;
        let trace = y.trace() / self.lambda;
        let logdet_k = l
            .diagonal()
            .iter()
            .fold(T::zero(), |acc, &d| acc + d.ln())
            * T::lit(2.0);
        let logdet = logdet_k + T::count(n) * self.lambda.ln();
        Ok((trace, logdet))
    }

    /// Same quantities through the closed forms.
    pub fn inv_quad_and_logdet_analytic(&self, s: &DMatrix<T>) -> Result<(T, T)> {
        let n = self.n();
        let trace = precision_trace(self.beta(), s)? / self.lambda;
        let logdet = analytic_log_det(self.beta(), n) + T::count(n) * self.lambda.ln();
        Ok((trace, logdet))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entries_match_definition() {
        let k = build_kernel(1, 0.5).unwrap();
        assert_eq!(k.entries()[(0, 0)], 0.5);
        let k = build_kernel(2, 0.5).unwrap();
        assert_eq!(
            k.entries(),
            &DMatrix::from_row_slice(2, 2, &[0.5, 0.25, 0.25, 0.25])
        );
        let sk = ScaledKernel::new(k, 2.0).unwrap();
        assert_eq!(
            sk.matrix(),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 0.5])
        );
    }

    #[test]
    fn beta_domain() {
        assert!(build_kernel(3, 1.0).is_err());
        assert!(build_kernel(3, -0.1).is_err());
        assert!(build_kernel(3, f64::NAN).is_err());
        assert!(build_kernel(0, 0.5).is_err());
        // beta = 0 is the all-zero limit: allowed to build, not to factor.
        let k = build_kernel(3, 0.0).unwrap();
        assert!(matches!(
            k.cholesky(),
            Err(NebError::IllConditionedKernel { .. })
        ));
    }

    #[test]
    fn scalar_inv_quad() {
        let sk = ScaledKernel::<f64>::build(1, 1.0, 0.5).unwrap();
        let (tr, ld) = sk
            .inv_quad_and_logdet(&DMatrix::from_element(1, 1, 2.0))
            .unwrap();
        assert!((tr - 4.0).abs() < 1e-15);
        assert!((ld - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn two_by_two_against_closed_form_inverse() {
        let sk = ScaledKernel::<f64>::build(2, 2.0, 0.5).unwrap();
        let a = sk.matrix();
        let det = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)];
        let inv_trace = (a[(1, 1)] + a[(0, 0)]) / det;
        let (tr, ld) = sk.inv_quad_and_logdet(&DMatrix::identity(2, 2)).unwrap();
        assert!((tr - inv_trace).abs() < 1e-12);
        assert!((ld - det.ln()).abs() < 1e-12);
    }

    #[test]
    fn trace_of_self_is_n() {
        for &(n, beta, lambda) in &[(5usize, 0.7, 0.3), (12, 0.9, 4.0), (1, 0.2, 1.0)] {
            let sk = ScaledKernel::<f64>::build(n, lambda, beta).unwrap();
            let (tr, _) = sk.inv_quad_and_logdet(&sk.matrix()).unwrap();
            assert!((tr - n as f64).abs() < 1e-8, "n={n} tr={tr}");
        }
    }

    #[test]
    fn analytic_forms_match_cholesky() {
        for &(n, beta) in &[(2usize, 0.5), (10, 0.8), (30, 0.9), (25, 0.3)] {
            let k = build_kernel::<f64>(n, beta).unwrap();
            let l = k.cholesky().unwrap();
            let chol_logdet: f64 = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
            assert!(
                (chol_logdet - k.log_det_analytic()).abs() < 1e-8 * chol_logdet.abs().max(1.0),
                "n={n} beta={beta}"
            );
            let q = k.precision_matrix();
            let prod = &q * k.entries();
            let err = (prod - DMatrix::<f64>::identity(n, n)).amax();
            assert!(err < 1e-8, "n={n} beta={beta} err={err}");
        }
    }

    #[test]
    fn precision_trace_matches_dense_solve() {
        let n = 8;
        let s = DMatrix::from_fn(n, n, |i, j| 1.0 / (1.0 + i as f64 + j as f64));
        let sk = ScaledKernel::<f64>::build(n, 1.7, 0.75).unwrap();
        let (tr_chol, ld_chol) = sk.inv_quad_and_logdet(&s).unwrap();
        let (tr_an, ld_an) = sk.inv_quad_and_logdet_analytic(&s).unwrap();
        assert!((tr_chol - tr_an).abs() < 1e-8 * tr_an.abs());
        assert!((ld_chol - ld_an).abs() < 1e-10);
    }

    #[test]
    fn log_trace_survives_tiny_beta() {
        let n = 100;
        let s = DMatrix::<f64>::identity(n, n);
        let data = PrecisionTraceData::new(&s).unwrap();
        let lt = data.log_trace(1e-6);
        assert!(lt.is_finite());
        assert!(lt > 1000.0);
    }

    #[test]
    fn scaling_identity() {
        let n = 6;
        let s = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 + i as f64 } else { 0.1 });
        let k1 = ScaledKernel::<f64>::build(n, 1.0, 0.6).unwrap();
        let k3 = ScaledKernel::<f64>::build(n, 3.0, 0.6).unwrap();
        let (t1, l1) = k1.inv_quad_and_logdet(&s).unwrap();
        let (t3, l3) = k3.inv_quad_and_logdet(&s).unwrap();
        assert!((t3 - t1 / 3.0).abs() < 1e-10);
        assert!((l3 - (l1 + n as f64 * 3.0f64.ln())).abs() < 1e-10);
    }

    #[test]
    fn diagonal_nonincreasing() {
        let k = build_kernel(20, 0.83).unwrap();
        let d = k.diagonal();
        assert!(d.windows(2).all(|w| w[1] <= w[0]));
    }
}
