//! Discrete-time LTI primitives: rational transfer functions, truncated
//! impulse responses, lower-triangular Toeplitz operators and the
//! duplication map `D` with `D a = vec(T_N(a))`.

use nalgebra::{DMatrix, DVector};

use crate::error::{NebError, Result};
use crate::scalar::Scalar;

/// Proper rational transfer function in the delay operator `q^-1`:
///
/// ```text
///          d + b1 q^-1 + ... + b_nb q^-nb
/// G(q) = ---------------------------------
///           1 + a1 q^-1 + ... + a_na q^-na
/// ```
///
/// The direct term `d` is zero for the strictly proper modules used by the
/// estimators; it is only set through [`RationalTf::with_direct`].
#[derive(Debug, Clone, PartialEq)]
pub struct RationalTf<T> {
    direct: T,
    num: Vec<T>,
    den: Vec<T>,
}

impl<T: Scalar> RationalTf<T> {
    /// Strictly proper transfer function; `num` holds the coefficients of
    /// `q^-1, ..., q^-nb` and `den` those of `q^-1, ..., q^-na`.
    pub fn new(num: Vec<T>, den: Vec<T>) -> Self {
        Self {
            direct: T::zero(),
            num,
            den,
        }
    }

    /// Transfer function with an explicit direct-feedthrough term.
    pub fn with_direct(direct: T, num: Vec<T>, den: Vec<T>) -> Self {
        Self { direct, num, den }
    }

    /// Builds a transfer function from full polynomials in `q^-1` whose
    /// first entries are the `q^0` coefficients. The denominator is
    /// normalized so that its leading coefficient is one.
    pub fn from_polynomials(num: &[T], den: &[T]) -> Result<Self> {
        let lead = *den
            .first()
            .ok_or_else(|| NebError::InvalidArgument("empty denominator".into()))?;
        if lead == T::zero() {
            return Err(NebError::InvalidArgument(
                "denominator has zero leading coefficient".into(),
            ));
        }
        let direct = num.first().copied().unwrap_or_else(T::zero) / lead;
        let num = num.iter().skip(1).map(|&c| c / lead).collect();
        let den = den.iter().skip(1).map(|&c| c / lead).collect();
        Ok(Self { direct, num, den })
    }

    /// Second-order module `(b1 q^-1 + b2 q^-2) / (1 + a1 q^-1 + a2 q^-2)`
    /// from the parameter vector `[b1, b2, a1, a2]`.
    pub fn second_order(theta: [T; 4]) -> Self {
        Self::new(vec![theta[0], theta[1]], vec![theta[2], theta[3]])
    }

    pub fn direct(&self) -> T {
        self.direct
    }

    pub fn num(&self) -> &[T] {
        &self.num
    }

    pub fn den(&self) -> &[T] {
        &self.den
    }

    pub fn is_strictly_proper(&self) -> bool {
        self.direct == T::zero()
    }

    /// Numerator polynomial in `q^-1` including the `q^0` coefficient.
    pub fn num_polynomial(&self) -> Vec<T> {
        std::iter::once(self.direct)
            .chain(self.num.iter().copied())
            .collect()
    }

    /// Denominator polynomial in `q^-1` including the leading one.
    pub fn den_polynomial(&self) -> Vec<T> {
        std::iter::once(T::one())
            .chain(self.den.iter().copied())
            .collect()
    }

    /// Series connection `self * other`.
    pub fn series(&self, other: &Self) -> Self {
        let num = poly_mul(&self.num_polynomial(), &other.num_polynomial());
        let den = poly_mul(&self.den_polynomial(), &other.den_polynomial());
        Self::from_polynomials(&num, &den).expect("product of monic denominators is monic")
    }

    /// Schur-Cohn stability test: true when every pole lies strictly inside
    /// the unit circle.
    pub fn is_stable(&self) -> bool {
        polynomial_is_stable(&self.den_polynomial())
    }

    /// Largest pole modulus, zero for FIR systems.
    pub fn pole_radius(&self) -> T {
        polynomial_root_radius(&self.den_polynomial())
    }

    /// Filters `u` through the transfer function from zero initial state.
    pub fn filter(&self, u: &[T]) -> Vec<T> {
        let mut y = vec![T::zero(); u.len()];
        for t in 0..u.len() {
            let mut acc = self.direct * u[t];
            for (k, &b) in self.num.iter().enumerate() {
                if t > k {
                    acc += b * u[t - k - 1];
                }
            }
            for (k, &a) in self.den.iter().enumerate() {
                if t > k {
                    acc -= a * y[t - k - 1];
                }
            }
            y[t] = acc;
        }
        y
    }

    /// First `n` impulse-response samples starting at lag one, i.e. the
    /// coefficients `g(1), ..., g(n)` of `q^-1, ..., q^-n`.
    ///
    /// Unstable systems are not rejected; callers check [`Self::is_stable`].
    pub fn impulse_response(&self, n: usize) -> Result<ImpulseResponse<T>> {
        if n == 0 {
            return Err(NebError::InvalidArgument(
                "impulse response length must be positive".into(),
            ));
        }
        let mut delta = vec![T::zero(); n + 1];
        delta[0] = T::one();
        let h = self.filter(&delta);
        Ok(ImpulseResponse::new(h[1..].to_vec(), 1))
    }

    /// First `n` impulse-response samples starting at lag zero,
    /// `[d, g(1), ..., g(n-1)]`. This is the generator of the Toeplitz
    /// operator that applies the system to a length-`n` signal.
    pub fn impulse_response_lag0(&self, n: usize) -> Result<ImpulseResponse<T>> {
        if n == 0 {
            return Err(NebError::InvalidArgument(
                "impulse response length must be positive".into(),
            ));
        }
        let mut delta = vec![T::zero(); n];
        delta[0] = T::one();
        Ok(ImpulseResponse::new(self.filter(&delta), 0))
    }
}

/// Product of two polynomials given by coefficient slices.
pub fn poly_mul<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let mut out = vec![T::zero(); a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// Difference `a - b` of two coefficient sequences, zero padded.
pub fn poly_sub<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    let len = a.len().max(b.len());
    (0..len)
        .map(|i| {
            a.get(i).copied().unwrap_or_else(T::zero) - b.get(i).copied().unwrap_or_else(T::zero)
        })
        .collect()
}

/// Step-down (Schur-Cohn) test on `1 + a1 z + ... + an z^n` with `z = q^-1`:
/// poles of the system are strictly inside the unit circle iff all
/// reflection coefficients have modulus below one.
fn polynomial_is_stable<T: Scalar>(poly: &[T]) -> bool {
    let mut a: Vec<T> = poly.to_vec();
    while a.len() > 1 && a[a.len() - 1] == T::zero() {
        a.pop();
    }
    if a.iter().any(|c| !c.is_finite()) {
        return false;
    }
    while a.len() > 1 {
        let m = a.len() - 1;
        let k = a[m] / a[0];
        if k.abs() >= T::one() {
            return false;
        }
        let denom = T::one() - k * k;
        let next: Vec<T> = (0..m).map(|i| (a[i] - k * a[m - i]) / denom).collect();
        a = next;
    }
    true
}

fn polynomial_root_radius<T: Scalar>(poly: &[T]) -> T {
    let mut a: Vec<T> = poly.to_vec();
    while a.len() > 1 && a[a.len() - 1] == T::zero() {
        a.pop();
    }
    let m = a.len() - 1;
    if m == 0 {
        return T::zero();
    }
    // Poles are the roots of q^m + a1 q^{m-1} + ... + am (companion form).
    let mut companion = DMatrix::<T>::zeros(m, m);
    for j in 0..m {
        companion[(0, j)] = -a[j + 1] / a[0];
    }
    for i in 1..m {
        companion[(i, i - 1)] = T::one();
    }
    companion
        .complex_eigenvalues()
        .iter()
        .map(|z| (z.re * z.re + z.im * z.im).sqrt())
        .fold(T::zero(), |acc, r| acc.max(r))
}

/// Truncated impulse response. `start_lag` records whether `coeffs[0]` is
/// the lag-one coefficient (strictly proper modules) or the lag-zero
/// coefficient (sensitivity paths, Toeplitz generators).
#[derive(Debug, Clone, PartialEq)]
pub struct ImpulseResponse<T> {
    pub coeffs: Vec<T>,
    pub start_lag: usize,
}

impl<T: Scalar> ImpulseResponse<T> {
    pub fn new(coeffs: Vec<T>, start_lag: usize) -> Self {
        Self { coeffs, start_lag }
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.coeffs
    }

    pub fn to_dvector(&self) -> DVector<T> {
        DVector::from_column_slice(&self.coeffs)
    }

    pub fn norm(&self) -> T {
        self.coeffs
            .iter()
            .fold(T::zero(), |acc, &c| acc + c * c)
            .sqrt()
    }
}

/// Lower-triangular Toeplitz operator `T_n(a)` of size `m x n` where `m` is
/// the generator length: entry `(i, j)` is `a(i - j)` for `i >= j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToeplitzOperator<T> {
    generator: Vec<T>,
    cols: usize,
}

/// Builds the `len(a) x n` lower-triangular Toeplitz operator of `a`.
pub fn toeplitz<T: Scalar>(a: &[T], n: usize) -> Result<ToeplitzOperator<T>> {
    if a.is_empty() || n == 0 {
        return Err(NebError::InvalidArgument(
            "toeplitz needs a nonempty generator and at least one column".into(),
        ));
    }
    Ok(ToeplitzOperator {
        generator: a.to_vec(),
        cols: n,
    })
}

impl<T: Scalar> ToeplitzOperator<T> {
    pub fn rows(&self) -> usize {
        self.generator.len()
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn generator(&self) -> &[T] {
        &self.generator
    }

    /// Dense `m x n` realization.
    pub fn to_matrix(&self) -> DMatrix<T> {
        toeplitz_matrix(&self.generator, self.cols)
    }

    /// `T_n(a) x` for `x` of length `n`; equals the first `m` samples of
    /// the convolution `a * x`.
    pub fn apply(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.cols {
            return Err(NebError::DimensionMismatch(format!(
                "toeplitz operator has {} columns, vector has length {}",
                self.cols,
                x.len()
            )));
        }
        let m = self.generator.len();
        let mut y = vec![T::zero(); m];
        for (i, yi) in y.iter_mut().enumerate() {
            let mut acc = T::zero();
            for j in 0..=i.min(self.cols - 1) {
                acc += self.generator[i - j] * x[j];
            }
            *yi = acc;
        }
        Ok(y)
    }

    /// `T_n(a)^T y` for `y` of length `m` (cross-correlation).
    pub fn apply_transpose(&self, y: &[T]) -> Result<Vec<T>> {
        let m = self.generator.len();
        if y.len() != m {
            return Err(NebError::DimensionMismatch(format!(
                "toeplitz operator has {} rows, vector has length {}",
                m,
                y.len()
            )));
        }
        Ok(correlate(&self.generator, y, self.cols))
    }
}

/// Dense `len(a) x n` lower-triangular Toeplitz matrix of `a`.
pub fn toeplitz_matrix<T: Scalar>(a: &[T], n: usize) -> DMatrix<T> {
    let m = a.len();
    DMatrix::from_fn(m, n, |i, j| if i >= j { a[i - j] } else { T::zero() })
}

/// First `n` samples of the discrete convolution of two equal-length
/// sequences.
pub fn convolve<T: Scalar>(a: &[T], b: &[T]) -> Result<Vec<T>> {
    if a.len() != b.len() {
        return Err(NebError::DimensionMismatch(format!(
            "convolve needs equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(convolve_truncated(a, b, a.len()))
}

/// First `len` samples of `a * b` for sequences of arbitrary length.
pub(crate) fn convolve_truncated<T: Scalar>(a: &[T], b: &[T], len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); len];
    for (i, &x) in a.iter().enumerate().take(len) {
        if x == T::zero() {
            continue;
        }
        for (j, &y) in b.iter().enumerate().take(len - i) {
            out[i + j] += x * y;
        }
    }
    out
}

/// `out[k] = sum_t a[t - k] y[t]` for `k < cols`: the transpose of the
/// Toeplitz operator generated by `a` applied to `y`.
pub(crate) fn correlate<T: Scalar>(a: &[T], y: &[T], cols: usize) -> Vec<T> {
    let m = y.len();
    let mut out = vec![T::zero(); cols];
    for (k, o) in out.iter_mut().enumerate() {
        let mut acc = T::zero();
        for t in k..m {
            if let Some(&g) = a.get(t - k) {
                acc += g * y[t];
            }
        }
        *o = acc;
    }
    out
}

/// Convolves every column of `x` with `a`, keeping the first `x.nrows()`
/// samples: returns `T_N(a) x` without forming the Toeplitz matrix.
pub(crate) fn convolve_columns<T: Scalar>(a: &[T], x: &DMatrix<T>) -> DMatrix<T> {
    let rows = x.nrows();
    let mut out = DMatrix::<T>::zeros(rows, x.ncols());
    let taps = a.len().min(rows);
    for c in 0..x.ncols() {
        let col = x.column(c);
        let mut dst = out.column_mut(c);
        for (lag, &g) in a.iter().enumerate().take(taps) {
            if g == T::zero() {
                continue;
            }
            for t in lag..rows {
                dst[t] += g * col[t - lag];
            }
        }
    }
    out
}

/// The duplication map `D` (`N^2 x N`) with `D a = vec(T_N(a))`, where
/// `vec` stacks columns. Stored as an index map; the dense matrix is only
/// built on request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DuplicationMap {
    n: usize,
}

pub fn duplication_matrix(n: usize) -> Result<DuplicationMap> {
    if n == 0 {
        return Err(NebError::InvalidArgument(
            "duplication matrix needs N >= 1".into(),
        ));
    }
    Ok(DuplicationMap { n })
}

impl DuplicationMap {
    pub fn size(&self) -> usize {
        self.n
    }

    /// Source index of row `k` of `D`, or `None` for an all-zero row.
    pub fn source(&self, k: usize) -> Option<usize> {
        let (col, row) = (k / self.n, k % self.n);
        (row >= col).then(|| row - col)
    }

    pub fn apply<T: Scalar>(&self, a: &[T]) -> Result<Vec<T>> {
        if a.len() != self.n {
            return Err(NebError::DimensionMismatch(format!(
                "duplication map of size {} applied to vector of length {}",
                self.n,
                a.len()
            )));
        }
        Ok((0..self.n * self.n)
            .map(|k| self.source(k).map_or_else(T::zero, |s| a[s]))
            .collect())
    }

    pub fn apply_transpose<T: Scalar>(&self, v: &[T]) -> Result<Vec<T>> {
        if v.len() != self.n * self.n {
            return Err(NebError::DimensionMismatch(format!(
                "transpose duplication map expects length {}, got {}",
                self.n * self.n,
                v.len()
            )));
        }
        let mut out = vec![T::zero(); self.n];
        for (k, &x) in v.iter().enumerate() {
            if let Some(s) = self.source(k) {
                out[s] += x;
            }
        }
        Ok(out)
    }

    /// Dense `N^2 x N` realization; only sensible for small `N`.
    pub fn to_dense<T: Scalar>(&self) -> DMatrix<T> {
        let mut d = DMatrix::zeros(self.n * self.n, self.n);
        for k in 0..self.n * self.n {
            if let Some(s) = self.source(k) {
                d[(k, s)] = T::one();
            }
        }
        d
    }

    /// `D^T (M ⊗ I_N) D` for an `N x N` matrix `M`, i.e. the matrix `A` with
    /// `a^T A b = tr(T_N(a) M T_N(b)^T)`.
    ///
    /// Entry `(a, b)` is the sum of `M[r - a, r - b]` over `r >= max(a, b)`,
    /// which satisfies `A[a+1, b+1] = A[a, b] - M[N-1-a, N-1-b]`.
    pub fn kron_congruence<T: Scalar>(&self, m: &DMatrix<T>) -> Result<DMatrix<T>> {
        let n = self.n;
        if m.nrows() != n || m.ncols() != n {
            return Err(NebError::DimensionMismatch(format!(
                "kron congruence needs a {n}x{n} matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let mut out = DMatrix::<T>::zeros(n, n);
        for b in 0..n {
            let mut acc = T::zero();
            for r in b..n {
                acc += m[(r, r - b)];
            }
            out[(0, b)] = acc;
        }
        for a in 1..n {
            let mut acc = T::zero();
            for r in a..n {
                acc += m[(r - a, r)];
            }
            out[(a, 0)] = acc;
        }
        for a in 0..n - 1 {
            for b in 0..n - 1 {
                out[(a + 1, b + 1)] = out[(a, b)] - m[(n - 1 - a, n - 1 - b)];
            }
        }
        Ok(out)
    }
}
