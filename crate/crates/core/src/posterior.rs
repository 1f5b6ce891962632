//! Linear-Gaussian conditioning for latent impulse responses.
//!
//! A latent vector `x` (a stack of length-`n` paths, each with a stable
//! spline prior) is observed through channels `y_c = X_c x + e_c`,
//! `e_c ~ N(0, σ_c² I)`. Everything is computed in the whitened
//! information form: with `L` the block-diagonal prior factor,
//! `H = I + Σ_c Lᵀ X_cᵀ X_c L / σ_c²` is the only matrix factorized.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{NebError, Result};
use crate::kernel::ScaledKernel;
use crate::lti::{convolve_columns, ToeplitzOperator};
use crate::scalar::Scalar;

/// One measurement channel `y = X x[offset..offset + X.ncols()] + e`.
#[derive(Debug, Clone)]
pub struct Observation<T: Scalar> {
    pub data: DVector<T>,
    pub design: DMatrix<T>,
    pub offset: usize,
    pub variance: T,
}

impl<T: Scalar> Observation<T> {
    pub fn new(data: DVector<T>, design: DMatrix<T>, offset: usize, variance: T) -> Result<Self> {
        if data.len() != design.nrows() {
            return Err(NebError::DimensionMismatch(format!(
                "{} samples for a design with {} rows",
                data.len(),
                design.nrows()
            )));
        }
        if !(variance > T::zero()) || !variance.is_finite() {
            return Err(NebError::InvalidArgument(format!(
                "noise variance must be positive and finite, got {variance}"
            )));
        }
        Ok(Self {
            data,
            design,
            offset,
            variance,
        })
    }
}

/// Block-diagonal Cholesky factor of the prior covariance.
#[derive(Debug, Clone)]
pub struct PriorFactor<T: Scalar> {
    blocks: Vec<DMatrix<T>>,
    offsets: Vec<usize>,
    dim: usize,
}

impl<T: Scalar> PriorFactor<T> {
    pub fn new(priors: &[ScaledKernel<T>]) -> Result<Self> {
        if priors.is_empty() {
            return Err(NebError::InvalidArgument("no prior blocks".into()));
        }
        let mut blocks = Vec::with_capacity(priors.len());
        let mut offsets = Vec::with_capacity(priors.len());
        let mut dim = 0;
        for p in priors {
            offsets.push(dim);
            dim += p.n();
            blocks.push(p.cholesky()?);
        }
        Ok(Self {
            blocks,
            offsets,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn blocks(&self) -> &[DMatrix<T>] {
        &self.blocks
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// `L v`.
    pub fn mul(&self, v: &DVector<T>) -> DVector<T> {
        let mut out = DVector::zeros(self.dim);
        for (b, &o) in self.blocks.iter().zip(&self.offsets) {
            let k = b.nrows();
            out.rows_mut(o, k).copy_from(&(b * v.rows(o, k)));
        }
        out
    }

    /// `L⁻¹ v`.
    pub fn solve(&self, v: &DVector<T>) -> Result<DVector<T>> {
        let mut out = DVector::zeros(self.dim);
        for (b, &o) in self.blocks.iter().zip(&self.offsets) {
            let k = b.nrows();
            let x = b
                .solve_lower_triangular(&v.rows(o, k).into_owned())
                .ok_or_else(|| NebError::IllConditioned("singular prior factor".into()))?;
            out.rows_mut(o, k).copy_from(&x);
        }
        Ok(out)
    }

    /// `log det(L Lᵀ)`.
    pub fn log_det(&self) -> T {
        self.blocks
            .iter()
            .flat_map(|b| b.diagonal().iter().copied().collect::<Vec<_>>())
            .fold(T::zero(), |acc, d| acc + d.ln())
            * T::lit(2.0)
    }

    /// `L M Lᵀ` for a `dim x dim` matrix `M`.
    pub fn congruence(&self, m: &DMatrix<T>) -> DMatrix<T> {
        let mut left = DMatrix::zeros(self.dim, self.dim);
        for (b, &o) in self.blocks.iter().zip(&self.offsets) {
            let k = b.nrows();
            left.rows_mut(o, k).copy_from(&(b * m.rows(o, k)));
        }
        let mut out = DMatrix::zeros(self.dim, self.dim);
        for (b, &o) in self.blocks.iter().zip(&self.offsets) {
            let k = b.nrows();
            out.columns_mut(o, k)
                .copy_from(&(left.columns(o, k) * b.transpose()));
        }
        out
    }

    /// `X L_sub`, where `L_sub` is the part of `L` spanning the columns
    /// `offset..offset + X.ncols()`. The span must cover whole blocks.
    pub fn right_mul(&self, x: &DMatrix<T>, offset: usize) -> Result<DMatrix<T>> {
        let end = offset + x.ncols();
        if end > self.dim {
            return Err(NebError::DimensionMismatch(format!(
                "design spans columns {offset}..{end} of a {}-dimensional latent vector",
                self.dim
            )));
        }
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        let mut covered = offset;
        for (b, &o) in self.blocks.iter().zip(&self.offsets) {
            let k = b.nrows();
            if o + k <= offset || o >= end {
                continue;
            }
            if o < offset || o + k > end || o != covered {
                return Err(NebError::DimensionMismatch(
                    "observation span does not align with prior blocks".into(),
                ));
            }
            let lo = o - offset;
            out.columns_mut(lo, k)
                .copy_from(&(x.columns(lo, k) * b));
            covered = o + k;
        }
        if covered != end {
            return Err(NebError::DimensionMismatch(
                "observation span does not align with prior blocks".into(),
            ));
        }
        Ok(out)
    }
}

/// Information contributed by one channel, already whitened by the prior
/// factor and scaled by the noise variance.
#[derive(Debug, Clone)]
pub struct WhitenedTerm<T: Scalar> {
    pub offset: usize,
    /// `(X L)ᵀ (X L) / σ²`.
    pub gram: DMatrix<T>,
    /// `(X L)ᵀ y / σ²`.
    pub rhs: DVector<T>,
    /// `yᵀ y / σ²`.
    pub energy: T,
    /// `N log σ²`.
    pub log_det: T,
}

impl<T: Scalar> WhitenedTerm<T> {
    pub fn new(obs: &Observation<T>, prior: &PriorFactor<T>) -> Result<Self> {
        let xl = prior.right_mul(&obs.design, obs.offset)?;
        Ok(Self::from_whitened_design(&xl, &obs.data, obs.offset, obs.variance))
    }

    /// From an already whitened design `X L`.
    pub fn from_whitened_design(xl: &DMatrix<T>, y: &DVector<T>, offset: usize, variance: T) -> Self {
        let inv = T::one() / variance;
        Self {
            offset,
            gram: (xl.transpose() * xl) * inv,
            rhs: xl.tr_mul(y) * inv,
            energy: y.norm_squared() * inv,
            log_det: T::count(y.len()) * variance.ln(),
        }
    }
}

/// Result of conditioning: posterior in factored form plus the marginal
/// objective `log det Σ_z + zᵀ Σ_z⁻¹ z`.
#[derive(Debug, Clone)]
pub struct Conditioned<T: Scalar> {
    prior: PriorFactor<T>,
    chol: Cholesky<T, Dyn>,
    whitened_mean: DVector<T>,
    objective: T,
}

/// Conditions the prior on a set of whitened channel terms.
pub fn condition<T: Scalar>(terms: &[WhitenedTerm<T>], prior: &PriorFactor<T>) -> Result<Conditioned<T>> {
    let d = prior.dim();
    let mut h = DMatrix::<T>::identity(d, d);
    let mut u = DVector::<T>::zeros(d);
    let mut energy = T::zero();
    let mut log_det = T::zero();
    for t in terms {
        let w = t.gram.nrows();
        if t.offset + w > d || t.rhs.len() != w {
            return Err(NebError::DimensionMismatch("whitened term outside latent vector".into()));
        }
        let mut view = h.view_mut((t.offset, t.offset), (w, w));
        view += &t.gram;
        let mut uv = u.rows_mut(t.offset, w);
        uv += &t.rhs;
        energy += t.energy;
        log_det += t.log_det;
    }
    let chol = Cholesky::new(h)
        .ok_or_else(|| NebError::IllConditioned("information matrix is not positive definite".into()))?;
    let whitened_mean = chol.solve(&u);
    let log_det_h = chol
        .l_dirty()
        .diagonal()
        .iter()
        .fold(T::zero(), |acc, &v| acc + v.ln())
        * T::lit(2.0);
    let objective = log_det + log_det_h + energy - u.dot(&whitened_mean);
    if !objective.is_finite() {
        return Err(NebError::IllConditioned("marginal objective is not finite".into()));
    }
    Ok(Conditioned {
        prior: prior.clone(),
        chol,
        whitened_mean,
        objective,
    })
}

impl<T: Scalar> Conditioned<T> {
    pub fn dim(&self) -> usize {
        self.prior.dim()
    }

    pub fn mean(&self) -> DVector<T> {
        self.prior.mul(&self.whitened_mean)
    }

    /// `L H⁻¹ Lᵀ`, assembled as `V Vᵀ` with `Vᵀ = C⁻¹ Lᵀ` so it is PSD by
    /// construction.
    pub fn covariance(&self) -> DMatrix<T> {
        let d = self.dim();
        let c = self.chol.l();
        let cinv = c
            .solve_lower_triangular(&DMatrix::identity(d, d))
            .expect("Cholesky factor has a positive diagonal");
        // Vᵀ = C⁻¹ Lᵀ, so V Vᵀ = L (C⁻ᵀ C⁻¹) Lᵀ.
        let mut vt = DMatrix::zeros(d, d);
        for (b, &o) in self.prior.blocks().iter().zip(self.prior.offsets()) {
            let k = b.nrows();
            vt.columns_mut(o, k)
                .copy_from(&(cinv.columns(o, k) * b.transpose()));
        }
        let cov = vt.transpose() * &vt;
        symmetrize(&cov)
    }

    pub fn objective(&self) -> T {
        self.objective
    }

    /// `-2 log p(x)` under the conditioned distribution, without the
    /// `dim · log 2π` constant.
    pub fn neg2_log_density(&self, x: &DVector<T>) -> Result<T> {
        let w = self.prior.solve(x)?;
        let diff = w - &self.whitened_mean;
        let c = self.chol.l_dirty();
        let lower = c.lower_triangle();
        let quad = (lower.transpose() * diff).norm_squared();
        let log_det_h = c.diagonal().iter().fold(T::zero(), |acc, &v| acc + v.ln()) * T::lit(2.0);
        Ok(self.prior.log_det() - log_det_h + quad)
    }

    pub fn posterior(&self) -> GaussianPosterior<T> {
        GaussianPosterior::new(self.mean(), self.covariance())
    }

    /// One draw `mean + L C⁻ᵀ ξ`, `ξ ~ N(0, I)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<T> {
        let d = self.dim();
        let xi = DVector::from_fn(d, |_, _| {
            let v: f64 = StandardNormal.sample(rng);
            T::lit(v)
        });
        let mut z = self.whitened_mean.clone();
        let c = self.chol.l_dirty();
        let eps = c
            .tr_solve_lower_triangular(&xi)
            .expect("Cholesky factor has a positive diagonal");
        z += eps;
        self.prior.mul(&z)
    }
}

/// Mean and covariance of a Gaussian latent vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior<T: Scalar> {
    pub mean: DVector<T>,
    pub cov: DMatrix<T>,
}

impl<T: Scalar> GaussianPosterior<T> {
    pub fn new(mean: DVector<T>, cov: DMatrix<T>) -> Self {
        Self { mean, cov }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `P + m mᵀ`.
    pub fn second_moment(&self) -> DMatrix<T> {
        symmetrize(&(&self.cov + &self.mean * self.mean.transpose()))
    }
}

pub(crate) fn symmetrize<T: Scalar>(m: &DMatrix<T>) -> DMatrix<T> {
    (m + m.transpose()) * T::lit(0.5)
}

/// Posterior of the latent vector given the channels.
pub fn posterior<T: Scalar>(obs: &[Observation<T>], priors: &[ScaledKernel<T>]) -> Result<GaussianPosterior<T>> {
    Ok(condition_observations(obs, priors)?.posterior())
}

/// `log det Σ_z + zᵀ Σ_z⁻¹ z` for the stacked data, through the
/// determinant and inversion lemmas.
pub fn marginal_objective<T: Scalar>(obs: &[Observation<T>], priors: &[ScaledKernel<T>]) -> Result<T> {
    Ok(condition_observations(obs, priors)?.objective())
}

pub fn condition_observations<T: Scalar>(
    obs: &[Observation<T>],
    priors: &[ScaledKernel<T>],
) -> Result<Conditioned<T>> {
    let prior = PriorFactor::new(priors)?;
    let terms = obs
        .iter()
        .map(|o| WhitenedTerm::new(o, &prior))
        .collect::<Result<Vec<_>>>()?;
    condition(&terms, &prior)
}

/// The stacked regressor of a target node with `p` input modules and `m`
/// references: `[(I_p ⊗ 𝐑); G_θ (I_p ⊗ 𝐑)]` with `𝐑 = [R_1 ... R_m]`.
#[derive(Debug, Clone)]
pub struct StackedRegressor<T: Scalar> {
    n: usize,
    references: DMatrix<T>,
    outputs: Vec<DMatrix<T>>,
}

/// `𝐑 = [T_{N,n}(r_1) ... T_{N,n}(r_m)]`.
pub fn reference_matrix<T: Scalar>(blocks: &[ToeplitzOperator<T>]) -> Result<DMatrix<T>> {
    let first = blocks
        .first()
        .ok_or_else(|| NebError::InvalidArgument("at least one reference is required".into()))?;
    let (rows, n) = (first.rows(), first.cols());
    if blocks.iter().any(|b| b.rows() != rows || b.cols() != n) {
        return Err(NebError::DimensionMismatch("reference blocks differ in shape".into()));
    }
    let mut out = DMatrix::zeros(rows, n * blocks.len());
    for (l, b) in blocks.iter().enumerate() {
        out.columns_mut(l * n, n).copy_from(&b.to_matrix());
    }
    Ok(out)
}

/// Assembles the regressor from the lag-zero module responses `g_i`
/// (length `N` each) and the reference Toeplitz blocks.
pub fn build_regressor<T: Scalar>(g: &[Vec<T>], r_blocks: &[ToeplitzOperator<T>]) -> Result<StackedRegressor<T>> {
    if g.is_empty() {
        return Err(NebError::InvalidArgument("at least one module is required".into()));
    }
    let references = reference_matrix(r_blocks)?;
    let n = r_blocks[0].cols();
    if let Some(bad) = g.iter().find(|gi| gi.len() != references.nrows()) {
        return Err(NebError::DimensionMismatch(format!(
            "module response of length {} for N = {}",
            bad.len(),
            references.nrows()
        )));
    }
    let outputs = g.iter().map(|gi| convolve_columns(gi, &references)).collect();
    Ok(StackedRegressor {
        n,
        references,
        outputs,
    })
}

impl<T: Scalar> StackedRegressor<T> {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn samples(&self) -> usize {
        self.references.nrows()
    }

    pub fn modules(&self) -> usize {
        self.outputs.len()
    }

    pub fn references(&self) -> usize {
        self.references.ncols() / self.n
    }

    /// Width `m n` of one module's latent block.
    pub fn block_width(&self) -> usize {
        self.references.ncols()
    }

    /// `𝐑`.
    pub fn reference_block(&self) -> &DMatrix<T> {
        &self.references
    }

    /// `G_i 𝐑`.
    pub fn output_block(&self, i: usize) -> &DMatrix<T> {
        &self.outputs[i]
    }

    /// `[G_1 𝐑 ... G_p 𝐑]`.
    pub fn output_row(&self) -> DMatrix<T> {
        let w = self.block_width();
        let mut out = DMatrix::zeros(self.samples(), w * self.modules());
        for (i, b) in self.outputs.iter().enumerate() {
            out.columns_mut(i * w, w).copy_from(b);
        }
        out
    }

    /// Dense `(pN + N) x (p m n)` matrix.
    pub fn assembled(&self) -> DMatrix<T> {
        let (rows, w, p) = (self.samples(), self.block_width(), self.modules());
        let mut out = DMatrix::zeros(rows * (p + 1), w * p);
        for i in 0..p {
            out.view_mut((i * rows, i * w), (rows, w))
                .copy_from(&self.references);
        }
        out.view_mut((p * rows, 0), (rows, w * p))
            .copy_from(&self.output_row());
        out
    }

    /// Channels for the measured inputs `w̃_i` and the target output, with
    /// `sigmas = [σ_1², ..., σ_p², σ_j²]`.
    pub fn observations(&self, inputs: &[Vec<T>], output: &[T], sigmas: &[T]) -> Result<Vec<Observation<T>>> {
        let p = self.modules();
        if inputs.len() != p || sigmas.len() != p + 1 {
            return Err(NebError::DimensionMismatch(format!(
                "{} inputs and {} variances for {p} modules",
                inputs.len(),
                sigmas.len()
            )));
        }
        let w = self.block_width();
        let mut obs = Vec::with_capacity(p + 1);
        for (i, x) in inputs.iter().enumerate() {
            obs.push(Observation::new(
                DVector::from_column_slice(x),
                self.references.clone(),
                i * w,
                sigmas[i],
            )?);
        }
        obs.push(Observation::new(
            DVector::from_column_slice(output),
            self.output_row(),
            0,
            sigmas[p],
        )?);
        Ok(obs)
    }
}

/// The ECM state `η`: noise variances, kernel hyperparameters per latent
/// path and module parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParameterVector<T> {
    pub sigmas: Vec<T>,
    pub lambdas: Vec<T>,
    pub betas: Vec<T>,
    pub thetas: Vec<Vec<T>>,
}

impl<T: Scalar> HyperParameterVector<T> {
    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.sigmas.iter().find(|s| !(**s > T::zero()) || !s.is_finite()) {
            return Err(NebError::InvalidArgument(format!("noise variance {s} is not positive")));
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(**l > T::zero()) || !l.is_finite()) {
            return Err(NebError::InvalidArgument(format!("kernel scale {l} is not positive")));
        }
        if let Some(b) = self.betas.iter().find(|b| !(**b > T::zero() && **b < T::one())) {
            return Err(NebError::InvalidArgument(format!("kernel decay {b} outside (0, 1)")));
        }
        if self.lambdas.len() != self.betas.len() {
            return Err(NebError::DimensionMismatch("lambdas and betas differ in length".into()));
        }
        if self.thetas.iter().flatten().any(|t| !t.is_finite()) {
            return Err(NebError::InvalidArgument("module parameters must be finite".into()));
        }
        Ok(())
    }

    /// Flattened `[σ², λ, β, θ]`.
    pub fn to_vec(&self) -> Vec<T> {
        let mut v = Vec::new();
        v.extend_from_slice(&self.sigmas);
        v.extend_from_slice(&self.lambdas);
        v.extend_from_slice(&self.betas);
        for t in &self.thetas {
            v.extend_from_slice(t);
        }
        v
    }

    /// `‖η - other‖ / ‖other‖`.
    pub fn relative_change(&self, other: &Self) -> T {
        let a = self.to_vec();
        let b = other.to_vec();
        let num = a
            .iter()
            .zip(&b)
            .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
            .sqrt();
        let den = b.iter().fold(T::zero(), |acc, &y| acc + y * y).sqrt();
        if den > T::zero() {
            num / den
        } else {
            num
        }
    }

    pub fn priors(&self, n: usize) -> Result<Vec<ScaledKernel<T>>> {
        self.lambdas
            .iter()
            .zip(&self.betas)
            .map(|(&l, &b)| ScaledKernel::build(n, l, b))
            .collect()
    }
}
