//! NEB: empirical-Bayes identification of the modules into a target node
//! by ECM on the marginal likelihood, with sensitivity paths as Gaussian
//! latent variables under stable spline priors.

use nalgebra::{DMatrix, DVector};

use crate::baselines::{two_stage, TwoStageConfig};
use crate::error::{NebError, Result};
use crate::kernel::{analytic_log_det, precision_trace, PrecisionTraceData, ScaledKernel, BETA_MAX, BETA_MIN};
use crate::lti::{correlate, toeplitz, DuplicationMap};
use crate::network::Dataset;
use crate::optim::golden_section;
use crate::param::{minimize_theta, ModuleParametrization, QuadraticForm};
use crate::posterior::{
    build_regressor, condition_observations, reference_matrix, symmetrize, Conditioned, GaussianPosterior,
    HyperParameterVector, Observation, StackedRegressor,
};
use crate::rng::derive_seed;
use crate::scalar::Scalar;

/// Points in the β grid of the hyperparameter update.
pub const BETA_GRID: usize = 200;

/// Signals seen by the estimators for one target node `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkData<T: Scalar> {
    /// Measured inputs `w̃_i`, `i ∈ 𝒩_j`.
    pub inputs: Vec<Vec<T>>,
    /// `w̃_j - r_j`.
    pub output: Vec<T>,
    /// Active references `r_l`.
    pub references: Vec<Vec<T>>,
    /// Optional downstream sensor `w̃_x - r_x` driven only by `w_j`.
    pub downstream: Option<Vec<T>>,
}

impl<T: Scalar> NetworkData<T> {
    pub fn new(
        inputs: Vec<Vec<T>>,
        output: Vec<T>,
        references: Vec<Vec<T>>,
        downstream: Option<Vec<T>>,
    ) -> Result<Self> {
        let len = output.len();
        if len == 0 {
            return Err(NebError::InvalidArgument("empty output record".into()));
        }
        if inputs.is_empty() || references.is_empty() {
            return Err(NebError::InvalidArgument("need at least one input and one reference".into()));
        }
        let lengths_ok = inputs.iter().chain(&references).all(|x| x.len() == len)
            && downstream.as_ref().is_none_or(|z| z.len() == len);
        if !lengths_ok {
            return Err(NebError::DimensionMismatch("all records must have the same length".into()));
        }
        if let Some(l) = references.iter().position(|r| r.iter().all(|&v| v == T::zero())) {
            return Err(NebError::InvalidArgument(format!("reference {l} is identically zero")));
        }
        Ok(Self {
            inputs,
            output,
            references,
            downstream,
        })
    }

    /// Extracts the records for target node `target` with the given input
    /// nodes and references (zero-based node indices).
    pub fn from_dataset(
        ds: &Dataset<T>,
        target: usize,
        inputs: &[usize],
        references: &[usize],
        downstream: Option<usize>,
    ) -> Result<Self> {
        let nodes = ds.nodes();
        if target >= nodes || inputs.iter().chain(references).any(|&k| k >= nodes) {
            return Err(NebError::InvalidArgument("node index outside dataset".into()));
        }
        let minus_ref = |k: usize| -> Vec<T> {
            ds.measured(k)
                .iter()
                .zip(ds.reference(k))
                .map(|(&w, r)| w - r)
                .collect()
        };
        Self::new(
            inputs.iter().map(|&i| ds.measured(i)).collect(),
            minus_ref(target),
            references.iter().map(|&l| ds.reference(l)).collect(),
            downstream.map(minus_ref),
        )
    }

    pub fn samples(&self) -> usize {
        self.output.len()
    }
}

/// Model structure: sensitivity length `n` and one parametrization per
/// input module.
#[derive(Debug, Clone, PartialEq)]
pub struct NebStructure<T: Scalar> {
    pub n: usize,
    pub modules: Vec<ModuleParametrization<T>>,
}

impl<T: Scalar> NebStructure<T> {
    pub fn new(n: usize, modules: Vec<ModuleParametrization<T>>) -> Result<Self> {
        if n == 0 || modules.is_empty() {
            return Err(NebError::InvalidArgument("need n >= 1 and at least one module".into()));
        }
        Ok(Self { n, modules })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NebOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Seed for the randomized restarts of the θ update.
    pub seed: u64,
}

impl Default for NebOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 300,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NebEstimate<T: Scalar> {
    pub eta: HyperParameterVector<T>,
    /// Lag-zero impulse responses of the estimated modules, length `N`.
    pub g_hat: Vec<Vec<T>>,
    pub iterations: usize,
    /// Marginal objective `log det Σ_z + zᵀ Σ_z⁻¹ z` at every visited `η`.
    pub objective_trace: Vec<T>,
    pub converged: bool,
    /// Posterior mean of the stacked sensitivities at the final `η`.
    pub s_hat: DVector<T>,
}

/// Posterior moments used by the CM-steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T: Scalar> {
    pub s_hat: DVector<T>,
    pub p_hat: DMatrix<T>,
    /// `P̂ + ŝŝᵀ`.
    pub s2: DMatrix<T>,
}

pub fn estep_moments<T: Scalar>(post: &GaussianPosterior<T>) -> Moments<T> {
    Moments {
        s_hat: post.mean.clone(),
        p_hat: post.cov.clone(),
        s2: post.second_moment(),
    }
}

impl<T: Scalar> Moments<T> {
    /// Moments from a mean and covariance given separately.
    pub fn from_parts(s_hat: DVector<T>, p_hat: DMatrix<T>) -> Self {
        let s2 = symmetrize(&(&p_hat + &s_hat * s_hat.transpose()));
        Self { s_hat, p_hat, s2 }
    }
}

/// Precomputed data products shared by all iterations.
#[derive(Debug, Clone)]
pub(crate) struct Problem<'a, T: Scalar> {
    pub data: &'a NetworkData<T>,
    pub n: usize,
    pub len: usize,
    pub r: DMatrix<T>,
    pub rtr: DMatrix<T>,
    pub rt_inputs: Vec<DVector<T>>,
    pub input_energy: Vec<T>,
    pub output: DVector<T>,
    pub output_energy: T,
    dup: DuplicationMap,
}

impl<'a, T: Scalar> Problem<'a, T> {
    pub fn new(data: &'a NetworkData<T>, n: usize) -> Result<Self> {
        let len = data.samples();
        if n == 0 || n > len {
            return Err(NebError::InvalidArgument(format!(
                "sensitivity length {n} must be in 1..={len}"
            )));
        }
        let blocks = data
            .references
            .iter()
            .map(|r| toeplitz(r, n))
            .collect::<Result<Vec<_>>>()?;
        let r = reference_matrix(&blocks)?;
        let rtr = r.transpose() * &r;
        let rt_inputs = data
            .inputs
            .iter()
            .map(|w| r.tr_mul(&DVector::from_column_slice(w)))
            .collect();
        let input_energy = data
            .inputs
            .iter()
            .map(|w| w.iter().fold(T::zero(), |a, &v| a + v * v))
            .collect();
        let output = DVector::from_column_slice(&data.output);
        let output_energy = output.norm_squared();
        Ok(Self {
            data,
            n,
            len,
            r,
            rtr,
            rt_inputs,
            input_energy,
            output,
            output_energy,
            dup: crate::lti::duplication_matrix(len)?,
        })
    }

    pub fn p(&self) -> usize {
        self.data.inputs.len()
    }

    pub fn m(&self) -> usize {
        self.data.references.len()
    }

    /// Width `m n` of one module's latent block.
    pub fn width(&self) -> usize {
        self.m() * self.n
    }

    pub fn latent_dim(&self) -> usize {
        self.p() * self.width()
    }

    pub fn regressor(&self, params: &[ModuleParametrization<T>], thetas: &[Vec<T>]) -> Result<StackedRegressor<T>> {
        let g = params
            .iter()
            .zip(thetas)
            .map(|(p, th)| p.impulse(th, self.len))
            .collect::<Result<Vec<_>>>()?;
        let blocks = self
            .data
            .references
            .iter()
            .map(|r| toeplitz(r, self.n))
            .collect::<Result<Vec<_>>>()?;
        build_regressor(&g, &blocks)
    }

    pub fn observations(
        &self,
        params: &[ModuleParametrization<T>],
        eta: &HyperParameterVector<T>,
    ) -> Result<Vec<Observation<T>>> {
        self.regressor(params, &eta.thetas)?
            .observations(&self.data.inputs, &self.data.output, &eta.sigmas)
    }

    pub fn condition(&self, params: &[ModuleParametrization<T>], eta: &HyperParameterVector<T>) -> Result<Conditioned<T>> {
        self.check_eta(params, eta)?;
        let obs = self.observations(params, eta)?;
        condition_observations(&obs, &eta.priors(self.n)?)
    }

    pub fn check_eta(&self, params: &[ModuleParametrization<T>], eta: &HyperParameterVector<T>) -> Result<()> {
        eta.validate()?;
        let (p, m) = (self.p(), self.m());
        if params.len() != p || eta.thetas.len() != p || eta.sigmas.len() != p + 1 || eta.lambdas.len() != p * m {
            return Err(NebError::DimensionMismatch(format!(
                "η does not match {p} modules and {m} references"
            )));
        }
        Ok(())
    }

    /// `‖w̃_i - 𝐑 ŝ_i‖² + tr(𝐑 P_ii 𝐑ᵀ)`.
    pub fn input_residual(&self, i: usize, s_hat: &DVector<T>, s2: &DMatrix<T>) -> T {
        let w = self.width();
        let si = s_hat.rows(i * w, w);
        let sii = s2.view((i * w, i * w), (w, w));
        let cross = self.rt_inputs[i].dot(&si);
        let quad = self.rtr.component_mul(&sii).sum();
        self.input_energy[i] - (cross + cross) + quad
    }

    /// Quadratic form in the stacked module responses for
    /// `‖y - Σ_i G_i 𝐑 x_i‖²` averaged over a latent vector with first and
    /// second moments `(x̂, X̂)`: `yᵀy + gᵀ A g - 2 bᵀ g`.
    pub fn output_form(&self, x_hat: &DVector<T>, x2: &DMatrix<T>, y: &DVector<T>) -> Result<QuadraticForm<T>> {
        let (p, w, len) = (self.p(), self.width(), self.len);
        let mut a = DMatrix::zeros(p * len, p * len);
        let mut b = DVector::zeros(p * len);
        for i in 0..p {
            let rs: Vec<T> = (&self.r * x_hat.rows(i * w, w)).iter().copied().collect();
            b.rows_mut(i * len, len)
                .copy_from(&DVector::from_vec(correlate(&rs, y.as_slice(), len)));
            for k in i..p {
                let m = &self.r * x2.view((i * w, k * w), (w, w)) * self.r.transpose();
                let aik = self.dup.kron_congruence(&m)?;
                if k != i {
                    a.view_mut((k * len, i * len), (len, len))
                        .copy_from(&aik.transpose());
                }
                a.view_mut((i * len, k * len), (len, len)).copy_from(&aik);
            }
        }
        QuadraticForm::new(a, b, len)
    }
}

/// Splits `−2Q = Q₀(σ², θ) + Q_s(λ, β)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QValue<T> {
    pub q0: T,
    pub qs: T,
}

impl<T: Scalar> QValue<T> {
    pub fn total(&self) -> T {
        self.q0 + self.qs
    }
}

/// `log det(λK_β) + tr((λK_β)⁻¹ Ŝ)` through the closed forms.
pub fn kernel_term<T: Scalar>(lambda: T, beta: T, s: &DMatrix<T>) -> Result<T> {
    let n = s.nrows();
    Ok(analytic_log_det(beta, n) + T::count(n) * lambda.ln() + precision_trace(beta, s)? / lambda)
}

/// Evaluates `−2Q(η)` for the moments of the previous iterate.
pub fn q_function<T: Scalar>(
    eta: &HyperParameterVector<T>,
    moments: &Moments<T>,
    data: &NetworkData<T>,
    structure: &NebStructure<T>,
) -> Result<QValue<T>> {
    let prob = Problem::new(data, structure.n)?;
    q_function_with(&prob, eta, moments, &structure.modules)
}

pub(crate) fn q_function_with<T: Scalar>(
    prob: &Problem<'_, T>,
    eta: &HyperParameterVector<T>,
    moments: &Moments<T>,
    params: &[ModuleParametrization<T>],
) -> Result<QValue<T>> {
    prob.check_eta(params, eta)?;
    let len = T::count(prob.len);
    let p = prob.p();
    let mut q0 = T::zero();
    for i in 0..p {
        let s2 = eta.sigmas[i];
        q0 += len * s2.ln() + prob.input_residual(i, &moments.s_hat, &moments.s2) / s2;
    }
    let form = prob.output_form(&moments.s_hat, &moments.s2, &prob.output)?;
    let resid = prob.output_energy + form.objective(params, &eta.thetas)?;
    q0 += len * eta.sigmas[p].ln() + resid / eta.sigmas[p];
    let qs = kernel_terms(eta, &moments.s2, prob.n)?;
    Ok(QValue { q0, qs })
}

pub(crate) fn kernel_terms<T: Scalar>(eta: &HyperParameterVector<T>, s2: &DMatrix<T>, n: usize) -> Result<T> {
    let mut qs = T::zero();
    for (b, (&l, &be)) in eta.lambdas.iter().zip(&eta.betas).enumerate() {
        let block = s2.view((b * n, b * n), (n, n)).into_owned();
        qs += kernel_term(l, be, &block)?;
    }
    Ok(qs)
}

/// `(λ̂, β̂)` for one diagonal block `Ŝ` of the second moment.
pub fn update_hyperparameters<T: Scalar>(s: &DMatrix<T>) -> Result<(T, T)> {
    update_hyperparameters_from(s, None)
}

/// As [`update_hyperparameters`]; an incumbent β that beats the search
/// result is kept, so the CM-step does not increase `Q_s`.
///
/// β minimizes `log det K_β + n log tr(K_β⁻¹ Ŝ)` over a logit-spaced grid
/// on `[BETA_MIN, BETA_MAX]` refined by golden section; flat objectives
/// resolve to the smallest grid β. Then `λ̂ = tr(K_β̂⁻¹ Ŝ) / n`.
pub fn update_hyperparameters_from<T: Scalar>(s: &DMatrix<T>, incumbent: Option<T>) -> Result<(T, T)> {
    let data = PrecisionTraceData::new(s)?;
    if data.is_zero() {
        return Err(NebError::DegenerateMoment);
    }
    let n = data.n();
    let objective = |beta: T| analytic_log_det(beta, n) + T::count(n) * data.log_trace(beta);
    let logit = |b: f64| (b / (1.0 - b)).ln();
    let sigmoid = |u: T| T::one() / (T::one() + (-u).exp());
    let (lo, hi) = (logit(BETA_MIN), logit(BETA_MAX));
    let grid: Vec<T> = (0..BETA_GRID)
        .map(|k| T::lit(lo + (hi - lo) * k as f64 / (BETA_GRID - 1) as f64))
        .collect();
    let tie = |v: T| T::lit(1e-12) * v.abs().max(T::one());

    let mut best_k = 0;
    let mut best = objective(sigmoid(grid[0]));
    for (k, &u) in grid.iter().enumerate().skip(1) {
        let v = objective(sigmoid(u));
        if v.is_finite() && (!best.is_finite() || v < best - tie(best)) {
            best = v;
            best_k = k;
        }
    }
    if !best.is_finite() {
        return Err(NebError::DegenerateMoment);
    }
    let mut beta = sigmoid(grid[best_k]);
    let a = grid[best_k.saturating_sub(1)];
    let b = grid[(best_k + 1).min(BETA_GRID - 1)];
    let (u, v) = golden_section(|u| objective(sigmoid(u)), a, b, T::lit(1e-9), 200);
    if v < best - tie(best) {
        best = v;
        beta = sigmoid(u);
    }
    if let Some(b0) = incumbent.filter(|b| *b > T::zero() && *b < T::one()) {
        let v0 = objective(b0);
        if v0.is_finite() && v0 < best - tie(best) {
            beta = b0;
        }
    }
    let lambda = precision_trace(beta, s)? / T::count(n);
    if !(lambda > T::zero()) || !lambda.is_finite() {
        return Err(NebError::DegenerateMoment);
    }
    Ok((lambda, beta))
}

/// θ CM-step: minimizes `gᵀ Â g - 2 b̂ᵀ g` built from the moments.
pub fn update_theta<T: Scalar>(
    moments: &Moments<T>,
    data: &NetworkData<T>,
    structure: &NebStructure<T>,
    theta_prev: &[Vec<T>],
    seed: u64,
) -> Result<Vec<Vec<T>>> {
    let prob = Problem::new(data, structure.n)?;
    let form = prob.output_form(&moments.s_hat, &moments.s2, &prob.output)?;
    minimize_theta(&form, &structure.modules, theta_prev, seed)
}

/// Noise-variance CM-step `[σ_1², ..., σ_p², σ_j²]` at the given θ.
pub fn update_noise_variances<T: Scalar>(
    moments: &Moments<T>,
    data: &NetworkData<T>,
    structure: &NebStructure<T>,
    thetas: &[Vec<T>],
) -> Result<Vec<T>> {
    let prob = Problem::new(data, structure.n)?;
    noise_variances_with(&prob, moments, &structure.modules, thetas)
}

pub(crate) fn noise_variances_with<T: Scalar>(
    prob: &Problem<'_, T>,
    moments: &Moments<T>,
    params: &[ModuleParametrization<T>],
    thetas: &[Vec<T>],
) -> Result<Vec<T>> {
    let len = T::count(prob.len);
    let mut out: Vec<T> = (0..prob.p())
        .map(|i| (prob.input_residual(i, &moments.s_hat, &moments.s2) / len).max(T::zero()))
        .collect();
    let form = prob.output_form(&moments.s_hat, &moments.s2, &prob.output)?;
    let resid = prob.output_energy + form.objective(params, thetas)?;
    out.push((resid / len).max(T::zero()));
    Ok(out)
}

/// Keeps a variance away from zero so the next posterior stays defined.
pub(crate) fn floor_variance<T: Scalar>(v: T, energy: T, len: usize) -> T {
    let floor = (T::lit(1e-12) * energy / T::count(len)).max(T::lit(1e-300));
    v.max(floor)
}

/// Empirical-Bayes FIR fit of `y = X x + e` where `x` stacks `blocks`
/// impulse responses of length `n`, each with its own stable spline prior.
#[derive(Debug, Clone)]
pub struct FirEbFit<T: Scalar> {
    pub mean: DVector<T>,
    pub lambdas: Vec<T>,
    pub betas: Vec<T>,
    pub sigma: T,
    pub objective: T,
}

/// Coarse marginal-likelihood grid over a common `(λ, β)`, followed by
/// `sweeps` EM iterations updating each block's `(λ, β)` and, when `sigma`
/// is `None`, the noise variance.
pub fn fit_fir_eb<T: Scalar>(
    design: &DMatrix<T>,
    y: &DVector<T>,
    n: usize,
    sigma: Option<T>,
    sweeps: usize,
) -> Result<FirEbFit<T>> {
    let (len, cols) = design.shape();
    if n == 0 || cols % n != 0 || cols == 0 || y.len() != len {
        return Err(NebError::DimensionMismatch(format!(
            "design {len}x{cols} incompatible with block length {n} and {} samples",
            y.len()
        )));
    }
    let blocks = cols / n;
    let svd = design.clone().svd(true, true);
    let alpha = svd
        .solve(y, T::lit(1e-10) * svd.singular_values.amax())
        .map_err(|e| NebError::IllConditioned(e.to_string()))?;
    let rank = svd.rank(T::lit(1e-10) * svd.singular_values.amax());
    if rank == 0 {
        return Err(NebError::RankDeficient("FIR regressor is zero".into()));
    }
    let resid = (y - design * &alpha).norm_squared();
    let dof = if len > rank { len - rank } else { len };
    let energy = y.norm_squared();
    let mut sig = sigma.unwrap_or_else(|| resid / T::count(dof));
    sig = floor_variance(sig, energy, len);
    if !(sig > T::zero()) {
        return Err(NebError::DegenerateMoment);
    }

    let evaluate = |lambdas: &[T], betas: &[T], s: T| -> Result<Conditioned<T>> {
        let priors = lambdas
            .iter()
            .zip(betas)
            .map(|(&l, &b)| ScaledKernel::build(n, l, b))
            .collect::<Result<Vec<_>>>()?;
        let obs = [Observation::new(y.clone(), design.clone(), 0, s)?];
        condition_observations(&obs, &priors)
    };

    let mut best: Option<(T, T, Conditioned<T>)> = None;
    for kb in 0..12 {
        let u = -2.2 + (5.3 + 2.2) * kb as f64 / 11.0;
        let beta = T::lit(1.0 / (1.0 + (-u).exp()));
        let mut lref = T::zero();
        for b in 0..blocks {
            let ab = alpha.rows(b * n, n);
            lref += precision_trace(beta, &(ab * ab.transpose()))? / T::count(n * blocks);
        }
        if !(lref > T::zero()) || !lref.is_finite() {
            continue;
        }
        for kl in 0..9 {
            let lambda = lref * T::lit(10f64.powf(-2.0 + 0.5 * kl as f64));
            let Ok(cond) = evaluate(&vec![lambda; blocks], &vec![beta; blocks], sig) else {
                continue;
            };
            if best.as_ref().is_none_or(|(_, _, c)| cond.objective() < c.objective()) {
                best = Some((lambda, beta, cond));
            }
        }
    }
    let (l0, b0, mut cond) = best.ok_or_else(|| NebError::IllConditioned("no admissible grid point".into()))?;
    let mut lambdas = vec![l0; blocks];
    let mut betas = vec![b0; blocks];
    for _ in 0..sweeps {
        let post = cond.posterior();
        let s2 = post.second_moment();
        for b in 0..blocks {
            let block = s2.view((b * n, b * n), (n, n)).into_owned();
            let (l, be) = update_hyperparameters_from(&block, Some(betas[b]))?;
            lambdas[b] = l;
            betas[b] = be;
        }
        if sigma.is_none() {
            let r = y - design * &post.mean;
            let tr = (design * &post.cov).component_mul(design).sum();
            sig = floor_variance((r.norm_squared() + tr) / T::count(len), energy, len);
        }
        cond = evaluate(&lambdas, &betas, sig)?;
    }
    Ok(FirEbFit {
        mean: cond.mean(),
        lambdas,
        betas,
        sigma: sig,
        objective: cond.objective(),
    })
}

/// Posterior of the stacked sensitivities at `η`; its
/// [`Conditioned::objective`] is the marginal objective.
pub fn neb_posterior<T: Scalar>(
    data: &NetworkData<T>,
    structure: &NebStructure<T>,
    eta: &HyperParameterVector<T>,
) -> Result<Conditioned<T>> {
    let prob = Problem::new(data, structure.n)?;
    prob.condition(&structure.modules, eta)
}

/// Initial `η`: θ and noise variances from the two-stage method, kernel
/// hyperparameters per input channel from a marginal-likelihood grid fit of
/// the sensitivities on `w̃_i` alone.
pub fn initialize<T: Scalar>(data: &NetworkData<T>, structure: &NebStructure<T>, seed: u64) -> Result<HyperParameterVector<T>> {
    let prob = Problem::new(data, structure.n)?;
    let ts = two_stage(
        data,
        &TwoStageConfig {
            n: structure.n,
            modules: structure.modules.clone(),
        },
        seed,
    )?;
    let mut lambdas = Vec::new();
    let mut betas = Vec::new();
    for (i, w) in data.inputs.iter().enumerate() {
        let fit = fit_fir_eb(
            &prob.r,
            &DVector::from_column_slice(w),
            structure.n,
            Some(ts.input_variances[i]),
            0,
        )?;
        lambdas.extend(fit.lambdas);
        betas.extend(fit.betas);
    }
    let mut sigmas = ts.input_variances.clone();
    sigmas.push(ts.output_variance);
    for (k, s) in sigmas.iter_mut().enumerate() {
        let energy = if k < prob.p() {
            prob.input_energy[k]
        } else {
            prob.output_energy
        };
        *s = floor_variance(*s, energy, prob.len);
    }
    let eta = HyperParameterVector {
        sigmas,
        lambdas,
        betas,
        thetas: ts.thetas,
    };
    eta.validate()?;
    Ok(eta)
}

/// Runs NEB from the two-stage initialization.
pub fn neb_identify<T: Scalar>(
    data: &NetworkData<T>,
    structure: &NebStructure<T>,
    options: &NebOptions,
) -> Result<NebEstimate<T>> {
    let eta0 = initialize(data, structure, derive_seed(options.seed, u64::MAX))?;
    neb_identify_from(data, structure, eta0, options)
}

/// Runs the ECM iteration from a given `η⁰`.
pub fn neb_identify_from<T: Scalar>(
    data: &NetworkData<T>,
    structure: &NebStructure<T>,
    eta0: HyperParameterVector<T>,
    options: &NebOptions,
) -> Result<NebEstimate<T>> {
    let prob = Problem::new(data, structure.n)?;
    let params = &structure.modules;
    prob.check_eta(params, &eta0)?;
    let mut eta = eta0;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut cond = prob.condition(params, &eta)?;
    let tol = T::lit(options.tol);

    for k in 0..options.max_iter {
        iterations = k + 1;
        let step = || -> Result<HyperParameterVector<T>> {
            let moments = estep_moments(&cond.posterior());
            let mut next = eta.clone();
            let n = prob.n;
            for b in 0..eta.lambdas.len() {
                let block = moments.s2.view((b * n, b * n), (n, n)).into_owned();
                let (l, be) = update_hyperparameters_from(&block, Some(eta.betas[b]))?;
                next.lambdas[b] = l;
                next.betas[b] = be;
            }
            let form = prob.output_form(&moments.s_hat, &moments.s2, &prob.output)?;
            next.thetas = minimize_theta(&form, params, &eta.thetas, derive_seed(options.seed, k as u64))?;
            let sig = noise_variances_with(&prob, &moments, params, &next.thetas)?;
            for (i, s) in sig.into_iter().enumerate() {
                let energy = if i < prob.p() {
                    prob.input_energy[i]
                } else {
                    prob.output_energy
                };
                next.sigmas[i] = floor_variance(s, energy, prob.len);
            }
            Ok(next)
        };
        trace.push(cond.objective());
        let next = step().map_err(|e| e.at_iteration(k))?;
        let change = next.relative_change(&eta);
        eta = next;
        cond = prob.condition(params, &eta).map_err(|e| e.at_iteration(k))?;
        if change < tol {
            converged = true;
            break;
        }
    }
    trace.push(cond.objective());
    let g_hat = params
        .iter()
        .zip(&eta.thetas)
        .map(|(p, th)| p.impulse(th, prob.len))
        .collect::<Result<Vec<_>>>()?;
    Ok(NebEstimate {
        s_hat: cond.mean(),
        eta,
        g_hat,
        iterations,
        objective_trace: trace,
        converged,
    })
}
