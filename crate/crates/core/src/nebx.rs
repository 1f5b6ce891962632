//! NEBX: NEB extended with one downstream sensor `w̃_x = F(q) w_j + e_x`.
//!
//! The path `f` of `F` is a second latent impulse response, so the joint
//! posterior of `(s, f)` is no longer Gaussian. The E-step uses a Gibbs
//! sampler alternating the two Gaussian full conditionals. The downstream
//! channel is modelled through `v_il = f * s_il` truncated to `n` samples,
//! so `z_f = Σ_i G_i 𝐑 v_i + e_x` and `W_f = T_{N,n}(Σ_i G_i 𝐑 s_i)`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{NebError, Result};
use crate::kernel::ScaledKernel;
use crate::lti::{convolve_truncated, toeplitz_matrix};
use crate::neb::{
    fit_fir_eb, floor_variance, kernel_terms, neb_identify, update_hyperparameters_from, Moments, NebEstimate,
    NebOptions, NebStructure, NetworkData, Problem,
};
use crate::param::{minimize_theta, QuadraticForm};
use crate::posterior::{condition, symmetrize, Conditioned, GaussianPosterior, HyperParameterVector, PriorFactor, WhitenedTerm};
use crate::rng::derive_seed;
use crate::scalar::Scalar;

/// Retained samples kept for the `v = f * s` audit.
const AUDIT_SAMPLES: usize = 8;

/// Which conditionals the sampler draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GibbsMode {
    Full,
    /// `f` stays at its initial value; only `s` is sampled.
    FreezeF,
    /// `s` stays at its initial value; only `f` is sampled.
    FreezeS,
}

/// The NEBX model at a fixed `η`.
///
/// `η` layout: `sigmas = [σ_1², ..., σ_p², σ_j², σ_x²]`, `lambdas`/`betas`
/// hold the `p m` sensitivity priors followed by the prior of `f`.
#[derive(Debug, Clone)]
pub struct NebxModel<'a, T: Scalar> {
    prob: Problem<'a, T>,
    eta: HyperParameterVector<T>,
    z_f: DVector<T>,
    x_out: DMatrix<T>,
    prior_s: PriorFactor<T>,
    prior_f: PriorFactor<T>,
    base: Vec<WhitenedTerm<T>>,
}

impl<'a, T: Scalar> NebxModel<'a, T> {
    pub fn new(data: &'a NetworkData<T>, structure: &NebStructure<T>, eta: HyperParameterVector<T>) -> Result<Self> {
        let z = data
            .downstream
            .as_ref()
            .ok_or_else(|| NebError::InvalidArgument("NEBX needs a downstream sensor".into()))?;
        let prob = Problem::new(data, structure.n)?;
        let (p, m, n) = (prob.p(), prob.m(), prob.n);
        eta.validate()?;
        if structure.modules.len() != p
            || eta.thetas.len() != p
            || eta.sigmas.len() != p + 2
            || eta.lambdas.len() != p * m + 1
        {
            return Err(NebError::DimensionMismatch(format!(
                "NEBX η does not match {p} modules and {m} references"
            )));
        }
        let reg = prob.regressor(&structure.modules, &eta.thetas)?;
        let x_out = reg.output_row();
        let z_f = DVector::from_column_slice(z);
        let priors: Vec<ScaledKernel<T>> = eta
            .lambdas
            .iter()
            .zip(&eta.betas)
            .map(|(&l, &b)| ScaledKernel::build(n, l, b))
            .collect::<Result<_>>()?;
        let prior_s = PriorFactor::new(&priors[..p * m])?;
        let prior_f = PriorFactor::new(&priors[p * m..])?;
        let obs = reg.observations(&data.inputs, &data.output, &eta.sigmas[..=p])?;
        let base = obs
            .iter()
            .map(|o| WhitenedTerm::new(o, &prior_s))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            prob,
            eta,
            z_f,
            x_out,
            prior_s,
            prior_f,
            base,
        })
    }

    pub fn eta(&self) -> &HyperParameterVector<T> {
        &self.eta
    }

    pub fn s_dim(&self) -> usize {
        self.prob.latent_dim()
    }

    pub fn n(&self) -> usize {
        self.prob.n
    }

    fn sigma_x(&self) -> T {
        self.eta.sigmas[self.prob.p() + 1]
    }

    /// `v`: every length-`n` block of `s` convolved with `f`, truncated.
    pub fn v_of(&self, s: &DVector<T>, f: &DVector<T>) -> DVector<T> {
        let n = self.prob.n;
        let mut v = DVector::zeros(s.len());
        for b in 0..s.len() / n {
            let sb: Vec<T> = s.rows(b * n, n).iter().copied().collect();
            let vb = convolve_truncated(f.as_slice(), &sb, n);
            v.rows_mut(b * n, n).copy_from(&DVector::from_vec(vb));
        }
        v
    }

    /// Conditioning of `s` given `f` in factored form.
    pub fn conditioned_s(&self, f: &DVector<T>) -> Result<Conditioned<T>> {
        let n = self.prob.n;
        if f.len() != n {
            return Err(NebError::DimensionMismatch(format!("f has {} entries, expected {n}", f.len())));
        }
        let tf = toeplitz_matrix(f.as_slice(), n);
        let d = self.s_dim();
        let inv = T::one() / self.sigma_x();
        // X_out blockdiag(T_n(f) L_b), then its gram.
        let mut xe = DMatrix::zeros(self.x_out.nrows(), d);
        for (b, l) in self.prior_s.blocks().iter().enumerate() {
            let xt = self.x_out.columns(b * n, n) * &tf;
            xe.columns_mut(b * n, n).copy_from(&(xt * l));
        }
        let gram = (xe.transpose() * &xe) * inv;
        let rhs = xe.tr_mul(&self.z_f) * inv;
        let term = WhitenedTerm {
            offset: 0,
            gram: symmetrize(&gram),
            rhs,
            energy: self.z_f.norm_squared() * inv,
            log_det: T::count(self.z_f.len()) * self.sigma_x().ln(),
        };
        let mut terms = self.base.clone();
        terms.push(term);
        condition(&terms, &self.prior_s)
    }

    /// Conditioning of `f` given `s` in factored form.
    pub fn conditioned_f(&self, s: &DVector<T>) -> Result<Conditioned<T>> {
        if s.len() != self.s_dim() {
            return Err(NebError::DimensionMismatch(format!(
                "s has {} entries, expected {}",
                s.len(),
                self.s_dim()
            )));
        }
        let u: Vec<T> = (&self.x_out * s).iter().copied().collect();
        let w = toeplitz_matrix(&u, self.prob.n);
        let wl = &w * &self.prior_f.blocks()[0];
        let term = WhitenedTerm::from_whitened_design(&wl, &self.z_f, 0, self.sigma_x());
        condition(&[term], &self.prior_f)
    }
}

/// `p(s | f, z)`.
pub fn conditional_s<T: Scalar>(f: &DVector<T>, model: &NebxModel<'_, T>) -> Result<GaussianPosterior<T>> {
    Ok(model.conditioned_s(f)?.posterior())
}

/// `p(f | s, z)`.
pub fn conditional_f<T: Scalar>(s: &DVector<T>, model: &NebxModel<'_, T>) -> Result<GaussianPosterior<T>> {
    Ok(model.conditioned_f(s)?.posterior())
}

/// Running mean and (population) covariance.
#[derive(Debug, Clone)]
struct RunningMoments<T: Scalar> {
    count: usize,
    mean: DVector<T>,
    comoment: DMatrix<T>,
}

impl<T: Scalar> RunningMoments<T> {
    fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: DVector::zeros(dim),
            comoment: DMatrix::zeros(dim, dim),
        }
    }

    fn push(&mut self, x: &DVector<T>) {
        self.count += 1;
        let delta = x - &self.mean;
        self.mean += &delta / T::count(self.count);
        let after = x - &self.mean;
        self.comoment.ger(T::one(), &delta, &after, T::one());
    }

    fn covariance(&self) -> DMatrix<T> {
        symmetrize(&(&self.comoment / T::count(self.count.max(1))))
    }
}

/// Sample moments of one chain (covariances with divisor `M`, so that
/// `s̄ s̄ᵀ + P_s` is the sample second moment).
#[derive(Debug, Clone)]
pub struct GibbsStats<T: Scalar> {
    pub s_bar: DVector<T>,
    pub f_bar: DVector<T>,
    pub v_bar: DVector<T>,
    pub p_s: DMatrix<T>,
    pub p_f: DMatrix<T>,
    pub p_v: DMatrix<T>,
    pub m: usize,
    pub m0: usize,
    pub seed: u64,
    /// A few retained `(s, f, v)` triples for auditing.
    pub audit: Vec<(DVector<T>, DVector<T>, DVector<T>)>,
    /// Retained `s` draws, kept only when requested.
    pub s_samples: Vec<DVector<T>>,
}

impl<T: Scalar> GibbsStats<T> {
    pub fn s_moments(&self) -> Moments<T> {
        Moments::from_parts(self.s_bar.clone(), self.p_s.clone())
    }

    pub fn f_moments(&self) -> Moments<T> {
        Moments::from_parts(self.f_bar.clone(), self.p_f.clone())
    }

    pub fn v_moments(&self) -> Moments<T> {
        Moments::from_parts(self.v_bar.clone(), self.p_v.clone())
    }
}

/// Chain settings.
#[derive(Debug, Clone)]
pub struct GibbsConfig<T: Scalar> {
    pub m: usize,
    pub m0: usize,
    pub seed: u64,
    pub mode: GibbsMode,
    pub s0: DVector<T>,
    pub f0: DVector<T>,
    pub keep_samples: bool,
}

/// Runs the Gibbs sampler: `s_k ~ p(s | f_{k-1}, z)`, `f_k ~ p(f | s_k, z)`,
/// discarding the first `m0` sweeps. Deterministic given the seed.
pub fn gibbs_sample<T: Scalar>(model: &NebxModel<'_, T>, config: &GibbsConfig<T>) -> Result<GibbsStats<T>> {
    if config.m < 2 {
        return Err(NebError::InvalidArgument("need at least two retained samples".into()));
    }
    let (d, n) = (model.s_dim(), model.n());
    if config.s0.len() != d || config.f0.len() != n {
        return Err(NebError::DimensionMismatch("chain start has wrong dimensions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut audit_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1));
    let audit_at: Vec<usize> = (0..AUDIT_SAMPLES)
        .map(|_| audit_rng.random_range(0..config.m))
        .collect();

    let mut s = config.s0.clone();
    let mut f = config.f0.clone();
    let frozen_s = match config.mode {
        GibbsMode::FreezeF => Some(model.conditioned_s(&f)?),
        _ => None,
    };
    let frozen_f = match config.mode {
        GibbsMode::FreezeS => Some(model.conditioned_f(&s)?),
        _ => None,
    };
    let mut ms = RunningMoments::new(d);
    let mut mf = RunningMoments::new(n);
    let mut mv = RunningMoments::new(d);
    let mut audit = Vec::new();
    let mut s_samples = Vec::new();

    for k in 0..config.m0 + config.m {
        let draw = |rng: &mut ChaCha8Rng, s: &mut DVector<T>, f: &mut DVector<T>| -> Result<()> {
            match config.mode {
                GibbsMode::Full => {
                    *s = model.conditioned_s(f)?.sample(rng);
                    *f = model.conditioned_f(s)?.sample(rng);
                }
                GibbsMode::FreezeF => {
                    *s = frozen_s.as_ref().expect("frozen conditional").sample(rng);
                }
                GibbsMode::FreezeS => {
                    *f = frozen_f.as_ref().expect("frozen conditional").sample(rng);
                }
            }
            Ok(())
        };
        draw(&mut rng, &mut s, &mut f).map_err(|e| e.at_chain_position(k))?;
        if k < config.m0 {
            continue;
        }
        let v = model.v_of(&s, &f);
        ms.push(&s);
        mf.push(&f);
        mv.push(&v);
        let idx = k - config.m0;
        if audit_at.contains(&idx) && audit.len() < AUDIT_SAMPLES {
            audit.push((s.clone(), f.clone(), v.clone()));
        }
        if config.keep_samples {
            s_samples.push(s.clone());
        }
    }
    Ok(GibbsStats {
        p_s: ms.covariance(),
        p_f: mf.covariance(),
        p_v: mv.covariance(),
        s_bar: ms.mean,
        f_bar: mf.mean,
        v_bar: mv.mean,
        m: config.m,
        m0: config.m0,
        seed: config.seed,
        audit,
        s_samples,
    })
}

/// Sampled `−2Q(η)`: prior terms for `s` and `f`, the input channels and
/// the output channel from the `s` moments, and the downstream channel from
/// the `v` moments.
pub fn nebx_q<T: Scalar>(
    stats: &GibbsStats<T>,
    eta: &HyperParameterVector<T>,
    data: &NetworkData<T>,
    structure: &NebStructure<T>,
) -> Result<T> {
    let prob = Problem::new(data, structure.n)?;
    let z = downstream(data)?;
    let (p, m, n) = (prob.p(), prob.m(), prob.n);
    if eta.sigmas.len() != p + 2 || eta.lambdas.len() != p * m + 1 {
        return Err(NebError::DimensionMismatch("NEBX η layout".into()));
    }
    let ms = stats.s_moments();
    let mf = stats.f_moments();
    let mv = stats.v_moments();
    let s_eta = HyperParameterVector {
        sigmas: Vec::new(),
        lambdas: eta.lambdas[..p * m].to_vec(),
        betas: eta.betas[..p * m].to_vec(),
        thetas: Vec::new(),
    };
    let f_eta = HyperParameterVector {
        sigmas: Vec::new(),
        lambdas: vec![eta.lambdas[p * m]],
        betas: vec![eta.betas[p * m]],
        thetas: Vec::new(),
    };
    let mut total = kernel_terms(&s_eta, &ms.s2, n)? + kernel_terms(&f_eta, &mf.s2, n)?;
    let len = T::count(prob.len);
    for i in 0..p {
        let s2 = eta.sigmas[i];
        total += len * s2.ln() + prob.input_residual(i, &ms.s_hat, &ms.s2) / s2;
    }
    let params = &structure.modules;
    let form_s = prob.output_form(&ms.s_hat, &ms.s2, &prob.output)?;
    let out = prob.output_energy + form_s.objective(params, &eta.thetas)?;
    total += len * eta.sigmas[p].ln() + out / eta.sigmas[p];
    let form_v = prob.output_form(&mv.s_hat, &mv.s2, &z)?;
    let down = z.norm_squared() + form_v.objective(params, &eta.thetas)?;
    total += len * eta.sigmas[p + 1].ln() + down / eta.sigmas[p + 1];
    Ok(total)
}

fn downstream<T: Scalar>(data: &NetworkData<T>) -> Result<DVector<T>> {
    data.downstream
        .as_ref()
        .map(|z| DVector::from_column_slice(z))
        .ok_or_else(|| NebError::InvalidArgument("NEBX needs a downstream sensor".into()))
}

/// θ CM-step: minimizes `J_s/σ_j² + J_v/σ_x²`.
pub fn nebx_update_theta<T: Scalar>(
    stats: &GibbsStats<T>,
    sigmas: &[T],
    data: &NetworkData<T>,
    structure: &NebStructure<T>,
    theta_prev: &[Vec<T>],
    seed: u64,
) -> Result<Vec<Vec<T>>> {
    let prob = Problem::new(data, structure.n)?;
    let p = prob.p();
    if sigmas.len() != p + 2 {
        return Err(NebError::DimensionMismatch("NEBX needs p + 2 variances".into()));
    }
    let z = downstream(data)?;
    let ms = stats.s_moments();
    let mv = stats.v_moments();
    let form_s = prob.output_form(&ms.s_hat, &ms.s2, &prob.output)?;
    let form_v = prob.output_form(&mv.s_hat, &mv.s2, &z)?;
    let form = QuadraticForm::combine(&[
        (T::one() / sigmas[p], &form_s),
        (T::one() / sigmas[p + 1], &form_v),
    ])?;
    minimize_theta(&form, &structure.modules, theta_prev, seed)
}

/// Noise-variance CM-step `[σ_1², ..., σ_p², σ_j², σ_x²]`.
pub fn nebx_update_variances<T: Scalar>(
    stats: &GibbsStats<T>,
    thetas: &[Vec<T>],
    data: &NetworkData<T>,
    structure: &NebStructure<T>,
) -> Result<Vec<T>> {
    let prob = Problem::new(data, structure.n)?;
    let z = downstream(data)?;
    let len = T::count(prob.len);
    let ms = stats.s_moments();
    let mv = stats.v_moments();
    let params = &structure.modules;
    let mut out: Vec<T> = (0..prob.p())
        .map(|i| (prob.input_residual(i, &ms.s_hat, &ms.s2) / len).max(T::zero()))
        .collect();
    let form_s = prob.output_form(&ms.s_hat, &ms.s2, &prob.output)?;
    out.push(((prob.output_energy + form_s.objective(params, thetas)?) / len).max(T::zero()));
    let form_v = prob.output_form(&mv.s_hat, &mv.s2, &z)?;
    out.push(((z.norm_squared() + form_v.objective(params, thetas)?) / len).max(T::zero()));
    Ok(out)
}

/// Chib-style estimate of `log det Σ_z + zᵀ Σ_z⁻¹ z` (no `2π` terms) at the
/// model's `η`, evaluated at `f* = f̄` from a chain that kept its `s` draws:
/// `−2 [log p(z | f*) + log p(f*) − log p̂(f* | z)]` with the last density
/// Rao-Blackwellized over the draws.
pub fn chib_objective<T: Scalar>(model: &NebxModel<'_, T>, stats: &GibbsStats<T>) -> Result<T> {
    if stats.s_samples.is_empty() {
        return Err(NebError::InvalidArgument("chain did not keep its samples".into()));
    }
    let f_star = &stats.f_bar;
    let given_f = model.conditioned_s(f_star)?.objective();
    let prior = &model.prior_f;
    let w = prior.solve(f_star)?;
    let prior_term = prior.log_det() + w.norm_squared();
    let mut terms = Vec::with_capacity(stats.s_samples.len());
    for s in &stats.s_samples {
        terms.push(-model.conditioned_f(s)?.neg2_log_density(f_star)? * T::lit(0.5));
    }
    let log_mean = crate::kernel::log_sum_exp(&terms) - T::count(terms.len()).ln();
    Ok(given_f + prior_term + log_mean * T::lit(2.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NebxOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Retained samples per chain.
    pub m: usize,
    /// Burn-in per chain.
    pub m0: usize,
    pub seed: u64,
    /// Options of the NEB run used for initialization.
    pub neb: NebOptions,
    /// Record the Chib estimate of the marginal objective each iteration.
    pub track_objective: bool,
}

impl Default for NebxOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 50,
            m: 500,
            m0: 100,
            seed: 0,
            neb: NebOptions::default(),
            track_objective: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NebxEstimate<T: Scalar> {
    pub estimate: NebEstimate<T>,
    /// Posterior mean of the downstream path at the last iteration.
    pub f_hat: DVector<T>,
    /// The NEB run used for initialization.
    pub neb: NebEstimate<T>,
}

/// Initial NEBX `η` and `f⁰` from a NEB estimate: `f` is fitted by
/// empirical Bayes from the simulated target signal `Σ_i G_i 𝐑 ŝ_i` to the
/// downstream measurement.
pub fn nebx_initialize<T: Scalar>(
    data: &NetworkData<T>,
    structure: &NebStructure<T>,
    neb: &NebEstimate<T>,
) -> Result<(HyperParameterVector<T>, DVector<T>)> {
    let prob = Problem::new(data, structure.n)?;
    let z = downstream(data)?;
    let reg = prob.regressor(&structure.modules, &neb.eta.thetas)?;
    let w_j: Vec<T> = (reg.output_row() * &neb.s_hat).iter().copied().collect();
    let design = toeplitz_matrix(&w_j, structure.n);
    let fit = fit_fir_eb(&design, &z, structure.n, None, 20)?;
    let mut eta = neb.eta.clone();
    eta.sigmas.push(fit.sigma);
    eta.lambdas.push(fit.lambdas[0]);
    eta.betas.push(fit.betas[0]);
    eta.validate()?;
    Ok((eta, fit.mean))
}

/// Runs NEB, then the NEBX ECM iteration with a Gibbs E-step.
pub fn nebx_identify<T: Scalar>(
    data: &NetworkData<T>,
    structure: &NebStructure<T>,
    options: &NebxOptions,
) -> Result<NebxEstimate<T>> {
    let neb = neb_identify(data, structure, &options.neb)?;
    nebx_identify_after(data, structure, neb, options)
}

/// [`nebx_identify`] starting from an existing NEB estimate.
pub fn nebx_identify_after<T: Scalar>(
    data: &NetworkData<T>,
    structure: &NebStructure<T>,
    neb: NebEstimate<T>,
    options: &NebxOptions,
) -> Result<NebxEstimate<T>> {
    let (eta0, f0) = nebx_initialize(data, structure, &neb)?;
    let s0 = neb.s_hat.clone();
    let estimate = nebx_identify_from(data, structure, eta0, s0, f0, options)?;
    Ok(NebxEstimate {
        estimate: estimate.0,
        f_hat: estimate.1,
        neb,
    })
}

/// The NEBX ECM loop from a given `η⁰` and chain start `(s⁰, f⁰)`.
pub fn nebx_identify_from<T: Scalar>(
    data: &NetworkData<T>,
    structure: &NebStructure<T>,
    eta0: HyperParameterVector<T>,
    s0: DVector<T>,
    f0: DVector<T>,
    options: &NebxOptions,
) -> Result<(NebEstimate<T>, DVector<T>)> {
    let prob = Problem::new(data, structure.n)?;
    let z_energy = downstream(data)?.norm_squared();
    let (p, n) = (prob.p(), prob.n);
    let mut eta = eta0;
    let (mut s, mut f) = (s0, f0);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let tol = T::lit(options.tol);

    for k in 0..options.max_iter {
        iterations = k + 1;
        let step = || -> Result<(HyperParameterVector<T>, GibbsStats<T>, Option<T>)> {
            let model = NebxModel::new(data, structure, eta.clone())?;
            let stats = gibbs_sample(
                &model,
                &GibbsConfig {
                    m: options.m,
                    m0: options.m0,
                    seed: derive_seed(options.seed, k as u64),
                    mode: GibbsMode::Full,
                    s0: s.clone(),
                    f0: f.clone(),
                    keep_samples: options.track_objective,
                },
            )?;
            let objective = if options.track_objective {
                Some(chib_objective(&model, &stats)?)
            } else {
                None
            };
            let mut next = eta.clone();
            let s2 = stats.s_moments().s2;
            for b in 0..eta.lambdas.len() - 1 {
                let block = s2.view((b * n, b * n), (n, n)).into_owned();
                let (l, be) = update_hyperparameters_from(&block, Some(eta.betas[b]))?;
                next.lambdas[b] = l;
                next.betas[b] = be;
            }
            let last = eta.lambdas.len() - 1;
            let (l, be) = update_hyperparameters_from(&stats.f_moments().s2, Some(eta.betas[last]))?;
            next.lambdas[last] = l;
            next.betas[last] = be;
            next.thetas = nebx_update_theta(
                &stats,
                &eta.sigmas,
                data,
                structure,
                &eta.thetas,
                derive_seed(options.seed ^ 0x5eed, k as u64),
            )?;
            let sig = nebx_update_variances(&stats, &next.thetas, data, structure)?;
            for (i, v) in sig.into_iter().enumerate() {
                let energy = if i < p {
                    prob.input_energy[i]
                } else if i == p {
                    prob.output_energy
                } else {
                    z_energy
                };
                next.sigmas[i] = floor_variance(v, energy, prob.len);
            }
            Ok((next, stats, objective))
        };
        let (next, stats, objective) = step().map_err(|e| e.at_iteration(k))?;
        if let Some(o) = objective {
            trace.push(o);
        }
        s = stats.s_bar;
        f = stats.f_bar;
        let change = next.relative_change(&eta);
        eta = next;
        if change < tol {
            converged = true;
            break;
        }
    }
    let g_hat = structure
        .modules
        .iter()
        .zip(&eta.thetas)
        .map(|(pm, th)| pm.impulse(th, prob.len))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        NebEstimate {
            eta,
            g_hat,
            iterations,
            objective_trace: trace,
            converged,
            s_hat: s,
        },
        f,
    ))
}
