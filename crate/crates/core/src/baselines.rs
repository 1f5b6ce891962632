//! Reference estimators: the two-stage method, SMPE with estimated noise
//! variances, and the FIT score.

use nalgebra::{DMatrix, DVector};

use crate::error::{NebError, Result};
use crate::lti::{convolve_truncated, correlate, toeplitz_matrix};
use crate::neb::{floor_variance, NetworkData, Problem};
use crate::optim::{bfgs, BfgsOptions};
use crate::param::{flatten_theta, minimize_theta, split_theta, ModuleParametrization, QuadraticForm};
use crate::rng::derive_seed;
use crate::scalar::Scalar;

/// Order of the FIR models used to initialize rational stage-two fits.
const INIT_FIR_ORDER: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct TwoStageConfig<T: Scalar> {
    /// FIR length of every sensitivity path.
    pub n: usize,
    pub modules: Vec<ModuleParametrization<T>>,
}

#[derive(Debug, Clone)]
pub struct TwoStageEstimate<T: Scalar> {
    pub thetas: Vec<Vec<T>>,
    /// Stage-one FIR coefficients per input, `[α_i1; ...; α_im]`.
    pub alpha: Vec<DVector<T>>,
    /// Stage-one residual variances of `w̃_i`.
    pub input_variances: Vec<T>,
    /// Stage-two residual variance of the output.
    pub output_variance: T,
    /// Simulated noise-free inputs `ŵ_i = 𝐑 α̂_i`.
    pub w_hat: Vec<Vec<T>>,
}

/// Two-stage estimate: least-squares FIR sensitivities, then an
/// output-error fit of the modules on the simulated inputs.
pub fn two_stage<T: Scalar>(data: &NetworkData<T>, config: &TwoStageConfig<T>, seed: u64) -> Result<TwoStageEstimate<T>> {
    let prob = Problem::new(data, config.n)?;
    if config.modules.len() != prob.p() {
        return Err(NebError::DimensionMismatch(format!(
            "{} parametrizations for {} inputs",
            config.modules.len(),
            prob.p()
        )));
    }
    let len = prob.len;
    let width = prob.width();
    let chol = prob
        .rtr
        .clone()
        .cholesky()
        .filter(|c| {
            let d = c.l_dirty().diagonal();
            let min = d.iter().fold(T::lit(f64::INFINITY), |a, &v| a.min(v));
            min * min > T::lit(1e-12) * prob.rtr.diagonal().amax()
        })
        .ok_or_else(|| NebError::RankDeficient("stage-one regressor is not full column rank".into()))?;
    let dof = if len > width { len - width } else { len };

    let mut alpha = Vec::new();
    let mut input_variances = Vec::new();
    let mut w_hat = Vec::new();
    for (i, w) in data.inputs.iter().enumerate() {
        let a = chol.solve(&prob.rt_inputs[i]);
        let fitted = &prob.r * &a;
        let resid = (DVector::from_column_slice(w) - &fitted).norm_squared();
        input_variances.push(floor_variance(resid / T::count(dof), prob.input_energy[i], len));
        w_hat.push(fitted.iter().copied().collect::<Vec<T>>());
        alpha.push(a);
    }

    let form = output_error_form(&w_hat, &prob.output)?;
    let thetas = fit_modules(&form, &config.modules, &w_hat, &prob.output, seed)?;
    let n_theta: usize = config.modules.iter().map(|p| p.n_theta()).sum();
    let resid = (prob.output_energy + form.objective(&config.modules, &thetas)?).max(T::zero());
    let out_dof = if len > n_theta { len - n_theta } else { len };
    let output_variance = floor_variance(resid / T::count(out_dof), prob.output_energy, len);
    Ok(TwoStageEstimate {
        thetas,
        alpha,
        input_variances,
        output_variance,
        w_hat,
    })
}

/// `‖y - Σ_i T(ŵ_i) g_i‖² - yᵀy` as a quadratic form in the stacked `g`.
fn output_error_form<T: Scalar>(w_hat: &[Vec<T>], y: &DVector<T>) -> Result<QuadraticForm<T>> {
    let len = y.len();
    let p = w_hat.len();
    let mut x = DMatrix::zeros(len, p * len);
    for (i, w) in w_hat.iter().enumerate() {
        x.columns_mut(i * len, len).copy_from(&toeplitz_matrix(w, len));
    }
    QuadraticForm::new(x.transpose() * &x, x.tr_mul(y), len)
}

/// Stage-two fit: closed form for linear modules; otherwise descent from a
/// high-order FIR / Prony start and from an FIR-like start, keeping the best.
fn fit_modules<T: Scalar>(
    form: &QuadraticForm<T>,
    params: &[ModuleParametrization<T>],
    w_hat: &[Vec<T>],
    y: &DVector<T>,
    seed: u64,
) -> Result<Vec<Vec<T>>> {
    if params.iter().all(|p| p.is_linear()) {
        return minimize_theta(form, params, &zero_thetas(params), seed);
    }
    let fir = high_order_fir(w_hat, y, INIT_FIR_ORDER)?;
    let prony: Vec<Vec<T>> = params
        .iter()
        .zip(&fir)
        .map(|(p, h)| prony_start(p, h))
        .collect();
    let plain: Vec<Vec<T>> = params
        .iter()
        .zip(&fir)
        .map(|(p, h)| match p {
            ModuleParametrization::Rational { nb, na } => {
                let mut th: Vec<T> = (0..*nb).map(|k| h.get(k + 1).copied().unwrap_or(T::zero())).collect();
                th.extend(std::iter::repeat_n(T::zero(), *na));
                th
            }
            ModuleParametrization::Linear { basis } => vec![T::zero(); basis.ncols()],
        })
        .collect();
    let mut best: Option<(T, Vec<Vec<T>>)> = None;
    for (k, start) in [prony, plain].into_iter().enumerate() {
        let Ok(th) = minimize_theta(form, params, &start, derive_seed(seed, k as u64)) else {
            continue;
        };
        let v = form.objective(params, &th)?;
        if best.as_ref().is_none_or(|(b, _)| v < *b) {
            best = Some((v, th));
        }
    }
    best.map(|(_, th)| th)
        .ok_or_else(|| NebError::OptimizerFailure("stage-two fit failed from every start".into()))
}

fn zero_thetas<T: Scalar>(params: &[ModuleParametrization<T>]) -> Vec<Vec<T>> {
    params.iter().map(|p| vec![T::zero(); p.n_theta()]).collect()
}

/// Joint least-squares FIR fit `y ≈ Σ_i Σ_{k=1..order} h_i(k) ŵ_i(t-k)`;
/// returns lag-zero responses `[0, h_i(1), ..., h_i(order)]`.
fn high_order_fir<T: Scalar>(w_hat: &[Vec<T>], y: &DVector<T>, order: usize) -> Result<Vec<Vec<T>>> {
    let len = y.len();
    let order = order.min(len.saturating_sub(1) / w_hat.len().max(1)).max(1);
    let mut x = DMatrix::zeros(len, order * w_hat.len());
    for (i, w) in w_hat.iter().enumerate() {
        for k in 0..order {
            for t in (k + 1)..len {
                x[(t, i * order + k)] = w[t - k - 1];
            }
        }
    }
    let svd = x.svd(true, true);
    let h = svd
        .solve(y, T::lit(1e-10) * svd.singular_values.amax())
        .map_err(|e| NebError::IllConditioned(e.to_string()))?;
    Ok((0..w_hat.len())
        .map(|i| {
            let mut g = vec![T::zero()];
            g.extend(h.rows(i * order, order).iter().copied());
            g
        })
        .collect())
}

/// Prony / equation-error fit of a rational module to a lag-zero response.
fn prony_start<T: Scalar>(param: &ModuleParametrization<T>, g: &[T]) -> Vec<T> {
    let ModuleParametrization::Rational { nb, na } = param else {
        return vec![T::zero(); param.n_theta()];
    };
    let (nb, na) = (*nb, *na);
    let len = g.len();
    let at = |t: isize| if t >= 0 && (t as usize) < len { g[t as usize] } else { T::zero() };
    let mut a = DVector::zeros(na);
    if na > 0 && len > nb + 1 {
        let rows = len - nb - 1;
        let mut x = DMatrix::zeros(rows, na);
        let mut rhs = DVector::zeros(rows);
        for r in 0..rows {
            let t = (nb + 1 + r) as isize;
            rhs[r] = -at(t);
            for k in 0..na {
                x[(r, k)] = at(t - k as isize - 1);
            }
        }
        let svd = x.svd(true, true);
        let tol = T::lit(1e-10) * svd.singular_values.amax().max(T::eps());
        if let Ok(sol) = svd.solve(&rhs, tol) {
            a = sol;
        }
    }
    let mut theta = Vec::with_capacity(nb + na);
    for t in 1..=nb {
        let mut b = at(t as isize);
        for k in 0..na {
            b += a[k] * at(t as isize - k as isize - 1);
        }
        theta.push(b);
    }
    theta.extend(a.iter().copied());
    param.stabilize(&theta, T::lit(0.95))
}

/// SMPE parameters: modules, all sensitivity FIR coefficients and the noise
/// variances `[σ_1², ..., σ_p², σ_j²]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmpeState<T: Scalar> {
    pub thetas: Vec<Vec<T>>,
    pub alpha: Vec<DVector<T>>,
    pub sigmas: Vec<T>,
}

impl<T: Scalar> SmpeState<T> {
    pub fn from_two_stage(ts: &TwoStageEstimate<T>) -> Self {
        let mut sigmas = ts.input_variances.clone();
        sigmas.push(ts.output_variance);
        Self {
            thetas: ts.thetas.clone(),
            alpha: ts.alpha.clone(),
            sigmas,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmpeOptions {
    /// Relative parameter-change tolerance.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SmpeOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 5000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SmpeResult<T: Scalar> {
    pub state: SmpeState<T>,
    pub cost: T,
    pub iterations: usize,
    pub converged: bool,
    /// Cost after every accepted optimizer step.
    pub cost_trace: Vec<T>,
}

/// SMPE cost with estimated noise variances,
/// `Σ_c (‖ε_c‖² / σ_c² + N log σ_c²)` over the inputs and the output, where
/// `ε_i = w̃_i - 𝐑 α_i` and `ε_j = y - Σ_i G_i(θ) 𝐑 α_i`.
pub fn smpe_cost<T: Scalar>(data: &NetworkData<T>, params: &[ModuleParametrization<T>], n: usize, state: &SmpeState<T>) -> Result<T> {
    let prob = Problem::new(data, n)?;
    let x = pack(state);
    smpe_objective(&prob, params, &x)
        .map(|(v, _)| v)
        .ok_or_else(|| NebError::InvalidArgument("SMPE cost undefined at this state".into()))
}

/// [`smpe_cost`] and its gradient with respect to `[θ, α, log σ²]`, in the
/// order of the state's fields.
pub fn smpe_cost_and_gradient<T: Scalar>(
    data: &NetworkData<T>,
    params: &[ModuleParametrization<T>],
    n: usize,
    state: &SmpeState<T>,
) -> Result<(T, DVector<T>)> {
    let prob = Problem::new(data, n)?;
    smpe_objective(&prob, params, &pack(state))
        .ok_or_else(|| NebError::InvalidArgument("SMPE cost undefined at this state".into()))
}

fn pack<T: Scalar>(state: &SmpeState<T>) -> DVector<T> {
    let mut v = flatten_theta(&state.thetas);
    for a in &state.alpha {
        v.extend(a.iter().copied());
    }
    v.extend(state.sigmas.iter().map(|s| s.ln()));
    DVector::from_vec(v)
}

fn unpack<T: Scalar>(params: &[ModuleParametrization<T>], width: usize, x: &DVector<T>) -> SmpeState<T> {
    let nt: usize = params.iter().map(|p| p.n_theta()).sum();
    let p = params.len();
    let thetas = split_theta(params, &x.as_slice()[..nt]);
    let alpha = (0..p)
        .map(|i| x.rows(nt + i * width, width).into_owned())
        .collect();
    let sigmas = (0..=p).map(|c| x[nt + p * width + c].exp()).collect();
    SmpeState { thetas, alpha, sigmas }
}

fn smpe_objective<T: Scalar>(
    prob: &Problem<'_, T>,
    params: &[ModuleParametrization<T>],
    x: &DVector<T>,
) -> Option<(T, DVector<T>)> {
    let p = prob.p();
    let width = prob.width();
    let len = prob.len;
    let nt: usize = params.iter().map(|p| p.n_theta()).sum();
    if x.len() != nt + p * width + p + 1 || x.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let state = unpack(params, width, x);
    if !params.iter().zip(&state.thetas).all(|(pm, th)| pm.is_admissible(th)) {
        return None;
    }
    let nn = T::count(len);
    let two = T::lit(2.0);
    let mut grad = DVector::zeros(x.len());
    let mut cost = T::zero();
    let mut e_y = prob.output.clone();
    let mut rs = Vec::with_capacity(p);
    let mut gs = Vec::with_capacity(p);
    for i in 0..p {
        let ri: Vec<T> = (&prob.r * &state.alpha[i]).iter().copied().collect();
        let gi = params[i].impulse(&state.thetas[i], len).ok()?;
        let yi = convolve_truncated(&gi, &ri, len);
        for (e, v) in e_y.iter_mut().zip(&yi) {
            *e -= *v;
        }
        // input channel
        let s2 = state.sigmas[i];
        let e_i = DVector::from_column_slice(&prob.data.inputs[i]) - DVector::from_column_slice(&ri);
        let ee = e_i.norm_squared();
        cost += ee / s2 + nn * s2.ln();
        let ga = prob.r.tr_mul(&e_i) * (-two / s2);
        grad.rows_mut(nt + i * width, width).copy_from(&ga);
        grad[nt + p * width + i] = nn - ee / s2;
        rs.push(ri);
        gs.push(gi);
    }
    let sy = state.sigmas[p];
    let ee = e_y.norm_squared();
    cost += ee / sy + nn * sy.ln();
    grad[nt + p * width + p] = nn - ee / sy;
    let mut off = 0;
    for i in 0..p {
        // ∂/∂θ_i: -2/σ² J_iᵀ T(𝐑α_i)ᵀ ε_j
        let jac = params[i].jacobian(&state.thetas[i], len).ok()?;
        let c = DVector::from_vec(correlate(&rs[i], e_y.as_slice(), len));
        let k = params[i].n_theta();
        grad.rows_mut(off, k).copy_from(&(jac.tr_mul(&c) * (-two / sy)));
        off += k;
        // ∂/∂α_i from the output channel: -2/σ² 𝐑ᵀ T(g_i)ᵀ ε_j
        let c = DVector::from_vec(correlate(&gs[i], e_y.as_slice(), len));
        let mut ga = grad.rows_mut(nt + i * width, width);
        ga += prob.r.tr_mul(&c) * (-two / sy);
    }
    cost.is_finite().then_some((cost, grad))
}

/// Joint quasi-Newton minimization of the SMPE cost from `init`.
pub fn smpe<T: Scalar>(
    data: &NetworkData<T>,
    params: &[ModuleParametrization<T>],
    n: usize,
    init: &SmpeState<T>,
    options: &SmpeOptions,
) -> Result<SmpeResult<T>> {
    let prob = Problem::new(data, n)?;
    if params.len() != prob.p() || init.alpha.len() != prob.p() || init.sigmas.len() != prob.p() + 1 {
        return Err(NebError::DimensionMismatch("SMPE state does not match the data".into()));
    }
    if init.sigmas.iter().any(|s| !(*s > T::zero())) {
        return Err(NebError::InvalidArgument("SMPE needs positive initial variances".into()));
    }
    let x0 = pack(init);
    let opts = BfgsOptions {
        max_iter: options.max_iter,
        grad_tol: 1e-10,
        x_tol: options.tol,
    };
    let res = bfgs(|x: &DVector<T>| smpe_objective(&prob, params, x), x0, &opts)?;
    Ok(SmpeResult {
        state: unpack(params, prob.width(), &res.x),
        cost: res.value,
        iterations: res.iterations,
        converged: res.converged,
        cost_trace: res.trace,
    })
}

/// `FIT = 1 - ‖g⁰ - ĝ‖ / ‖g⁰‖`.
pub fn fit_metric<T: Scalar>(g_true: &[T], g_hat: &[T]) -> Result<T> {
    if g_true.len() != g_hat.len() {
        return Err(NebError::DimensionMismatch(format!(
            "FIT needs equal lengths, got {} and {}",
            g_true.len(),
            g_hat.len()
        )));
    }
    let norm = g_true.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
    if norm == T::zero() {
        return Err(NebError::UndefinedFit);
    }
    let err = g_true
        .iter()
        .zip(g_hat)
        .fold(T::zero(), |a, (&u, &v)| a + (u - v) * (u - v))
        .sqrt();
    Ok(T::one() - err / norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_exact_cases() {
        let g = [0.5, -0.25, 0.125];
        assert_eq!(fit_metric(&g, &g).unwrap(), 1.0);
        assert_eq!(fit_metric(&g, &[0.0; 3]).unwrap(), 0.0);
        assert_eq!(fit_metric(&g, &[1.0, -0.5, 0.25]).unwrap(), 0.0);
        assert!(matches!(fit_metric(&[0.0; 2], &[1.0, 1.0]), Err(NebError::UndefinedFit)));
    }

    #[test]
    fn prony_recovers_exact_rational() {
        let p = ModuleParametrization::<f64>::second_order();
        let th = [0.2, 0.3, 0.4, 0.5];
        let g = p.impulse(&th, 40).unwrap();
        let est = prony_start(&p, &g);
        for (a, b) in est.iter().zip(th) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
