mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use neb_core::kernel::BETA_MIN;
use neb_core::neb::*;
use neb_core::param::ModuleParametrization;
use neb_core::posterior::HyperParameterVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Plain golden-section search, kept separate from the library's.
fn argmin_1d(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..300 {
        let c = b - r * (b - a);
        let d = a + r * (b - a);
        if f(c) < f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    0.5 * (a + b)
}

fn fir_setup(seed: u64, len: usize, n: usize) -> (Instance, NebStructure<f64>, HyperParameterVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = rng.random_range(1..=2);
    let m = rng.random_range(1..=2);
    let inst = random_instance(&mut rng, len, n, p, m, 0.4);
    let structure = NebStructure::new(n, vec![ModuleParametrization::fir(3, len); p]).unwrap();
    let thetas = (0..p).map(|_| normals(&mut rng, 3)).collect();
    let eta = random_eta(&mut rng, p, m, thetas);
    (inst, structure, eta)
}

fn moments_at(inst: &Instance, structure: &NebStructure<f64>, eta: &HyperParameterVector<f64>) -> Moments<f64> {
    estep_moments(&neb_posterior(&inst.data, structure, eta).unwrap().posterior())
}

#[test]
fn marginal_objective_is_monotone() {
    for seed in 0..20 {
        let (inst, structure, eta) = fir_setup(100 + seed, 80, 30);
        let est = neb_identify_from(
            &inst.data,
            &structure,
            eta,
            &NebOptions {
                max_iter: 40,
                ..Default::default()
            },
        )
        .unwrap();
        for (k, w) in est.objective_trace.windows(2).enumerate() {
            assert!(
                w[1] <= w[0] + 1e-6 * w[0].abs(),
                "seed {seed}, iteration {k}: {} -> {}",
                w[0],
                w[1]
            );
        }
    }
}

#[test]
fn lambda_matches_numeric_minimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let n = rng.random_range(3..12);
        let x = DMatrix::from_fn(n, n + 3, |i, _| 0.8f64.powi(i as i32) * normal(&mut rng));
        let s = &x * x.transpose() / (n + 3) as f64;
        let (lambda, beta) = update_hyperparameters(&s).unwrap();
        let k = dense_kernel(n, 1.0, beta);
        let kinv = k.clone().try_inverse().unwrap();
        let logdet_k = k.determinant().ln();
        let tr = (&kinv * &s).trace();
        let q = |log_l: f64| n as f64 * log_l + logdet_k + tr / log_l.exp();
        let oracle = argmin_1d(q, -20.0, 20.0).exp();
        assert!((lambda - oracle).abs() / oracle < 1e-6, "{lambda} vs {oracle}");
        // β profile: no grid point of a fine independent scan does better.
        let profile = |b: f64| {
            let k = dense_kernel(n, 1.0, b);
            k.determinant().ln() + n as f64 * (k.try_inverse().unwrap() * &s).trace().ln()
        };
        let best = profile(beta);
        for j in 1..400 {
            let b = BETA_MIN + (0.999 - BETA_MIN) * j as f64 / 400.0;
            assert!(profile(b) >= best - 1e-6 * best.abs().max(1.0), "β {b} beats {beta}");
        }
    }
}

fn output_matrices(inst: &Instance, n: usize, p: usize) -> Vec<DMatrix<f64>> {
    // M_(i,k): the output regressor for a unit FIR coefficient k of module i.
    let r = dense_reference_matrix(&inst.data.references, n);
    let len = r.nrows();
    let w = r.ncols();
    let mut out = Vec::new();
    for i in 0..p {
        for k in 0..3 {
            let mut g = vec![0.0; len];
            g[k + 1] = 1.0;
            let mut mk = DMatrix::zeros(len, w * p);
            mk.columns_mut(i * w, w).copy_from(&dense_filter(&g, &r));
            out.push(mk);
        }
    }
    out
}

#[test]
fn linear_theta_matches_dense_quadratic() {
    for seed in 0..5 {
        let (inst, structure, eta) = fir_setup(200 + seed, 50, 8);
        let p = structure.modules.len();
        let mom = moments_at(&inst, &structure, &eta);
        let y = DVector::from_column_slice(&inst.data.output);
        let ms = output_matrices(&inst, 8, p);
        let k = ms.len();
        let h = DMatrix::from_fn(k, k, |a, b| (ms[a].transpose() * &ms[b] * &mom.s2).trace());
        let b = DVector::from_fn(k, |a, _| y.dot(&(&ms[a] * &mom.s_hat)));
        let oracle = h.lu().solve(&b).unwrap();
        let theta = update_theta(&mom, &inst.data, &structure, &eta.thetas, 0).unwrap();
        let flat: Vec<f64> = theta.concat();
        for (a, o) in flat.iter().zip(oracle.iter()) {
            assert!((a - o).abs() / o.abs().max(1e-3) < 1e-6, "{a} vs {o}");
        }
    }
}

#[test]
fn variances_match_dense_and_numeric_minimum() {
    for seed in 0..5 {
        let (inst, structure, eta) = fir_setup(300 + seed, 50, 8);
        let p = structure.modules.len();
        let mom = moments_at(&inst, &structure, &eta);
        let sig = update_noise_variances(&mom, &inst.data, &structure, &eta.thetas).unwrap();
        let r = dense_reference_matrix(&inst.data.references, 8);
        let (len, w) = (r.nrows(), r.ncols());
        for i in 0..p {
            let x = DVector::from_column_slice(&inst.data.inputs[i]);
            let si = mom.s_hat.rows(i * w, w);
            let pi = mom.p_hat.view((i * w, i * w), (w, w));
            let dense = ((&x - &r * si).norm_squared() + (&r * pi * r.transpose()).trace()) / len as f64;
            assert!((sig[i] - dense).abs() / dense < 1e-9);
        }
        let ms = output_matrices(&inst, 8, p);
        let theta: Vec<f64> = eta.thetas.concat();
        let mut m = DMatrix::zeros(len, w * p);
        for (mk, t) in ms.iter().zip(&theta) {
            m += mk * *t;
        }
        let y = DVector::from_column_slice(&inst.data.output);
        let dense = ((&y - &m * &mom.s_hat).norm_squared() + (&m * &mom.p_hat * m.transpose()).trace()) / len as f64;
        assert!((sig[p] - dense).abs() / dense < 1e-9);

        for c in 0..=p {
            let q = |log_s: f64| {
                let mut e = eta.clone();
                e.sigmas[c] = log_s.exp();
                q_function(&e, &mom, &inst.data, &structure).unwrap().total()
            };
            let oracle = argmin_1d(q, -15.0, 10.0).exp();
            assert!((sig[c] - oracle).abs() / oracle < 1e-6, "channel {c}: {} vs {oracle}", sig[c]);
        }
    }
}

#[test]
fn q_splits_without_cross_terms() {
    let (inst, structure, eta) = fir_setup(400, 40, 6);
    let mom = moments_at(&inst, &structure, &eta);
    let base = q_function(&eta, &mom, &inst.data, &structure).unwrap();
    let mut kern = eta.clone();
    kern.lambdas[0] *= 2.0;
    kern.betas[0] = 0.5;
    let q1 = q_function(&kern, &mom, &inst.data, &structure).unwrap();
    assert_eq!(q1.q0, base.q0);
    assert_ne!(q1.qs, base.qs);
    let mut noise = eta.clone();
    noise.sigmas[0] *= 3.0;
    noise.thetas[0][1] += 0.2;
    let q2 = q_function(&noise, &mom, &inst.data, &structure).unwrap();
    assert_eq!(q2.qs, base.qs);
    assert_ne!(q2.q0, base.q0);
}

#[test]
fn neb_is_deterministic() {
    let (inst, structure, eta) = fir_setup(500, 60, 10);
    let opts = NebOptions {
        max_iter: 10,
        seed: 9,
        ..Default::default()
    };
    let a = neb_identify_from(&inst.data, &structure, eta.clone(), &opts).unwrap();
    let b = neb_identify_from(&inst.data, &structure, eta, &opts).unwrap();
    assert_eq!(a.eta, b.eta);
    assert_eq!(a.objective_trace, b.objective_trace);
}

#[test]
fn rational_neb_recovers_closed_loop_module() {
    use neb_core::lti::RationalTf;
    use neb_core::network::{simulate, NetworkModel, NoiseLevel};
    let theta = [0.2, 0.3, 0.4, 0.5];
    let g = RationalTf::second_order(theta);
    let c = RationalTf::with_direct(0.8, vec![0.4, -0.5], vec![0.5, 0.2]);
    let net = NetworkModel::new(2, [((1, 0), g), ((0, 1), c)], vec![0], vec![NoiseLevel::Ratio(0.05); 2]).unwrap();
    let ds = simulate(&net, 300, 4).unwrap();
    let data = NetworkData::from_dataset(&ds, 1, &[0], &[0], None).unwrap();
    let p = ModuleParametrization::second_order();
    let structure = NebStructure::new(60, vec![p.clone()]).unwrap();
    let est = neb_identify(&data, &structure, &NebOptions { max_iter: 60, ..Default::default() }).unwrap();
    let truth = p.impulse(&theta, 300).unwrap();
    let fit = neb_core::baselines::fit_metric(&truth, &est.g_hat[0]).unwrap();
    assert!(fit > 0.8, "FIT {fit}");
}
