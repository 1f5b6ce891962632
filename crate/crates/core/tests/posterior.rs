mod common;

use common::*;
use nalgebra::DVector;
use neb_core::kernel::ScaledKernel;
use neb_core::lti::toeplitz;
use neb_core::posterior::{build_regressor, condition_observations, posterior};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn check_instance(seed: u64) -> (f64, f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = rng.random_range(12..=40);
    let n = rng.random_range(2..=10);
    let p = rng.random_range(1..=2);
    let m = rng.random_range(1..=2);
    let inst = random_instance(&mut rng, len, n, p, m, 0.3);
    let eta = random_eta(&mut rng, p, m, vec![]);

    let blocks: Vec<_> = inst.data.references.iter().map(|r| toeplitz(r, n).unwrap()).collect();
    let reg = build_regressor(&inst.g, &blocks).unwrap();
    let obs = reg
        .observations(&inst.data.inputs, &inst.data.output, &eta.sigmas)
        .unwrap();
    let priors: Vec<_> = eta
        .lambdas
        .iter()
        .zip(&eta.betas)
        .map(|(&l, &b)| ScaledKernel::build(n, l, b).unwrap())
        .collect();
    let cond = condition_observations(&obs, &priors).unwrap();
    let post = cond.posterior();

    let w = dense_regressor(&inst.g, &inst.data.references, n);
    let mut z = Vec::new();
    let mut noise = Vec::new();
    for (i, x) in inst.data.inputs.iter().enumerate() {
        z.extend_from_slice(x);
        noise.extend(std::iter::repeat_n(eta.sigmas[i], len));
    }
    z.extend_from_slice(&inst.data.output);
    noise.extend(std::iter::repeat_n(eta.sigmas[p], len));
    let k = block_diag(
        &eta.lambdas
            .iter()
            .zip(&eta.betas)
            .map(|(&l, &b)| dense_kernel(n, l, b))
            .collect::<Vec<_>>(),
    );
    let oracle = dense_condition(&w, &DVector::from_vec(z), &noise, &k);
    (
        max_abs_vec(&post.mean, &oracle.mean),
        max_abs(&post.cov, &oracle.cov),
        (cond.objective() - oracle.objective).abs() / oracle.objective.abs().max(1.0),
    )
}

#[test]
fn information_form_matches_dense_conditioning() {
    for seed in 0..50 {
        let (dm, dc, dobj) = check_instance(seed);
        assert!(dm < 1e-8, "seed {seed}: mean differs by {dm:e}");
        assert!(dc < 1e-8, "seed {seed}: covariance differs by {dc:e}");
        assert!(dobj < 1e-9, "seed {seed}: marginal objective differs by {dobj:e}");
    }
}

#[test]
fn single_scalar_observation() {
    // x ~ N(0, λβ), y = 2x + e, e ~ N(0, 0.5).
    let (lambda, beta): (f64, f64) = (1.5, 0.6);
    let obs = neb_core::posterior::Observation::new(
        DVector::from_vec(vec![1.2]),
        nalgebra::DMatrix::from_element(1, 1, 2.0),
        0,
        0.5,
    )
    .unwrap();
    let post = posterior(&[obs], &[ScaledKernel::build(1, lambda, beta).unwrap()]).unwrap();
    let prior = lambda * beta;
    let var = 1.0 / (1.0 / prior + 4.0 / 0.5);
    assert!((post.cov[(0, 0)] - var).abs() < 1e-14);
    assert!((post.mean[0] - var * 2.0 * 1.2 / 0.5).abs() < 1e-14);
}

#[test]
fn vague_data_returns_prior() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inst = random_instance(&mut rng, 30, 5, 1, 1, 0.3);
    let blocks = vec![toeplitz(&inst.data.references[0], 5).unwrap()];
    let reg = build_regressor(&inst.g, &blocks).unwrap();
    let obs = reg
        .observations(&inst.data.inputs, &inst.data.output, &[1e14, 1e14])
        .unwrap();
    let post = posterior(&obs, &[ScaledKernel::build(5, 2.0, 0.7).unwrap()]).unwrap();
    assert!(post.mean.amax() < 1e-10);
    assert!(max_abs(&post.cov, &dense_kernel(5, 2.0, 0.7)) < 1e-10);
}
