#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use neb_core::neb::NetworkData;
use neb_core::posterior::HyperParameterVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// `K(i, j) = β^(max(i, j) + 1)`, entry by entry.
pub fn dense_kernel(n: usize, lambda: f64, beta: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| lambda * beta.powi(i.max(j) as i32 + 1))
}

pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let d: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(d, d);
    let mut o = 0;
    for b in blocks {
        out.view_mut((o, o), (b.nrows(), b.nrows())).copy_from(b);
        o += b.nrows();
    }
    out
}

/// `[T(r_1) ... T(r_m)]` with `T(r)[t, k] = r[t - k]`.
pub fn dense_reference_matrix(refs: &[Vec<f64>], n: usize) -> DMatrix<f64> {
    let len = refs[0].len();
    DMatrix::from_fn(len, n * refs.len(), |t, c| {
        let (l, k) = (c / n, c % n);
        if t >= k {
            refs[l][t - k]
        } else {
            0.0
        }
    })
}

/// `T_N(g) M` by explicit convolution sums.
pub fn dense_filter(g: &[f64], m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |t, c| (0..=t).map(|u| g[t - u] * m[(u, c)]).sum())
}

/// `[I_p ⊗ 𝐑; G_1 𝐑 ... G_p 𝐑]`.
pub fn dense_regressor(g: &[Vec<f64>], refs: &[Vec<f64>], n: usize) -> DMatrix<f64> {
    let r = dense_reference_matrix(refs, n);
    let (len, w, p) = (r.nrows(), r.ncols(), g.len());
    let mut out = DMatrix::zeros(len * (p + 1), w * p);
    for i in 0..p {
        out.view_mut((i * len, i * w), (len, w)).copy_from(&r);
        out.view_mut((p * len, i * w), (len, w)).copy_from(&dense_filter(&g[i], &r));
    }
    out
}

pub struct DenseGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// `log det Σ_z + zᵀ Σ_z⁻¹ z`.
    pub objective: f64,
}

/// Joint-Gaussian conditioning of `x ~ N(0, K)` on `z = W x + e`,
/// `e ~ N(0, diag(noise))`, in covariance form.
pub fn dense_condition(w: &DMatrix<f64>, z: &DVector<f64>, noise: &[f64], k: &DMatrix<f64>) -> DenseGaussian {
    let sz = w * k * w.transpose() + DMatrix::from_diagonal(&DVector::from_column_slice(noise));
    let lu = sz.clone().lu();
    let kw = k * w.transpose();
    let gain = lu.solve(&kw.transpose()).unwrap().transpose();
    let mean = &gain * z;
    let cov = k - &gain * kw.transpose();
    let alpha = lu.solve(z).unwrap();
    let log_det = sz.cholesky().unwrap().l().diagonal().iter().map(|v| 2.0 * v.ln()).sum::<f64>();
    DenseGaussian {
        mean,
        cov,
        objective: log_det + z.dot(&alpha),
    }
}

pub fn max_abs(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).abs().max()
}

pub fn max_abs_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).abs().max()
}

/// Random FIR module response (lag zero, `g[0] = 0`), small enough to keep
/// the data well scaled.
pub fn random_fir(rng: &mut ChaCha8Rng, len: usize, order: usize) -> Vec<f64> {
    let mut g = vec![0.0; len];
    for v in g.iter_mut().take(order + 1).skip(1) {
        *v = 0.5 * normal(rng);
    }
    g
}

/// Random stable `[b1, b2, a1, a2]` with pole radius at most 0.85.
pub fn random_stable_theta(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let radius = rng.random_range(0.1..0.85);
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let (a1, a2) = if rng.random_bool(0.5) {
        (-2.0 * radius * angle.cos(), radius * radius)
    } else {
        let r2 = rng.random_range(-0.85..0.85);
        (-(radius + r2), radius * r2)
    };
    [normal(rng), normal(rng), a1, a2]
}

/// A random target-node problem: inputs driven by `m` references through
/// random sensitivities, output through the FIR modules `g`.
pub struct Instance {
    pub data: NetworkData<f64>,
    pub g: Vec<Vec<f64>>,
    pub s: Vec<DVector<f64>>,
}

pub fn random_instance(rng: &mut ChaCha8Rng, len: usize, n: usize, p: usize, m: usize, noise: f64) -> Instance {
    let refs: Vec<Vec<f64>> = (0..m).map(|_| normals(rng, len)).collect();
    let r = dense_reference_matrix(&refs, n);
    let g: Vec<Vec<f64>> = (0..p).map(|_| random_fir(rng, len, 3)).collect();
    let mut s = Vec::new();
    let mut inputs = Vec::new();
    let mut output = DVector::zeros(len);
    for gi in &g {
        let si = DVector::from_fn(m * n, |k, _| 0.8f64.powi((k % n) as i32 + 1) * normal(rng));
        let wi = &r * &si;
        output += dense_filter(gi, &DMatrix::from_column_slice(len, 1, wi.as_slice())).column(0);
        inputs.push((wi + DVector::from_vec(normals(rng, len)) * noise).as_slice().to_vec());
        s.push(si);
    }
    output += DVector::from_vec(normals(rng, len)) * noise;
    let data = NetworkData::new(inputs, output.as_slice().to_vec(), refs, None).unwrap();
    Instance { data, g, s }
}

pub fn random_eta(rng: &mut ChaCha8Rng, p: usize, m: usize, thetas: Vec<Vec<f64>>) -> HyperParameterVector<f64> {
    HyperParameterVector {
        sigmas: (0..=p).map(|_| rng.random_range(0.05..1.5)).collect(),
        lambdas: (0..p * m).map(|_| rng.random_range(0.2..3.0)).collect(),
        betas: (0..p * m).map(|_| rng.random_range(0.3..0.95)).collect(),
        thetas,
    }
}

/// Mean and standard error of the mean from batch means.
pub fn batch_mean(x: &[f64], batches: usize) -> (f64, f64) {
    let size = x.len() / batches;
    let means: Vec<f64> = (0..batches)
        .map(|b| x[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64)
        .collect();
    let mean = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (mean, (var / batches as f64).sqrt())
}

pub fn as_column(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}
