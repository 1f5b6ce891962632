//! Known-topology dynamic networks `w = G(q) w + r`, measured as
//! `w̃ = w + e`: time-domain simulation, truncated sensitivity paths
//! `S = (I - G)⁻¹` and noisy datasets.
//!
//! Node indices are zero-based throughout the crate.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{NebError, Result};
use crate::lti::{ImpulseResponse, RationalTf};
use crate::scalar::Scalar;

/// Default number of samples used when probing a network for stability.
pub const DEFAULT_STABILITY_HORIZON: usize = 1000;

/// Measurement-noise level of one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseLevel<T> {
    /// Noise power relative to signal power, `var(e_k) / var(w_k)`, with
    /// the signal variance measured on the realized noise-free node signal.
    Ratio(T),
    /// Explicit noise variance `σ²_k`.
    Variance(T),
}

/// A dynamic network with known topology.
#[derive(Debug, Clone)]
pub struct NetworkModel<T: Scalar> {
    nodes: usize,
    /// `(j, i) -> G_ji`, the module from node `i` into node `j`.
    modules: BTreeMap<(usize, usize), RationalTf<T>>,
    references: Vec<usize>,
    noise: Vec<NoiseLevel<T>>,
    /// `(I - D)⁻¹` for the direct-feedthrough matrix `D`, if `D != 0`.
    static_solve: Option<DMatrix<T>>,
}

impl<T: Scalar> NetworkModel<T> {
    /// Validates topology and well-posedness. `modules` maps `(to, from)`
    /// to the transfer function on that edge.
    pub fn new(
        nodes: usize,
        modules: impl IntoIterator<Item = ((usize, usize), RationalTf<T>)>,
        references: Vec<usize>,
        noise: Vec<NoiseLevel<T>>,
    ) -> Result<Self> {
        if nodes == 0 {
            return Err(NebError::InvalidArgument("network needs at least one node".into()));
        }
        let mut map = BTreeMap::new();
        for ((j, i), tf) in modules {
            if j >= nodes || i >= nodes {
                return Err(NebError::InvalidArgument(format!(
                    "module G[{j}][{i}] references a node outside 0..{nodes}"
                )));
            }
            if j == i {
                return Err(NebError::InvalidArgument(format!("self-loop on node {j}")));
            }
            if map.insert((j, i), tf).is_some() {
                return Err(NebError::InvalidArgument(format!("duplicate module G[{j}][{i}]")));
            }
        }
        let mut refs = references;
        refs.sort_unstable();
        refs.dedup();
        if let Some(&bad) = refs.iter().find(|&&l| l >= nodes) {
            return Err(NebError::InvalidArgument(format!("reference r{bad} outside network")));
        }
        if noise.len() != nodes {
            return Err(NebError::DimensionMismatch(format!(
                "{} noise levels for {nodes} nodes",
                noise.len()
            )));
        }
        for level in &noise {
            let v = match level {
                NoiseLevel::Ratio(v) | NoiseLevel::Variance(v) => *v,
            };
            if !(v >= T::zero()) || !v.is_finite() {
                return Err(NebError::InvalidArgument(format!("invalid noise level {v}")));
            }
        }

        let mut d = DMatrix::<T>::zeros(nodes, nodes);
        for (&(j, i), tf) in &map {
            d[(j, i)] = tf.direct();
        }
        check_principal_minors(&d)?;
        let static_solve = if d.iter().all(|&x| x == T::zero()) {
            None
        } else {
            let inv = (DMatrix::identity(nodes, nodes) - d)
                .try_inverse()
                .ok_or_else(|| NebError::IllPosedNetwork("I - D is singular".into()))?;
            Some(inv)
        };

        Ok(Self {
            nodes,
            modules: map,
            references: refs,
            noise,
            static_solve,
        })
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn references(&self) -> &[usize] {
        &self.references
    }

    pub fn noise(&self) -> &[NoiseLevel<T>] {
        &self.noise
    }

    pub fn module(&self, to: usize, from: usize) -> Option<&RationalTf<T>> {
        self.modules.get(&(to, from))
    }

    pub fn modules(&self) -> impl Iterator<Item = (&(usize, usize), &RationalTf<T>)> {
        self.modules.iter()
    }

    /// Nodes with a direct causal connection into `j`.
    pub fn neighbors(&self, j: usize) -> Vec<usize> {
        self.modules
            .keys()
            .filter(|&&(to, _)| to == j)
            .map(|&(_, from)| from)
            .collect()
    }

    /// Same network with a different noise specification.
    pub fn with_noise(&self, noise: Vec<NoiseLevel<T>>) -> Result<Self> {
        Self::new(
            self.nodes,
            self.modules.clone(),
            self.references.clone(),
            noise,
        )
    }

    /// Simulates the network equations for the given `N x L` reference
    /// matrix from zero initial conditions; returns the `N x L` node signals.
    pub fn propagate(&self, r: &DMatrix<T>) -> Result<DMatrix<T>> {
        if r.ncols() != self.nodes {
            return Err(NebError::DimensionMismatch(format!(
                "reference matrix has {} columns for {} nodes",
                r.ncols(),
                self.nodes
            )));
        }
        let samples = r.nrows();
        let edges: Vec<(&(usize, usize), &RationalTf<T>)> = self.modules.iter().collect();
        let mut w = DMatrix::<T>::zeros(samples, self.nodes);
        let mut outputs = vec![vec![T::zero(); samples]; edges.len()];
        let mut partial = vec![T::zero(); edges.len()];
        let mut rhs = vec![T::zero(); self.nodes];

        for t in 0..samples {
            rhs.iter_mut()
                .enumerate()
                .for_each(|(k, v)| *v = r[(t, k)]);
            for (e, (&(j, i), tf)) in edges.iter().enumerate() {
                let y = &outputs[e];
                let mut acc = T::zero();
                for (k, &b) in tf.num().iter().enumerate() {
                    if t > k {
                        acc += b * w[(t - k - 1, i)];
                    }
                }
                for (k, &a) in tf.den().iter().enumerate() {
                    if t > k {
                        acc -= a * y[t - k - 1];
                    }
                }
                partial[e] = acc;
                rhs[j] += acc;
            }
            match &self.static_solve {
                None => {
                    for k in 0..self.nodes {
                        w[(t, k)] = rhs[k];
                    }
                }
                Some(inv) => {
                    for k in 0..self.nodes {
                        let mut acc = T::zero();
                        for (m, &v) in rhs.iter().enumerate() {
                            acc += inv[(k, m)] * v;
                        }
                        w[(t, k)] = acc;
                    }
                }
            }
            for (e, (&(_, i), tf)) in edges.iter().enumerate() {
                outputs[e][t] = partial[e] + tf.direct() * w[(t, i)];
            }
        }
        Ok(w)
    }

    /// Checks that the response to a unit impulse injected at every node
    /// decays within `horizon` samples.
    pub fn check_stable(&self, horizon: usize) -> Result<()> {
        let horizon = horizon.max(8);
        for l in 0..self.nodes {
            let w = self.impulse_at(l, horizon)?;
            for i in 0..self.nodes {
                if !decays(&w.column(i).iter().copied().collect::<Vec<_>>()) {
                    return Err(NebError::UnstableNetwork(format!(
                        "response of w{i} to an impulse at node {l} does not decay within {horizon} samples"
                    )));
                }
            }
        }
        Ok(())
    }

    fn impulse_at(&self, l: usize, samples: usize) -> Result<DMatrix<T>> {
        let mut r = DMatrix::<T>::zeros(samples, self.nodes);
        r[(0, l)] = T::one();
        self.propagate(&r)
    }
}

fn check_principal_minors<T: Scalar>(d: &DMatrix<T>) -> Result<()> {
    let n = d.nrows();
    let m = DMatrix::<T>::identity(n, n) - d;
    if d.iter().all(|&x| x == T::zero()) {
        return Ok(());
    }
    // Exhaustive over subsets for small networks, full determinant otherwise.
    if n <= 12 {
        for mask in 1u32..(1u32 << n) {
            let idx: Vec<usize> = (0..n).filter(|&k| mask & (1 << k) != 0).collect();
            let sub = DMatrix::from_fn(idx.len(), idx.len(), |a, b| m[(idx[a], idx[b])]);
            if sub.determinant().abs() <= T::lit(1e-12) {
                return Err(NebError::IllPosedNetwork(format!(
                    "principal minor over nodes {idx:?} of I - D vanishes"
                )));
            }
        }
    } else if m.determinant().abs() <= T::lit(1e-12) {
        return Err(NebError::IllPosedNetwork("I - D is singular".into()));
    }
    Ok(())
}

/// Non-decay test: the peak over the second half of the record must be
/// strictly below the peak over the first half (all-zero records pass).
fn decays<T: Scalar>(x: &[T]) -> bool {
    if x.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let half = x.len() / 2;
    let peak = |s: &[T]| s.iter().fold(T::zero(), |acc, v| acc.max(v.abs()));
    let head = peak(&x[..half]);
    let tail = peak(&x[half..]);
    tail == T::zero() || tail < head * T::lit(0.5)
}

/// Truncated sensitivity paths `S_il` (lag-zero start) for every node `i`
/// and every active reference `l`.
#[derive(Debug, Clone)]
pub struct SensitivitySet<T> {
    n: usize,
    paths: BTreeMap<(usize, usize), ImpulseResponse<T>>,
}

impl<T: Scalar> SensitivitySet<T> {
    pub fn n(&self) -> usize {
        self.n
    }

    /// `S_il`: path from reference `l` to node `i`.
    pub fn get(&self, node: usize, reference: usize) -> Option<&ImpulseResponse<T>> {
        self.paths.get(&(node, reference))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(usize, usize), &ImpulseResponse<T>)> {
        self.paths.iter()
    }
}

/// Computes the first `n` coefficients of every `S_il` by injecting a unit
/// impulse at reference `l`; the response is followed for another `n`
/// samples to detect non-decaying paths.
pub fn sensitivity<T: Scalar>(net: &NetworkModel<T>, n: usize) -> Result<SensitivitySet<T>> {
    sensitivity_with_horizon(net, n, n.max(DEFAULT_STABILITY_HORIZON / 4))
}

/// [`sensitivity`] with an explicit divergence horizon.
pub fn sensitivity_with_horizon<T: Scalar>(
    net: &NetworkModel<T>,
    n: usize,
    horizon: usize,
) -> Result<SensitivitySet<T>> {
    if n == 0 {
        return Err(NebError::InvalidArgument("sensitivity length must be positive".into()));
    }
    let total = n + horizon.max(8);
    let mut paths = BTreeMap::new();
    for &l in net.references() {
        let w = net.impulse_at(l, total)?;
        for i in 0..net.nodes() {
            let col: Vec<T> = w.column(i).iter().copied().collect();
            if !decays(&col) {
                return Err(NebError::UnstableSensitivity {
                    node: i,
                    reference: l,
                });
            }
            paths.insert((i, l), ImpulseResponse::new(col[..n].to_vec(), 0));
        }
    }
    Ok(SensitivitySet { n, paths })
}

/// Noise variance for a given signal variance and noise-to-signal power
/// ratio `var(e)/var(w)`.
pub fn calibrate_noise<T: Scalar>(signal_variance: T, ratio: T) -> Result<T> {
    if !(signal_variance > T::zero()) || !(ratio > T::zero()) {
        return Err(NebError::InvalidArgument(format!(
            "signal variance ({signal_variance}) and ratio ({ratio}) must be positive"
        )));
    }
    Ok(ratio * signal_variance)
}

/// One simulated experiment. All matrices are `N x L`, one column per node.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T: Scalar> {
    pub r: DMatrix<T>,
    pub w_tilde: DMatrix<T>,
    pub w_clean: DMatrix<T>,
    pub true_sigmas: Vec<T>,
    pub seed: u64,
}

impl<T: Scalar> Dataset<T> {
    pub fn samples(&self) -> usize {
        self.r.nrows()
    }

    pub fn nodes(&self) -> usize {
        self.r.ncols()
    }

    pub fn reference(&self, l: usize) -> Vec<T> {
        self.r.column(l).iter().copied().collect()
    }

    pub fn measured(&self, k: usize) -> Vec<T> {
        self.w_tilde.column(k).iter().copied().collect()
    }
}

/// Population variance (mean removed, divisor `N`).
pub fn sample_variance<T: Scalar>(x: &[T]) -> T {
    if x.is_empty() {
        return T::zero();
    }
    let n = T::count(x.len());
    let mean = x.iter().fold(T::zero(), |a, &b| a + b) / n;
    x.iter().fold(T::zero(), |a, &b| a + (b - mean) * (b - mean)) / n
}

/// Draws i.i.d. standard-normal references on the active reference nodes,
/// propagates them through the network and adds white Gaussian measurement
/// noise calibrated per node. Fully determined by `seed`.
pub fn simulate<T: Scalar>(net: &NetworkModel<T>, samples: usize, seed: u64) -> Result<Dataset<T>> {
    if samples == 0 {
        return Err(NebError::InvalidArgument("sample count must be positive".into()));
    }
    net.check_stable(DEFAULT_STABILITY_HORIZON)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = DMatrix::<T>::zeros(samples, net.nodes());
    for &l in net.references() {
        for t in 0..samples {
            let x: f64 = StandardNormal.sample(&mut rng);
            r[(t, l)] = T::lit(x);
        }
    }
    let w_clean = net.propagate(&r)?;
    let mut w_tilde = w_clean.clone();
    let mut sigmas = Vec::with_capacity(net.nodes());
    for k in 0..net.nodes() {
        let col: Vec<T> = w_clean.column(k).iter().copied().collect();
        let var = match net.noise()[k] {
            NoiseLevel::Variance(v) => v,
            NoiseLevel::Ratio(ratio) => {
                let sv = sample_variance(&col);
                if sv > T::zero() && ratio > T::zero() {
                    calibrate_noise(sv, ratio)?
                } else {
                    T::zero()
                }
            }
        };
        let sd = var.sqrt();
        for t in 0..samples {
            let x: f64 = StandardNormal.sample(&mut rng);
            w_tilde[(t, k)] += sd * T::lit(x);
        }
        sigmas.push(var);
    }
    Ok(Dataset {
        r,
        w_tilde,
        w_clean,
        true_sigmas: sigmas,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lti::{poly_mul, poly_sub};

    fn closed_loop(theta: [f64; 4], noise: NoiseLevel<f64>) -> NetworkModel<f64> {
        let g = RationalTf::second_order(theta);
        let c = RationalTf::with_direct(0.8, vec![0.4, -0.5], vec![0.5, 0.2]);
        NetworkModel::new(2, [((1, 0), g), ((0, 1), c)], vec![0], vec![noise; 2]).unwrap()
    }

    #[test]
    fn rejects_self_loops_and_bad_indices() {
        let g = RationalTf::new(vec![0.5], vec![]);
        assert!(NetworkModel::new(2, [((0, 0), g.clone())], vec![0], vec![NoiseLevel::Variance(0.0); 2]).is_err());
        assert!(NetworkModel::new(2, [((2, 0), g.clone())], vec![0], vec![NoiseLevel::Variance(0.0); 2]).is_err());
        assert!(NetworkModel::new(2, [((1, 0), g)], vec![3], vec![NoiseLevel::Variance(0.0); 2]).is_err());
    }

    #[test]
    fn rejects_algebraic_loop() {
        let a = RationalTf::with_direct(1.0, vec![], vec![]);
        let b = RationalTf::with_direct(1.0, vec![], vec![]);
        let err = NetworkModel::new(2, [((1, 0), a), ((0, 1), b)], vec![0], vec![NoiseLevel::Variance(0.0); 2]);
        assert!(matches!(err, Err(NebError::IllPosedNetwork(_))));
    }

    #[test]
    fn cascade_sensitivity_is_identity_path() {
        let g = RationalTf::second_order([0.2, 0.3, 0.4, 0.5]);
        let net = NetworkModel::new(2, [((1, 0), g)], vec![0], vec![NoiseLevel::Variance(0.0); 2]).unwrap();
        let s = sensitivity(&net, 10).unwrap();
        let mut delta = vec![0.0; 10];
        delta[0] = 1.0;
        assert_eq!(s.get(0, 0).unwrap().coeffs, delta);
    }

    #[test]
    fn closed_loop_sensitivity_matches_loop_algebra() {
        let net = closed_loop([0.2, 0.3, 0.4, 0.5], NoiseLevel::Variance(0.0));
        let n = 100;
        let s = sensitivity(&net, n).unwrap();
        // S11 = 1 / (1 - G C) = A_G A_C / (A_G A_C - B_G B_C).
        let g = net.module(1, 0).unwrap();
        let c = net.module(0, 1).unwrap();
        let aa = poly_mul(&g.den_polynomial(), &c.den_polynomial());
        let bb = poly_mul(&g.num_polynomial(), &c.num_polynomial());
        let s11 = RationalTf::from_polynomials(&aa, &poly_sub(&aa, &bb)).unwrap();
        let oracle = long_division(&s11.num_polynomial(), &s11.den_polynomial(), n);
        for (a, b) in s.get(0, 0).unwrap().coeffs.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    /// Power-series division `num / den` by undetermined coefficients.
    fn long_division(num: &[f64], den: &[f64], n: usize) -> Vec<f64> {
        let mut q = vec![0.0; n];
        for k in 0..n {
            let mut acc = num.get(k).copied().unwrap_or(0.0);
            for j in 1..=k.min(den.len() - 1) {
                acc -= den[j] * q[k - j];
            }
            q[k] = acc / den[0];
        }
        q
    }

    #[test]
    fn unstable_loop_detected() {
        let g = RationalTf::new(vec![1.2], vec![]);
        let c = RationalTf::new(vec![1.0], vec![]);
        let net = NetworkModel::new(2, [((1, 0), g), ((0, 1), c)], vec![0], vec![NoiseLevel::Variance(0.0); 2]).unwrap();
        assert!(matches!(
            sensitivity(&net, 20),
            Err(NebError::UnstableSensitivity { .. })
        ));
        assert!(matches!(simulate(&net, 50, 1), Err(NebError::UnstableNetwork(_))));
    }

    #[test]
    fn zero_references_zero_noise() {
        let g = RationalTf::second_order([0.2, 0.3, 0.4, 0.5]);
        let net = NetworkModel::new(2, [((1, 0), g)], vec![], vec![NoiseLevel::Variance(0.0); 2]).unwrap();
        let ds = simulate(&net, 30, 4).unwrap();
        assert!(ds.w_tilde.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn deterministic_per_seed() {
        let net = closed_loop([0.2, 0.3, 0.4, 0.5], NoiseLevel::Ratio(1.0));
        let a = simulate(&net, 200, 11).unwrap();
        let b = simulate(&net, 200, 11).unwrap();
        assert_eq!(a, b);
        let c = simulate(&net, 200, 12).unwrap();
        assert_ne!(a.w_tilde, c.w_tilde);
    }

    #[test]
    fn linearity_of_propagation() {
        let net = closed_loop([0.2, 0.3, 0.4, 0.5], NoiseLevel::Variance(0.0));
        let ds = simulate(&net, 120, 3).unwrap();
        let doubled = net.propagate(&(&ds.r * 2.0)).unwrap();
        assert_eq!(doubled, &ds.w_clean * 2.0);
    }

    #[test]
    fn calibrate_examples() {
        assert!((calibrate_noise::<f64>(2.0, 0.1).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(calibrate_noise(1.0, 1.0).unwrap(), 1.0);
        assert!((calibrate_noise::<f64>(3.0, 0.01).unwrap() - 0.03).abs() < 1e-15);
        assert!(calibrate_noise(0.0, 1.0).is_err());
        assert!(calibrate_noise(1.0, -1.0).is_err());
    }

    #[test]
    fn noise_ratio_band() {
        let net = closed_loop([0.2, 0.3, 0.4, 0.5], NoiseLevel::Ratio(1.0));
        let ds = simulate(&net, 200, 99).unwrap();
        for k in 0..2 {
            let e: Vec<f64> = (0..200).map(|t| ds.w_tilde[(t, k)] - ds.w_clean[(t, k)]).collect();
            let w: Vec<f64> = ds.w_clean.column(k).iter().copied().collect();
            let ratio = sample_variance(&e) / sample_variance(&w);
            assert!((0.7..=1.4).contains(&ratio), "node {k}: {ratio}");
        }
    }
}
