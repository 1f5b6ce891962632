//! Small unconstrained optimizers: BFGS with backtracking line search and
//! golden-section search on an interval.

use nalgebra::{DMatrix, DVector};

use crate::error::{NebError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Stop when `max |∇f| <= grad_tol * max(1, |f|)`.
    pub grad_tol: f64,
    /// Stop when `‖Δx‖ <= x_tol * max(‖x‖, 1e-12)`.
    pub x_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-10,
            x_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsResult<T: Scalar> {
    pub x: DVector<T>,
    pub value: T,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after every accepted step, starting with the initial value.
    pub trace: Vec<T>,
}

/// Minimizes `f`, which returns the value and gradient or `None` when the
/// point is outside the domain (non-finite value, unstable model, ...).
/// Steps into such points are rejected by the line search.
pub fn bfgs<T, F>(mut f: F, x0: DVector<T>, opts: &BfgsOptions) -> Result<BfgsResult<T>>
where
    T: Scalar,
    F: FnMut(&DVector<T>) -> Option<(T, DVector<T>)>,
{
    let dim = x0.len();
    let (mut fx, mut g) = f(&x0)
        .filter(|(v, g)| v.is_finite() && g.iter().all(|x| x.is_finite()))
        .ok_or_else(|| NebError::OptimizerFailure("objective not finite at start".into()))?;
    let mut x = x0;
    let mut h = DMatrix::<T>::identity(dim, dim);
    let mut trace = vec![fx];
    let mut converged = false;
    let mut iterations = 0;
    let grad_tol = T::lit(opts.grad_tol);
    let x_tol = T::lit(opts.x_tol);
    let c1 = T::lit(1e-4);
    let mut fresh = true;

    for it in 0..opts.max_iter {
        iterations = it + 1;
        if g.amax() <= grad_tol * fx.abs().max(T::one()) {
            converged = true;
            break;
        }
        let mut dir = -(&h * &g);
        let mut slope = g.dot(&dir);
        if !(slope < T::zero()) {
            h = DMatrix::identity(dim, dim);
            dir = -g.clone();
            slope = g.dot(&dir);
            fresh = true;
        }
        // First step of a fresh (identity) metric is capped in length.
        let mut step = if fresh {
            T::one().min(T::one() / dir.norm().max(T::eps()))
        } else {
            T::one()
        };
        let mut accepted = None;
        for _ in 0..60 {
            let trial = &x + &dir * step;
            if let Some((ft, gt)) = f(&trial) {
                if ft.is_finite()
                    && gt.iter().all(|v| v.is_finite())
                    && ft <= fx + c1 * step * slope
                {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            step *= T::lit(0.5);
        }
        let Some((xn, fnew, gn)) = accepted else {
            if fresh {
                // Even steepest descent makes no progress: numerically stationary.
                converged = g.amax() <= T::lit(1e-6) * fx.abs().max(T::one());
                break;
            }
            h = DMatrix::identity(dim, dim);
            fresh = true;
            continue;
        };
        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        let small_step = s.norm() <= x_tol * x.norm().max(T::lit(1e-12));
        x = xn;
        fx = fnew;
        g = gn;
        trace.push(fx);
        if small_step {
            converged = true;
            break;
        }
        if sy > T::eps() * s.norm() * y.norm() {
            if fresh {
                let scale = sy / y.dot(&y);
                h = DMatrix::identity(dim, dim) * scale;
            }
            let rho = T::one() / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H+ = H - ρ(s yᵀH + H y sᵀ) + (ρ² yᵀHy + ρ) s sᵀ
            h -= (&s * hy.transpose() + &hy * s.transpose()) * rho;
            h += (&s * s.transpose()) * (rho * rho * yhy + rho);
            fresh = false;
        }
    }
    Ok(BfgsResult {
        x,
        value: fx,
        iterations,
        converged,
        trace,
    })
}

/// Golden-section minimization of a unimodal function on `[a, b]`.
/// Returns `(x, f(x))`.
pub fn golden_section<T, F>(mut f: F, mut a: T, mut b: T, tol: T, max_iter: usize) -> (T, T)
where
    T: Scalar,
    F: FnMut(T) -> T,
{
    let ratio = T::lit(0.618_033_988_749_894_9);
    let mut c = b - (b - a) * ratio;
    let mut d = a + (b - a) * ratio;
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..max_iter {
        if (b - a).abs() <= tol {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - (b - a) * ratio;
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + (b - a) * ratio;
            fd = f(d);
        }
    }
    if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Central finite-difference gradient, used by tests and diagnostics.
pub fn numeric_gradient<T, F>(mut f: F, x: &DVector<T>, h: T) -> DVector<T>
where
    T: Scalar,
    F: FnMut(&DVector<T>) -> T,
{
    let mut g = DVector::zeros(x.len());
    for k in 0..x.len() {
        let step = h * x[k].abs().max(T::one());
        let mut xp = x.clone();
        xp[k] += step;
        let mut xm = x.clone();
        xm[k] -= step;
        g[k] = (f(&xp) - f(&xm)) / (step + step);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
        let (a, b) = (x[0], x[1]);
        let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = DVector::from_vec(vec![
            -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
            200.0 * (b - a * a),
        ]);
        Some((v, g))
    }

    #[test]
    fn bfgs_solves_rosenbrock() {
        let res = bfgs(rosenbrock, DVector::from_vec(vec![-1.2, 1.0]), &BfgsOptions::default()).unwrap();
        assert!(res.converged);
        assert!((res.x[0] - 1.0).abs() < 1e-6 && (res.x[1] - 1.0).abs() < 1e-6);
        assert!(res.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn bfgs_quadratic_exact() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let f = |x: &DVector<f64>| {
            let ax = &a * x;
            Some((0.5 * x.dot(&ax) - b.dot(x), ax - &b))
        };
        let res = bfgs(f, DVector::zeros(3), &BfgsOptions::default()).unwrap();
        let exact = a.clone().cholesky().unwrap().solve(&b);
        assert!((res.x - exact).amax() < 1e-8);
    }

    #[test]
    fn bfgs_rejects_steps_outside_domain() {
        // log barrier: undefined for x <= 0, minimum at x = 1.
        let f = |x: &DVector<f64>| {
            (x[0] > 0.0).then(|| (x[0] - x[0].ln(), DVector::from_vec(vec![1.0 - 1.0 / x[0]])))
        };
        let res = bfgs(f, DVector::from_vec(vec![0.05]), &BfgsOptions::default()).unwrap();
        assert!((res.x[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn bfgs_errors_on_bad_start() {
        let f = |_: &DVector<f64>| None;
        assert!(bfgs(f, DVector::zeros(1), &BfgsOptions::default()).is_err());
    }

    #[test]
    fn golden_finds_parabola_minimum() {
        let (x, fx) = golden_section(|x: f64| (x - 0.3).powi(2) + 1.0, -1.0, 2.0, 1e-10, 200);
        assert!((x - 0.3).abs() < 1e-7);
        assert!((fx - 1.0).abs() < 1e-15);
    }

    #[test]
    fn numeric_gradient_of_cubic() {
        let g = numeric_gradient(|x: &DVector<f64>| x[0].powi(3) + 2.0 * x[1], &DVector::from_vec(vec![2.0, 1.0]), 1e-6);
        assert!((g[0] - 12.0).abs() < 1e-6);
        assert!((g[1] - 2.0).abs() < 1e-8);
    }
}
