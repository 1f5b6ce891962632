//! Summary statistics of a result table: sample means and `N`-scaled sample
//! variances per parameter, FIT quartiles, and the negative-fit filter.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::config::Method;
use crate::run::ResultTable;

/// Which runs a statistic is computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    All,
    /// Runs of the method in which every module has a nonnegative FIT.
    Filtered,
}

/// `method,module,subset,statistic,value`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub module: String,
    pub subset: Subset,
    pub statistic: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub rows: Vec<SummaryRow>,
}

impl SummaryStats {
    pub fn get(&self, method: Method, module: &str, subset: Subset, statistic: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.module == module && r.subset == subset && r.statistic == statistic)
            .map(|r| r.value)
    }
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample variance with divisor `len - 1`; NaN for fewer than two values.
pub fn sample_variance(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return f64::NAN;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
}

/// Quantile by linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `samples` is the data length `N` used to scale the variances.
pub fn summarize(table: &ResultTable, samples: usize) -> SummaryStats {
    // Runs with a negative or undefined FIT on any module, per method.
    let mut negative: BTreeMap<Method, BTreeSet<usize>> = BTreeMap::new();
    let mut failed: BTreeMap<Method, BTreeSet<usize>> = BTreeMap::new();
    for r in &table.fits {
        if r.fit.is_nan() {
            failed.entry(r.method).or_default().insert(r.run_id);
        } else if r.fit < 0.0 {
            negative.entry(r.method).or_default().insert(r.run_id);
        }
    }
    let keep = |m: Method, run: usize, subset: Subset| {
        !failed.get(&m).is_some_and(|s| s.contains(&run))
            && (subset == Subset::All || !negative.get(&m).is_some_and(|s| s.contains(&run)))
    };

    let mut rows = Vec::new();
    let mut push = |method: Method, module: &str, subset: Subset, statistic: String, value: f64| {
        rows.push(SummaryRow {
            method,
            module: module.to_string(),
            subset,
            statistic,
            value,
        })
    };

    let mut fit_groups: BTreeMap<(Method, String), Vec<(usize, f64)>> = BTreeMap::new();
    for r in &table.fits {
        fit_groups.entry((r.method, r.module.clone())).or_default().push((r.run_id, r.fit));
    }
    let mut param_groups: BTreeMap<(Method, String), BTreeMap<String, Vec<(usize, f64)>>> = BTreeMap::new();
    let mut param_order: BTreeMap<(Method, String), Vec<String>> = BTreeMap::new();
    for r in &table.params {
        let key = (r.method, r.module.clone());
        let order = param_order.entry(key.clone()).or_default();
        if !order.contains(&r.param_name) {
            order.push(r.param_name.clone());
        }
        param_groups
            .entry(key)
            .or_default()
            .entry(r.param_name.clone())
            .or_default()
            .push((r.run_id, r.value));
    }

    for ((method, module), fits) in &fit_groups {
        let m = *method;
        push(m, module, Subset::All, "failed_runs".into(), failed.get(&m).map_or(0, |s| s.len()) as f64);
        push(m, module, Subset::All, "negative_fit_runs".into(), negative.get(&m).map_or(0, |s| s.len()) as f64);
        for subset in [Subset::All, Subset::Filtered] {
            let mut v: Vec<f64> = fits.iter().filter(|(run, _)| keep(m, *run, subset)).map(|&(_, f)| f).collect();
            v.sort_by(f64::total_cmp);
            push(m, module, subset, "runs".into(), v.len() as f64);
            push(m, module, subset, "fit_mean".into(), if v.is_empty() { f64::NAN } else { mean(&v) });
            for (name, q) in [("fit_min", 0.0), ("fit_q1", 0.25), ("fit_median", 0.5), ("fit_q3", 0.75), ("fit_max", 1.0)] {
                push(m, module, subset, name.into(), quantile(&v, q));
            }
            if let Some(params) = param_groups.get(&(m, module.clone())) {
                for name in &param_order[&(m, module.clone())] {
                    let x: Vec<f64> = params[name].iter().filter(|(run, _)| keep(m, *run, subset)).map(|&(_, v)| v).collect();
                    let e = if x.is_empty() { f64::NAN } else { mean(&x) };
                    push(m, module, subset, format!("mean_{name}"), e);
                    push(m, module, subset, format!("nvar_{name}"), samples as f64 * sample_variance(&x));
                }
            }
        }
    }
    SummaryStats { rows }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::run::{FitRow, ParamRow};

    fn table(values: &[(f64, f64)]) -> ResultTable {
        let mut t = ResultTable::default();
        for (k, &(theta, fit)) in values.iter().enumerate() {
            t.params.push(ParamRow {
                run_id: k,
                method: Method::Neb,
                module: "G21".into(),
                param_name: "b1".into(),
                value: theta,
            });
            t.fits.push(FitRow {
                run_id: k,
                method: Method::Neb,
                module: "G21".into(),
                fit,
                iterations: 1,
                converged: true,
                wall_ms: 0.0,
            });
        }
        t
    }

    #[test]
    fn identical_estimates_have_zero_variance() {
        let s = summarize(&table(&[(0.3, 0.9); 5]), 200);
        assert_eq!(s.get(Method::Neb, "G21", Subset::All, "nvar_b1"), Some(0.0));
    }

    #[test]
    fn two_runs_arithmetic() {
        let s = summarize(&table(&[(0.0, 0.5), (2.0, 0.7)]), 200);
        assert_eq!(s.get(Method::Neb, "G21", Subset::All, "mean_b1"), Some(1.0));
        assert_eq!(s.get(Method::Neb, "G21", Subset::All, "nvar_b1"), Some(400.0));
    }

    #[test]
    fn negative_runs_are_filtered() {
        let s = summarize(&table(&[(0.0, -0.5), (1.0, 0.6), (3.0, 0.8)]), 10);
        assert_eq!(s.get(Method::Neb, "G21", Subset::All, "negative_fit_runs"), Some(1.0));
        assert_eq!(s.get(Method::Neb, "G21", Subset::Filtered, "runs"), Some(2.0));
        assert_eq!(s.get(Method::Neb, "G21", Subset::Filtered, "mean_b1"), Some(2.0));
        assert_eq!(s.get(Method::Neb, "G21", Subset::All, "fit_median"), Some(0.6));
        assert!((s.get(Method::Neb, "G21", Subset::Filtered, "fit_mean").unwrap() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn quartiles_interpolate() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&x, 0.25), 2.0);
        assert_eq!(quantile(&x, 0.5), 3.0);
        assert_eq!(quantile(&[1.0, 2.0], 0.5), 1.5);
    }
}
