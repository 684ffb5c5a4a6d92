//! Tail-model fits, regression of tail probabilities on the barrier offset, and
//! the generating-function recursion for the truncated additive martingale.

mod mgf;

pub use mgf::{certify_mgf_bound, default_x_grid, mgf_recursion, MgfBoundCertificate, MgfTable, DIVERGENCE_SENTINEL};

use std::io::Read;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::stats::{linear_fit, normal_quantile, quantile_sorted, weighted_linear_fit, LineFit};
use crate::walk::RenewalTable;

/// Minimum number of order statistics inside the fit range.
pub const MIN_FIT_POINTS: usize = 100;
/// Upper limit on regression points, spaced evenly in log-exceedance.
const MAX_REGRESSION_POINTS: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailKind {
    /// `P(X > y) ≈ C e^{−c y}`.
    Exponential,
    /// `P(X > y) ≈ c y^{−κ}`.
    Power,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TailFit {
    pub kind: TailKind,
    pub rate_or_index: f64,
    pub prefactor: f64,
    pub fit_range: (f64, f64),
    pub r_squared: f64,
    pub bootstrap_ci: (f64, f64),
    /// Log-likelihood of an Exponential minus that of a Pareto fitted to the
    /// excesses over the lower end of the fit range; negative favours Power.
    pub model_comparison: f64,
    pub points_in_range: usize,
    /// Log-log regression slope (Power) or Hill index on the same range
    /// (Exponential), as a second lens.
    pub cross_check: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FitOptions {
    pub bootstrap: usize,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { bootstrap: 200, seed: 0 }
    }
}

/// Ascending order statistics at ranks `[lo, hi)` of `data`, leaving the rest unsorted.
fn upper_order_stats(data: &mut [f64], lo: usize) -> &[f64] {
    if lo > 0 && lo < data.len() {
        data.select_nth_unstable_by(lo, f64::total_cmp);
    }
    let top = &mut data[lo..];
    top.sort_unstable_by(f64::total_cmp);
    top
}

struct Core {
    rate_or_index: f64,
    prefactor: f64,
    line: LineFit,
    y_range: (f64, f64),
    count: usize,
}

fn rank_bounds(n: usize, range: (f64, f64)) -> (usize, usize) {
    let lo = ((range.0 * n as f64).floor() as usize).min(n);
    let hi = ((range.1 * n as f64).ceil() as usize).clamp(lo, n);
    (lo, hi)
}

/// Fit on `top` = ascending order statistics of ranks `lo..n`.
fn fit_core(top: &[f64], n: usize, lo: usize, hi: usize, kind: TailKind) -> Result<Core> {
    let count = hi - lo;
    if count < MIN_FIT_POINTS {
        return Err(Error::Fit(format!("only {count} samples in the fit range (need {MIN_FIT_POINTS})")));
    }
    let slice = &top[..count];
    let (y_lo, y_hi) = (slice[0], slice[count - 1]);
    if !(y_hi > y_lo) {
        return Err(Error::Fit("fit range is degenerate (constant samples)".into()));
    }
    // points evenly spaced in log-exceedance, so every decade of the range weighs the same
    let (e_max, e_min) = ((n - lo) as f64, (n - hi + 1).max(1) as f64);
    let mut xs = Vec::with_capacity(MAX_REGRESSION_POINTS);
    let mut ys = Vec::with_capacity(MAX_REGRESSION_POINTS);
    let mut last = usize::MAX;
    for j in 0..MAX_REGRESSION_POINTS {
        let e = e_max * (e_min / e_max).powf(j as f64 / (MAX_REGRESSION_POINTS - 1) as f64);
        let i = (n - e.round() as usize).saturating_sub(lo).min(count - 1);
        if i == last {
            continue;
        }
        last = i;
        let exceed = (n - lo - i) as f64;
        let y = slice[i];
        match kind {
            TailKind::Exponential => xs.push(y),
            TailKind::Power => {
                if y <= 0.0 {
                    continue;
                }
                xs.push(y.ln())
            }
        }
        ys.push(((exceed - 0.5) / n as f64).ln());
    }
    let line = linear_fit(&xs, &ys).ok_or_else(|| Error::Fit("regression is degenerate".into()))?;
    match kind {
        TailKind::Exponential => Ok(Core {
            rate_or_index: -line.slope,
            prefactor: line.intercept.exp(),
            line,
            y_range: (y_lo, y_hi),
            count,
        }),
        TailKind::Power => {
            // Hill estimator on the order statistics above the lower rank
            let threshold = top[0];
            if !(threshold > 0.0) {
                return Err(Error::Fit("Hill estimator needs a positive threshold".into()));
            }
            let k = n - lo - 1;
            if k < MIN_FIT_POINTS {
                return Err(Error::Fit(format!("only {k} exceedances for the Hill estimator")));
            }
            let mean_log: f64 = top[1..].iter().map(|&v| (v / threshold).ln()).sum::<f64>() / k as f64;
            if !(mean_log > 0.0) {
                return Err(Error::Fit("Hill estimator is degenerate".into()));
            }
            let index = 1.0 / mean_log;
            Ok(Core {
                rate_or_index: index,
                prefactor: (k as f64 / n as f64) * threshold.powf(index),
                line,
                y_range: (y_lo, y_hi),
                count,
            })
        }
    }
}

/// Log-likelihood difference Exponential − Pareto on the excesses above `top[0]`.
fn likelihood_comparison(top: &[f64]) -> f64 {
    let u = top[0];
    let exceed = &top[1..];
    let k = exceed.len() as f64;
    if k < 2.0 || u <= 0.0 {
        return f64::NAN;
    }
    let mean_excess = exceed.iter().map(|&v| v - u).sum::<f64>() / k;
    let ll_exp = if mean_excess > 0.0 { -k * mean_excess.ln() - k } else { f64::NAN };
    let sum_log = exceed.iter().map(|&v| (v / u).ln()).sum::<f64>();
    let alpha = k / sum_log;
    let ll_pow = k * alpha.ln() - (alpha + 1.0) * sum_log - k * u.ln();
    ll_exp - ll_pow
}

/// Fits an Exponential or Power tail over the empirical quantile range `range`.
///
/// Exponential: least squares on `(y, ln Ŝ(y))`. Power: Hill estimator on the
/// order statistics above the lower quantile, with a log-log regression over
/// the range as a cross-check. Confidence intervals come from a percentile
/// bootstrap over the samples.
pub fn fit_tail(samples: &[f64], kind: TailKind, range: (f64, f64), opts: &FitOptions) -> Result<TailFit> {
    if !(0.0 <= range.0 && range.0 < range.1 && range.1 <= 1.0) {
        return Err(Error::Fit(format!("invalid quantile range {range:?}")));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Fit("samples contain non-finite values".into()));
    }
    let n = samples.len();
    let (lo, hi) = rank_bounds(n, range);
    let mut data = samples.to_vec();
    let top = upper_order_stats(&mut data, lo);
    let core = fit_core(top, n, lo, hi, kind)?;
    let model_comparison = likelihood_comparison(top);
    let cross_check = match kind {
        TailKind::Power => -core.line.slope,
        TailKind::Exponential => fit_core(top, n, lo, hi, TailKind::Power).map_or(f64::NAN, |c| c.rate_or_index),
    };

    let mut boot: Vec<f64> = (0..opts.bootstrap)
        .into_par_iter()
        .filter_map(|b| {
            let mut g = rng::stream(opts.seed, "fit-bootstrap", b as u64);
            let mut resample: Vec<f64> = (0..n).map(|_| samples[g.random_range(0..n)]).collect();
            let top = upper_order_stats(&mut resample, lo);
            fit_core(top, n, lo, hi, kind).ok().map(|c| c.rate_or_index)
        })
        .collect();
    boot.sort_by(f64::total_cmp);
    let ci = if boot.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        (quantile_sorted(&boot, 0.025), quantile_sorted(&boot, 0.975))
    };

    Ok(TailFit {
        kind,
        rate_or_index: core.rate_or_index,
        prefactor: core.prefactor,
        fit_range: core.y_range,
        r_squared: core.line.r_squared,
        bootstrap_ci: ci,
        model_comparison,
        points_in_range: core.count,
        cross_check,
    })
}

/// Reads one named numeric column from a CSV file, skipping empty fields.
pub fn read_column<R: Read>(input: R, column: &str) -> Result<Vec<f64>> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers()?.clone();
    let idx = headers
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| Error::Fit(format!("column {column:?} not found (have {:?})", headers.iter().collect::<Vec<_>>())))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let field = rec.get(idx).unwrap_or("");
        if field.is_empty() {
            continue;
        }
        out.push(field.parse::<f64>().map_err(|e| Error::Fit(format!("bad value {field:?} in {column}: {e}")))?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct XPoint {
    pub x: f64,
    pub estimate: f64,
    pub std_err: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XMode {
    /// `ln P̂` against `x`.
    Additive,
    /// `ln[P̂ / (R(x)e^{−x})]` against `x`.
    Derivative,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct XScan {
    pub mode: XMode,
    pub slope: f64,
    pub slope_se: f64,
    pub intercept: f64,
    /// Two-sided 95% interval for the slope.
    pub slope_ci: (f64, f64),
    pub r_squared: f64,
    pub inconclusive: bool,
}

impl XScan {
    /// Slope below `bound` with one-sided 95% confidence.
    pub fn slope_below(&self, bound: f64) -> bool {
        self.slope + normal_quantile(0.95) * self.slope_se <= bound
    }

    /// Slope not significantly positive at one-sided 5%.
    pub fn slope_not_positive(&self) -> bool {
        self.slope - normal_quantile(0.95) * self.slope_se <= 0.0
    }
}

/// Weighted regression of log tail probabilities on the barrier offset.
///
/// Weights are `1/Var(ln P̂) ≈ P̂²/SE²`. The scan is flagged inconclusive when
/// the confidence intervals of the outermost points overlap.
pub fn scan_x_dependence(points: &[XPoint], renewal: Option<&RenewalTable>) -> Result<XScan> {
    if points.len() < 4 {
        return Err(Error::Fit(format!("need at least 4 x values, got {}", points.len())));
    }
    if points.iter().any(|p| !(p.estimate > 0.0)) {
        return Err(Error::Fit("tail estimates must be positive to take logarithms".into()));
    }
    let mode = if renewal.is_some() { XMode::Derivative } else { XMode::Additive };
    let xs: Vec<f64> = points.iter().map(|p| p.x).collect();
    let ys: Vec<f64> = points
        .iter()
        .map(|p| match renewal {
            Some(r) => p.estimate.ln() - r.eval(p.x).ln() + p.x,
            None => p.estimate.ln(),
        })
        .collect();
    let all_zero_se = points.iter().all(|p| p.std_err == 0.0);
    let weights: Vec<f64> = points.iter().map(|p| (p.estimate / p.std_err).powi(2)).collect();
    let fit = if all_zero_se {
        linear_fit(&xs, &ys)
    } else {
        weighted_linear_fit(&xs, &ys, Some(&weights))
    }
    .ok_or_else(|| Error::Fit("x values are degenerate".into()))?;
    let slope_se = if fit.slope_se.is_finite() { fit.slope_se } else { 0.0 };
    let z = normal_quantile(0.975);
    let first = points.iter().min_by(|a, b| a.x.total_cmp(&b.x)).unwrap();
    let last = points.iter().max_by(|a, b| a.x.total_cmp(&b.x)).unwrap();
    let overlap = (first.estimate - z * first.std_err) <= (last.estimate + z * last.std_err)
        && (last.estimate - z * last.std_err) <= (first.estimate + z * first.std_err);
    Ok(XScan {
        mode,
        slope: fit.slope,
        slope_se,
        intercept: fit.intercept,
        slope_ci: (fit.slope - z * slope_se, fit.slope + z * slope_se),
        r_squared: fit.r_squared,
        inconclusive: overlap && !all_zero_se,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Exp, Pareto};

    fn exp_samples(n: usize, rate: f64, seed: u64) -> Vec<f64> {
        let mut g = rng::stream(seed, "synthetic", 0);
        let d = Exp::new(rate).unwrap();
        (0..n).map(|_| d.sample(&mut g)).collect()
    }

    fn pareto_samples(n: usize, index: f64, seed: u64) -> Vec<f64> {
        let mut g = rng::stream(seed, "synthetic", 1);
        let d = Pareto::new(1.0, index).unwrap();
        (0..n).map(|_| d.sample(&mut g)).collect()
    }

    #[test]
    fn exponential_rate_recovered() {
        let s = exp_samples(200_000, 2.0, 1);
        let f = fit_tail(&s, TailKind::Exponential, (0.5, 0.999), &FitOptions { bootstrap: 50, seed: 1 }).unwrap();
        assert!((f.rate_or_index - 2.0).abs() < 0.05, "{f:?}");
        assert!(f.r_squared > 0.99);
        assert!(f.bootstrap_ci.0 < f.rate_or_index && f.rate_or_index < f.bootstrap_ci.1);
        assert!(f.model_comparison > 0.0);
    }

    #[test]
    fn pareto_index_recovered() {
        let s = pareto_samples(200_000, 1.5, 2);
        let f = fit_tail(&s, TailKind::Power, (0.99, 1.0), &FitOptions { bootstrap: 50, seed: 2 }).unwrap();
        assert!((f.rate_or_index - 1.5).abs() < 0.1, "{f:?}");
        assert!((f.cross_check - 1.5).abs() < 0.2);
        assert!(f.model_comparison < 0.0);
    }

    #[test]
    fn degenerate_samples_are_fit_errors() {
        let s = vec![3.0; 20_000];
        assert!(matches!(fit_tail(&s, TailKind::Exponential, (0.5, 0.99), &FitOptions::default()), Err(Error::Fit(_))));
        let few: Vec<f64> = (0..150).map(|i| i as f64).collect();
        assert!(fit_tail(&few, TailKind::Exponential, (0.5, 0.99), &FitOptions::default()).is_err());
    }

    #[test]
    fn synthetic_x_slopes() {
        let pts: Vec<XPoint> = (0..6)
            .map(|i| {
                let x = 0.5 * i as f64;
                let p = 0.3 * (-1.2 * x).exp();
                XPoint { x, estimate: p, std_err: 0.01 * p }
            })
            .collect();
        let s = scan_x_dependence(&pts, None).unwrap();
        assert!((s.slope + 1.2).abs() < 0.05);
        assert!(s.slope_below(-1.0));
        let flat: Vec<XPoint> = (0..5).map(|i| XPoint { x: i as f64, estimate: 0.1, std_err: 0.01 }).collect();
        let s = scan_x_dependence(&flat, None).unwrap();
        assert!(s.slope.abs() < 1e-12);
        assert!(s.inconclusive);
        assert!(s.slope_not_positive());
    }

    #[test]
    fn derivative_mode_removes_renewal_factor() {
        let r = RenewalTable::exact_lattice(1.0, 0.5, 20.0).unwrap();
        let pts: Vec<XPoint> = (1..=4)
            .map(|k| {
                let x = k as f64;
                let p = 0.2 * r.eval(x) * (-x).exp();
                XPoint { x, estimate: p, std_err: 0.05 * p }
            })
            .collect();
        let s = scan_x_dependence(&pts, Some(&r)).unwrap();
        assert!(s.slope.abs() < 1e-9);
        assert!(scan_x_dependence(&pts[..3], None).is_err());
    }

    #[test]
    fn column_reader() {
        let csv = "a,b\n1,\n2,3.5\n";
        assert_eq!(read_column(csv.as_bytes(), "b").unwrap(), vec![3.5]);
        assert!(read_column(csv.as_bytes(), "c").is_err());
    }
}
