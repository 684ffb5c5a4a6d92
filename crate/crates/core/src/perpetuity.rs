//! Perpetuities driven by the conditioned walk, their exponential moments, and
//! the excursion decomposition of the walk by level bands.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, Regime};
use crate::rng::{self, StreamRng};
use crate::stats::{linear_fit, LineFit, MeanVar};
use crate::walk::{hitting_probability, step_law, ConditionedSampler};

pub const DEFAULT_HORIZON: usize = 100_000;
/// Relative size of the last-decade increment above which a run is flagged.
pub const CONVERGENCE_TOL: f64 = 1e-6;
pub const PROBE_STARTS: [f64; 5] = [0.0, 1.0, 2.0, 5.0, 10.0];
const MGF_TARGET: f64 = 2.0;

/// Law of the multiplier attached to each step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QKind {
    Constant,
    /// `Q = 1 + 2 c_R Δ` with `Δ` the sibling functional of one spine step.
    SpineSiblingDelta { c_r: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerpetuityConfig {
    pub q_kind: QKind,
    pub start_x: f64,
    pub horizon: usize,
    pub epsilon: f64,
    #[serde(default)]
    pub keep_path: bool,
}

impl Default for PerpetuityConfig {
    fn default() -> Self {
        PerpetuityConfig { q_kind: QKind::Constant, start_x: 0.0, horizon: DEFAULT_HORIZON, epsilon: 0.1, keep_path: false }
    }
}

impl PerpetuityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Domain(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.start_x >= 0.0) {
            return Err(Error::Domain(format!("start_x must be ≥ 0, got {}", self.start_x)));
        }
        if let QKind::SpineSiblingDelta { c_r } = self.q_kind {
            if !(c_r > 0.0) {
                return Err(Error::Domain(format!("c_R must be > 0, got {c_r}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerpetuityRun {
    /// Partial sums after each step (only when requested).
    pub partial_sums: Vec<f64>,
    pub final_value: f64,
    /// Sum of the terms with index in `[horizon/10, horizon)`.
    pub tail_increment: f64,
    pub converged: bool,
}

fn draw_q<R: Rng + ?Sized>(model: &ModelSpec, kind: QKind, rng: &mut R) -> f64 {
    match kind {
        QKind::Constant => 1.0,
        QKind::SpineSiblingDelta { c_r } => {
            let delta: f64 = (1..model.offspring_count)
                .map(|_| {
                    let dv = model.sample_displacement(rng);
                    (1.0 + dv.max(0.0)) * (-dv).exp()
                })
                .sum();
            1.0 + 2.0 * c_r * delta
        }
    }
}

fn accumulate<F>(cfg: &PerpetuityConfig, mut term: F) -> Result<PerpetuityRun>
where
    F: FnMut() -> Result<f64>,
{
    let decade = cfg.horizon / 10;
    let mut sum = 0.0;
    let mut tail = 0.0;
    let mut path = Vec::with_capacity(if cfg.keep_path { cfg.horizon } else { 0 });
    for k in 0..cfg.horizon {
        let t = term()?;
        sum += t;
        if k >= decade {
            tail += t;
        }
        if cfg.keep_path {
            path.push(sum);
        }
    }
    Ok(PerpetuityRun {
        partial_sums: path,
        final_value: sum,
        tail_increment: tail,
        converged: tail <= CONVERGENCE_TOL * sum,
    })
}

/// `Σ_{k<horizon} R(S⁺_k) e^{−S⁺_k} Q_{k+1}` along one conditioned path.
pub fn simulate_perpetuity(
    model: &ModelSpec,
    sampler: &ConditionedSampler,
    cfg: &PerpetuityConfig,
    rng: &mut StreamRng,
) -> Result<PerpetuityRun> {
    cfg.validate()?;
    if model.regime != Regime::Boundary {
        return Err(Error::Domain("the conditioned perpetuity needs a boundary model".into()));
    }
    let renewal = sampler.renewal();
    let mut s = cfg.start_x;
    accumulate(cfg, || {
        let q = draw_q(model, cfg.q_kind, rng);
        let t = renewal.eval(s) * (-s).exp() * q;
        s = sampler.step(s, rng)?;
        Ok(t)
    })
}

/// `Σ_{k<horizon} e^{−S_k} 1{S_k ≥ 0} Q_{k+1}` along an unconditioned path with positive drift.
pub fn positive_drift_perpetuity(
    model: &ModelSpec,
    cfg: &PerpetuityConfig,
    rng: &mut StreamRng,
) -> Result<PerpetuityRun> {
    cfg.validate()?;
    if model.regime != Regime::Subcritical {
        return Err(Error::Domain("the positive-drift perpetuity needs a subcritical model".into()));
    }
    let step = step_law(model);
    let mut s = cfg.start_x;
    accumulate(cfg, || {
        let q = draw_q(model, cfg.q_kind, rng);
        let t = if s >= 0.0 { (-s).exp() * q } else { 0.0 };
        s += step.sample(rng);
        Ok(t)
    })
}

/// Final values of `replicas` independent perpetuities, picking the variant by regime.
pub fn perpetuity_samples(
    model: &ModelSpec,
    sampler: &ConditionedSampler,
    cfg: &PerpetuityConfig,
    replicas: u64,
    seed: u64,
    stage: &str,
) -> Result<Vec<PerpetuityRun>> {
    (0..replicas)
        .into_par_iter()
        .map(|i| {
            let mut g = rng::stream(seed, stage, i);
            match model.regime {
                Regime::Boundary => simulate_perpetuity(model, sampler, cfg, &mut g),
                Regime::Subcritical => positive_drift_perpetuity(model, cfg, &mut g),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MgfPoint {
    pub epsilon: f64,
    pub start_x: f64,
    pub mgf: f64,
    pub std_err: f64,
    pub upper_ci: f64,
    pub max_term_share: f64,
    pub unstable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub epsilon_star: f64,
    /// Largest upper 95% bound over starts at `ε*`.
    pub max_upper_ci: f64,
    pub max_mgf_at_half: f64,
    pub monotone_in_epsilon: bool,
    pub unconverged_runs: u64,
    pub points: Vec<MgfPoint>,
}

fn mgf_point(finals: &[f64], epsilon: f64, start_x: f64) -> MgfPoint {
    let terms: Vec<f64> = finals.iter().map(|f| (epsilon * f).exp()).collect();
    let acc = MeanVar::from_slice(&terms);
    let total: f64 = terms.iter().sum();
    let share = terms.iter().copied().fold(0.0, f64::max) / total;
    MgfPoint {
        epsilon,
        start_x,
        mgf: acc.mean,
        std_err: acc.std_err(),
        upper_ci: acc.mean + 1.96 * acc.std_err(),
        max_term_share: share,
        unstable: share > 0.5,
    }
}

/// Largest `ε` with `max_x Ê_x[e^{ε·F}] ≤ 2` over [`PROBE_STARTS`], found by
/// bisection on one set of samples per start.
pub fn probe_exponential_moment(
    model: &ModelSpec,
    sampler: &ConditionedSampler,
    cfg: &PerpetuityConfig,
    replicas: u64,
    seed: u64,
) -> Result<ProbeReport> {
    let mut finals = Vec::with_capacity(PROBE_STARTS.len());
    let mut unconverged = 0;
    for (i, &x) in PROBE_STARTS.iter().enumerate() {
        let c = PerpetuityConfig { start_x: x, keep_path: false, ..*cfg };
        let runs = perpetuity_samples(model, sampler, &c, replicas, seed, &format!("probe-{i}"))?;
        unconverged += runs.iter().filter(|r| !r.converged).count() as u64;
        finals.push(runs.into_iter().map(|r| r.final_value).collect::<Vec<f64>>());
    }
    let worst = |eps: f64| finals.iter().map(|f| mgf_point(f, eps, 0.0).mgf).fold(0.0, f64::max);
    let (mut lo, mut hi) = (0.0, 1.0);
    while worst(hi) <= MGF_TARGET && hi < 1e6 {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if worst(mid) <= MGF_TARGET {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let eps = lo;
    let grid: Vec<f64> = (0..=8).map(|i| eps * i as f64 / 8.0).collect();
    let mut points = Vec::new();
    for (f, &x) in finals.iter().zip(PROBE_STARTS.iter()) {
        for &e in &grid {
            points.push(mgf_point(f, e, x));
        }
    }
    let monotone = finals.iter().all(|f| grid.windows(2).all(|w| mgf_point(f, w[1], 0.0).mgf >= mgf_point(f, w[0], 0.0).mgf));
    let at = |e: f64, upper: bool| {
        finals
            .iter()
            .map(|f| {
                let p = mgf_point(f, e, 0.0);
                if upper { p.upper_ci } else { p.mgf }
            })
            .fold(0.0, f64::max)
    };
    Ok(ProbeReport {
        epsilon_star: eps,
        max_upper_ci: at(eps, true),
        max_mgf_at_half: at(eps / 2.0, false),
        monotone_in_epsilon: monotone,
        unconverged_runs: unconverged,
        points,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelStats {
    pub level: usize,
    pub band_lo: f64,
    pub mean_excursions: f64,
    /// `excursion_counts[m]` = replicas with exactly `m` excursions.
    pub excursion_counts: Vec<u64>,
    /// `local_time_counts[m]` = excursions with local time exactly `m`.
    pub local_time_counts: Vec<u64>,
    pub local_time_fit: Option<LineFit>,
    pub q_sum_fit: Option<LineFit>,
    /// Fraction of completed excursions after which the walk never came back.
    pub no_return: f64,
    pub no_return_se: f64,
    /// `1 − P(re-enter the band from (j+2)ℓ)` from the renewal function.
    pub no_return_oracle: f64,
    pub lag1_autocorrelation: f64,
    pub lag1_pairs: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExcursionStats {
    pub band_width: f64,
    pub horizon: usize,
    pub levels: Vec<LevelStats>,
}

#[derive(Default, Clone)]
struct LevelTrace {
    /// (local time, Q-sum, completed) per excursion, in order.
    excursions: Vec<(u64, f64, bool)>,
}

/// Excursion decomposition of conditioned paths by level bands `[jℓ, (j+1)ℓ)`.
///
/// An excursion at level `j` starts when the walk is in band `j` outside an
/// excursion and ends when the walk first reaches `[(j+2)ℓ, ∞)`. The band width
/// `ℓ` is the lattice span, or 1 for non-lattice steps.
pub fn excursion_anatomy(
    model: &ModelSpec,
    sampler: &ConditionedSampler,
    start_x: f64,
    q_kind: QKind,
    j_max: usize,
    horizon: usize,
    replicas: u64,
    seed: u64,
) -> Result<ExcursionStats> {
    if model.regime != Regime::Boundary {
        return Err(Error::Domain("excursion anatomy needs a boundary model".into()));
    }
    let width = sampler.step_law().span().unwrap_or(1.0);
    let levels = j_max + 1;
    let traces: Vec<Vec<LevelTrace>> = (0..replicas)
        .into_par_iter()
        .map(|i| {
            let mut g = rng::stream(seed, "excursions", i);
            let mut traces = vec![LevelTrace::default(); levels];
            let mut open: Vec<Option<(u64, f64)>> = vec![None; levels];
            let mut s = start_x;
            for _ in 0..horizon {
                let band = (s / width + 1e-9).floor() as usize;
                for j in 0..levels {
                    if s >= (j + 2) as f64 * width - 1e-9 {
                        if let Some((l, q)) = open[j].take() {
                            traces[j].excursions.push((l, q, true));
                        }
                    }
                }
                if band < levels {
                    let cur = open[band].get_or_insert((0, 0.0));
                    cur.0 += 1;
                    cur.1 += draw_q(model, q_kind, &mut g);
                }
                s = sampler.step(s, &mut g)?;
            }
            for j in 0..levels {
                if let Some((l, q)) = open[j].take() {
                    traces[j].excursions.push((l, q, false));
                }
            }
            Ok(traces)
        })
        .collect::<Result<_>>()?;

    let renewal = sampler.renewal();
    let mut out = Vec::with_capacity(levels);
    for j in 0..levels {
        let per: Vec<&LevelTrace> = traces.iter().map(|t| &t[j]).collect();
        let mut excursion_counts = Vec::new();
        let mut local = Vec::new();
        let mut q_sums = Vec::new();
        let (mut completed, mut last) = (0u64, 0u64);
        let (mut sxy, mut sxx, mut pairs) = (0.0, 0.0, 0u64);
        let mut later: Vec<(f64, f64)> = Vec::new();
        for t in &per {
            let m = t.excursions.len();
            if excursion_counts.len() <= m {
                excursion_counts.resize(m + 1, 0);
            }
            excursion_counts[m] += 1;
            for (idx, &(l, q, done)) in t.excursions.iter().enumerate() {
                if done {
                    let l = l as usize;
                    if local.len() <= l {
                        local.resize(l + 1, 0u64);
                    }
                    local[l] += 1;
                    q_sums.push(q);
                    completed += 1;
                    if idx + 1 == m {
                        last += 1;
                    }
                }
            }
            let after_first: Vec<f64> = t.excursions.iter().skip(1).filter(|e| e.2).map(|e| e.1).collect();
            for w in after_first.windows(2) {
                later.push((w[0], w[1]));
            }
        }
        if !later.is_empty() {
            let all: Vec<f64> = later.iter().flat_map(|p| [p.0, p.1]).collect();
            let mean = all.iter().sum::<f64>() / all.len() as f64;
            for &(a, b) in &later {
                sxy += (a - mean) * (b - mean);
                sxx += 0.5 * ((a - mean).powi(2) + (b - mean).powi(2));
                pairs += 1;
            }
        }
        let total_exc: u64 = excursion_counts.iter().enumerate().map(|(m, c)| m as u64 * c).sum();
        let no_return = if completed > 0 { last as f64 / completed as f64 } else { f64::NAN };
        let band_lo = j as f64 * width;
        let oracle = hitting_probability(renewal, (j + 2) as f64 * width, (j + 1) as f64 * width)
            .map(|p| 1.0 - p)
            .unwrap_or(f64::NAN);
        out.push(LevelStats {
            level: j,
            band_lo,
            mean_excursions: total_exc as f64 / replicas.max(1) as f64,
            excursion_counts,
            local_time_fit: survival_fit(&counts_to_samples(&local)),
            q_sum_fit: survival_fit(&q_sums),
            local_time_counts: local,
            no_return,
            no_return_se: (no_return * (1.0 - no_return) / completed.max(1) as f64).sqrt(),
            no_return_oracle: oracle,
            lag1_autocorrelation: if sxx > 0.0 { sxy / sxx } else { 0.0 },
            lag1_pairs: pairs,
        });
    }
    Ok(ExcursionStats { band_width: width, horizon, levels: out })
}

fn counts_to_samples(counts: &[u64]) -> Vec<f64> {
    counts.iter().enumerate().flat_map(|(m, &c)| std::iter::repeat_n(m as f64, c as usize)).collect()
}

/// Least-squares line through `(m, ln P(X > m))` over the support points with
/// at least 10 exceedances.
pub fn survival_fit(samples: &[f64]) -> Option<LineFit> {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n < 20 {
        return None;
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut i = 0;
    while i < n {
        let v = s[i];
        let mut j = i;
        while j < n && s[j] == v {
            j += 1;
        }
        let above = n - j;
        if above < 10 {
            break;
        }
        xs.push(v);
        ys.push((above as f64 / n as f64).ln());
        i = j;
    }
    if xs.len() > 200 {
        // thin continuous data to evenly spaced quantiles
        let step = xs.len() / 200;
        xs = xs.into_iter().step_by(step).collect();
        ys = ys.into_iter().step_by(step).collect();
    }
    linear_fit(&xs, &ys)
}

pub fn write_levels_csv<W: Write>(stats: &ExcursionStats, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["j", "mean_zeta", "L_slope", "L_r2", "Q1_slope", "Q1_intercept", "Q1_r2", "no_return", "no_return_oracle"])?;
    let f = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    for l in &stats.levels {
        w.write_record([
            l.level.to_string(),
            l.mean_excursions.to_string(),
            f(l.local_time_fit.map(|x| x.slope)),
            f(l.local_time_fit.map(|x| x.r_squared)),
            f(l.q_sum_fit.map(|x| x.slope)),
            f(l.q_sum_fit.map(|x| x.intercept)),
            f(l.q_sum_fit.map(|x| x.r_squared)),
            l.no_return.to_string(),
            l.no_return_oracle.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_finals_csv<W: Write>(runs: &[PerpetuityRun], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["replica", "final", "tail_increment", "converged"])?;
    for (i, r) in runs.iter().enumerate() {
        w.write_record([i.to_string(), r.final_value.to_string(), r.tail_increment.to_string(), r.converged.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::walk::{estimate_renewal, RenewalConfig};
    use std::sync::Arc;

    fn lattice() -> (ModelSpec, ConditionedSampler) {
        let m = ModelSpec::lattice_boundary();
        let t = estimate_renewal(&step_law(&m), &RenewalConfig::default()).unwrap().table;
        (m, ConditionedSampler::new(step_law(&m), Arc::new(t)))
    }

    #[test]
    fn empty_horizon_sums_to_zero() {
        let (m, s) = lattice();
        let cfg = PerpetuityConfig { horizon: 0, ..Default::default() };
        let mut g = rng::stream(0, "p", 0);
        assert_eq!(simulate_perpetuity(&m, &s, &cfg, &mut g).unwrap().final_value, 0.0);
        let sub = ModelSpec::gaussian_subcritical(1.0).unwrap();
        assert_eq!(positive_drift_perpetuity(&sub, &cfg, &mut g).unwrap().final_value, 0.0);
    }

    #[test]
    fn partial_sums_are_nondecreasing() {
        let (m, s) = lattice();
        let cfg = PerpetuityConfig {
            horizon: 2000,
            keep_path: true,
            q_kind: QKind::SpineSiblingDelta { c_r: 2.0 },
            ..Default::default()
        };
        let mut g = rng::stream(1, "p", 0);
        let run = simulate_perpetuity(&m, &s, &cfg, &mut g).unwrap();
        assert_eq!(run.partial_sums.len(), 2000);
        assert!(run.partial_sums.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn high_start_gives_small_sums() {
        // the drifting walk almost never comes back from 50
        let (_, s) = lattice();
        let cfg = PerpetuityConfig { start_x: 50.0, horizon: 5000, ..Default::default() };
        let sub = ModelSpec::gaussian_subcritical(1.0).unwrap();
        let runs = perpetuity_samples(&sub, &s, &cfg, 500, 2, "hi").unwrap();
        assert!(runs.iter().filter(|r| r.final_value < 1.0).count() as f64 >= 0.99 * 500.0);
    }

    #[test]
    fn conditioned_returns_from_high_start_are_polynomially_likely() {
        // from x the conditioned walk re-enters [0, 2a) with probability 1 − R(x−2a)/R(x) ≈ 2a/x,
        // so a sum of order one happens at roughly that rate
        let (m, s) = lattice();
        let a = m.lattice_span().unwrap();
        let cfg = PerpetuityConfig { start_x: 50.0, horizon: 5000, ..Default::default() };
        let runs = perpetuity_samples(&m, &s, &cfg, 2000, 2, "hi").unwrap();
        let big = runs.iter().filter(|r| r.final_value >= 1.0).count() as f64 / 2000.0;
        let enter = hitting_probability(s.renewal(), 50.0, 2.0 * a).unwrap();
        assert!(big > 0.0 && big <= enter + 3.0 * (enter / 2000.0).sqrt(), "{big} vs {enter}");
    }

    #[test]
    fn zero_epsilon_mgf_is_one() {
        let p = mgf_point(&[1.0, 5.0, 9.0], 0.0, 0.0);
        assert_eq!(p.mgf, 1.0);
        assert!(!p.unstable);
        let p = mgf_point(&[0.0, 0.0, 100.0], 1.0, 0.0);
        assert!(p.unstable);
    }

    #[test]
    fn lattice_no_return_matches_renewal_oracle() {
        let (m, s) = lattice();
        let stats = excursion_anatomy(&m, &s, 0.0, QKind::Constant, 3, 20_000, 2000, 3).unwrap();
        for l in &stats.levels {
            assert!((l.no_return_oracle - 2.0 / (l.level as f64 + 3.0)).abs() < 1e-12);
            assert!((l.no_return - l.no_return_oracle).abs() < 3.0 * l.no_return_se + 0.01, "{l:?}");
        }
    }

    #[test]
    fn unvisited_levels_have_no_excursions() {
        let (m, s) = lattice();
        let stats = excursion_anatomy(&m, &s, 0.0, QKind::Constant, 60, 10, 50, 3).unwrap();
        assert_eq!(stats.levels[60].mean_excursions, 0.0);
    }

    #[test]
    fn survival_fit_recovers_geometric_slope() {
        let samples: Vec<f64> = (0..100_000u64).map(|i| ((i as f64 + 0.5) / 1e5).ln() / 0.5f64.ln()).map(f64::floor).collect();
        let f = survival_fit(&samples).unwrap();
        assert!((f.slope - 0.5f64.ln()).abs() < 0.01);
    }
}
