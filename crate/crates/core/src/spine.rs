//! Spine construction under the size-biased measures and the importance
//! samplers built on it.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{simulate_replica, Barrier, KillConfig, KILL_EPS};
use crate::error::{Error, Result};
use crate::model::{ModelSpec, Regime};
use crate::rng::{self, child_key};
use crate::stats::{effective_sample_size, quantile_sorted, MeanVar};
use crate::walk::{step_law, ConditionedSampler, RenewalTable};

/// Below this effective sample size an estimate is flagged unreliable.
pub const MIN_ESS: f64 = 30.0;

/// One draw of the tilted reproduction at spine height `y`.
pub fn spine_reproduce<R: Rng + ?Sized>(
    model: &ModelSpec,
    sampler: &ConditionedSampler,
    y: f64,
    rng: &mut R,
) -> Result<(f64, Vec<f64>)> {
    if !(y >= -KILL_EPS) {
        return Err(Error::Domain(format!("spine height must be ≥ 0, got {y}")));
    }
    let next = sampler.step(y, rng)?;
    let siblings = (1..model.offspring_count).map(|_| model.sample_displacement(rng)).collect();
    Ok((next - y, siblings))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpineRealization {
    pub replica: u64,
    /// Heights `x + V(w_k)`, `k = 0..=n`.
    pub spine_positions: Vec<f64>,
    /// Displacements of the spine's siblings, relative to their parent, per generation.
    pub sibling_bundles: Vec<Vec<f64>>,
    /// `Σ_{siblings} [1 + (ΔV)₊] e^{−ΔV}` per generation.
    pub sibling_deltas: Vec<f64>,
    pub d_value: f64,
    pub a_n: f64,
    pub weight: f64,
    /// Expected derivative mass discarded by pruning sibling subtrees.
    pub pruned_d: f64,
}

fn check_factorised(model: &ModelSpec) -> Result<()> {
    // deterministic child count with iid displacements is all the built-ins provide
    if model.offspring_count < 1 {
        return Err(Error::Domain("spine needs at least one child per particle".into()));
    }
    Ok(())
}

fn barrier_offset(cfg: &KillConfig) -> Result<f64> {
    match cfg.barrier {
        Barrier::At(x) => Ok(x),
        Barrier::Disabled => Err(Error::Domain("spine sampling needs a finite barrier".into())),
    }
}

fn sibling_key(replica_key: u64, generation: usize, sibling: usize) -> u64 {
    child_key(child_key(replica_key, generation as u64), sibling as u64)
}

/// Builds the spine and evaluates the truncated derivative martingale on the
/// realised tree; sibling subtrees are run through the engine.
pub fn simulate_spine_replica(
    model: &ModelSpec,
    sampler: &ConditionedSampler,
    cfg: &KillConfig,
    key: u64,
) -> Result<SpineRealization> {
    check_factorised(model)?;
    let x = barrier_offset(cfg)?;
    let renewal = sampler.renewal();
    let n = cfg.generations as usize;
    let mut g = rng::stream_from_key(key);
    let mut positions = Vec::with_capacity(n + 1);
    let mut bundles = Vec::with_capacity(n);
    let mut deltas = Vec::with_capacity(n);
    positions.push(x);
    let (mut d_value, mut a_n, mut pruned_d) = (0.0, 0.0, 0.0);
    for k in 1..=n {
        let y = positions[k - 1];
        let (step, siblings) = spine_reproduce(model, sampler, y, &mut g)?;
        positions.push(y + step);
        deltas.push(siblings.iter().map(|&dv: &f64| (1.0 + dv.max(0.0)) * (-dv).exp()).sum());
        for (j, &dv) in siblings.iter().enumerate() {
            let h = y + dv;
            if h < -KILL_EPS {
                continue;
            }
            let h = h.max(0.0);
            a_n += renewal.eval(h) * (-h).exp();
            let sub = KillConfig { barrier: Barrier::At(h), generations: (n - k) as u32, ..*cfg };
            let snap = simulate_replica(model, renewal, &sub, sibling_key(key, k, j))
                .map_err(|e| e.in_stage(format!("spine sibling at generation {k}")))?;
            d_value += snap.d_trunc;
            pruned_d += snap.pruned_d;
        }
        bundles.push(siblings);
    }
    let top = positions[n];
    d_value += renewal.eval(top) * (-top).exp();
    let weight = renewal.eval(x) * (-x).exp() / d_value;
    Ok(SpineRealization {
        replica: 0,
        spine_positions: positions,
        sibling_bundles: bundles,
        sibling_deltas: deltas,
        d_value,
        a_n,
        weight,
        pruned_d,
    })
}

pub fn run_spine_batch(
    model: &ModelSpec,
    sampler: &ConditionedSampler,
    cfg: &KillConfig,
    replicas: u64,
    seed: u64,
) -> Result<Vec<SpineRealization>> {
    (0..replicas)
        .into_par_iter()
        .map(|i| {
            let key = rng::replica_key(seed, rng::stage_tag("spine"), i);
            simulate_spine_replica(model, sampler, cfg, key).map(|mut r| {
                r.replica = i;
                r
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TailPoint {
    pub y: f64,
    pub estimate: f64,
    pub std_err: f64,
    pub ess: f64,
    pub unreliable: bool,
    pub naive_estimate: Option<f64>,
    pub naive_std_err: Option<f64>,
}

impl TailPoint {
    pub fn ci(&self) -> (f64, f64) {
        (self.estimate - 1.96 * self.std_err, self.estimate + 1.96 * self.std_err)
    }
}

/// `scale · Ê[1{V > y}/V]` for each `y`, where `values[i]` is `None` when the
/// replica contributes nothing.
fn weighted_tail(values: &[Option<f64>], scale: f64, y_grid: &[f64]) -> Vec<TailPoint> {
    let n = values.len() as f64;
    y_grid
        .iter()
        .map(|&y| {
            let terms: Vec<f64> = values
                .iter()
                .map(|v| match *v {
                    Some(v) if v > y => scale / v,
                    _ => 0.0,
                })
                .collect();
            let acc = MeanVar::from_slice(&terms);
            let ess = effective_sample_size(terms.iter().copied());
            TailPoint {
                y,
                estimate: acc.mean,
                std_err: if n > 1.0 { acc.std_err() } else { f64::NAN },
                ess,
                unreliable: ess < MIN_ESS,
                naive_estimate: None,
                naive_std_err: None,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TailEstimate {
    pub points: Vec<TailPoint>,
    /// `Ê[weight]`, which estimates `P(D > 0)` (resp. `P(W > 0)`).
    pub total_mass: MeanVar,
    /// Mean pruning certificate relative to the mean realised value.
    pub relative_certificate: f64,
}

impl TailEstimate {
    /// Fills the naive columns from plain Monte Carlo samples of the same quantity.
    pub fn attach_naive(&mut self, naive: &[f64]) {
        let n = naive.len() as f64;
        for p in &mut self.points {
            let hits = naive.iter().filter(|&&v| v > p.y).count() as f64;
            let q = hits / n;
            p.naive_estimate = Some(q);
            p.naive_std_err = Some((q * (1.0 - q) / n).sqrt());
        }
    }
}

/// Importance-sampling estimate of `P(D_n^{(x)} > y)` from spine replicas.
pub fn is_tail_estimate(
    model: &ModelSpec,
    sampler: &ConditionedSampler,
    cfg: &KillConfig,
    y_grid: &[f64],
    replicas: u64,
    seed: u64,
) -> Result<TailEstimate> {
    check_grid(y_grid)?;
    let x = barrier_offset(cfg)?;
    let spines = run_spine_batch(model, sampler, cfg, replicas, seed)?;
    let scale = sampler.renewal().eval(x) * (-x).exp();
    let values: Vec<Option<f64>> = spines.iter().map(|s| Some(s.d_value)).collect();
    let total_mass: MeanVar = spines.iter().map(|s| s.weight).collect();
    let mean_d = MeanVar::from_iter(spines.iter().map(|s| s.d_value)).mean;
    let cert = MeanVar::from_iter(spines.iter().map(|s| s.pruned_d)).mean;
    Ok(TailEstimate { points: weighted_tail(&values, scale, y_grid), total_mass, relative_certificate: cert / mean_d })
}

/// Importance-sampling estimate of `P(W_n^{(x)} > y)` using the additive spine,
/// which follows the unconditioned associated walk.
pub fn additive_spine_estimate(
    model: &ModelSpec,
    renewal: &RenewalTable,
    cfg: &KillConfig,
    y_grid: &[f64],
    replicas: u64,
    seed: u64,
) -> Result<TailEstimate> {
    if model.regime != Regime::Subcritical {
        return Err(Error::Domain("the additive spine needs a subcritical model".into()));
    }
    check_grid(y_grid)?;
    check_factorised(model)?;
    let x = barrier_offset(cfg)?;
    let step = step_law(model);
    let n = cfg.generations as usize;
    let draws: Vec<Result<Option<(f64, f64)>>> = (0..replicas)
        .into_par_iter()
        .map(|i| {
            let key = rng::replica_key(seed, rng::stage_tag("additive-spine"), i);
            let mut g = rng::stream_from_key(key);
            let (mut y, mut w, mut pruned) = (x, 0.0, 0.0);
            for k in 1..=n {
                let parent = y;
                y += step.sample(&mut g);
                if y < -KILL_EPS {
                    return Ok(None);
                }
                for j in 0..model.offspring_count - 1 {
                    let h = parent + model.sample_displacement(&mut g);
                    if h < -KILL_EPS {
                        continue;
                    }
                    let sub = KillConfig { barrier: Barrier::At(h.max(0.0)), generations: (n - k) as u32, ..*cfg };
                    let snap = simulate_replica(model, renewal, &sub, sibling_key(key, k, j))
                        .map_err(|e| e.in_stage(format!("additive spine sibling at generation {k}")))?;
                    w += snap.w_trunc;
                    pruned += snap.pruned_w;
                }
            }
            w += (-y.max(0.0)).exp();
            Ok(Some((w, pruned)))
        })
        .collect();
    let draws: Vec<Option<(f64, f64)>> = draws.into_iter().collect::<Result<_>>()?;
    let scale = (-x).exp();
    let values: Vec<Option<f64>> = draws.iter().map(|d| d.map(|(w, _)| w)).collect();
    let total_mass: MeanVar = values.iter().map(|v| v.map_or(0.0, |w| scale / w)).collect();
    let alive: Vec<(f64, f64)> = draws.iter().flatten().copied().collect();
    let mean_w = MeanVar::from_iter(alive.iter().map(|p| p.0)).mean;
    let cert = MeanVar::from_iter(alive.iter().map(|p| p.1)).mean;
    Ok(TailEstimate {
        points: weighted_tail(&values, scale, y_grid),
        total_mass,
        relative_certificate: if mean_w > 0.0 { cert / mean_w } else { 0.0 },
    })
}

fn check_grid(y_grid: &[f64]) -> Result<()> {
    if y_grid.is_empty() || y_grid.iter().any(|&y| !(y > 0.0)) || y_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Domain("y grid must be positive and increasing".into()));
    }
    Ok(())
}

/// Geometric grid from the naive median to `stretch` times the naive 99.9th percentile.
pub fn default_y_grid(naive: &[f64], points: usize, stretch: f64) -> Result<Vec<f64>> {
    let mut s: Vec<f64> = naive.iter().copied().filter(|v| *v > 0.0).collect();
    if s.len() < 10 || points < 2 {
        return Err(Error::Estimation("too few positive naive samples for a y grid".into()));
    }
    s.sort_by(f64::total_cmp);
    let lo = quantile_sorted(&s, 0.5);
    let hi = stretch * quantile_sorted(&s, 0.999);
    let r = (hi / lo).ln() / (points - 1) as f64;
    Ok((0..points).map(|i| lo * (r * i as f64).exp()).collect())
}

pub fn write_tail_csv<W: Write>(points: &[TailPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["y", "estimate", "SE", "ESS", "naive_estimate", "naive_SE"])?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    for p in points {
        w.write_record([
            p.y.to_string(),
            p.estimate.to_string(),
            p.std_err.to_string(),
            p.ess.to_string(),
            opt(p.naive_estimate),
            opt(p.naive_std_err),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::run_batch;
    use crate::stats::{ks_critical, ks_statistic, ks_two_sample};
    use crate::walk::{estimate_renewal, simulate_conditioned_walk, RenewalConfig};
    use std::sync::Arc;

    fn lattice() -> (ModelSpec, ConditionedSampler) {
        let m = ModelSpec::lattice_boundary();
        let t = estimate_renewal(&step_law(&m), &RenewalConfig::default()).unwrap().table;
        let s = ConditionedSampler::new(step_law(&m), Arc::new(t));
        (m, s)
    }

    #[test]
    fn root_only_spine() {
        let (m, s) = lattice();
        let a = m.lattice_span().unwrap();
        let r = simulate_spine_replica(&m, &s, &KillConfig::killed(a, 0), 1).unwrap();
        assert!((r.d_value - 2.0 * (-a).exp()).abs() < 1e-15);
        assert!((r.weight - 1.0).abs() < 1e-15);
    }

    #[test]
    fn forced_first_step_from_zero() {
        let (m, s) = lattice();
        let a = m.lattice_span().unwrap();
        let mut g = rng::stream(1, "t", 0);
        for _ in 0..100 {
            let (step, sib) = spine_reproduce(&m, &s, 0.0, &mut g).unwrap();
            assert_eq!(step, a);
            assert_eq!(sib.len(), 1);
            assert!(sib[0] == a || sib[0] == -a);
        }
        assert!(spine_reproduce(&m, &s, -1.0, &mut g).is_err());
    }

    #[test]
    fn spine_positions_match_conditioned_walk() {
        let (m, s) = lattice();
        let a = m.lattice_span().unwrap();
        let cfg = KillConfig::killed(a, 6).with_v_cap(f64::INFINITY);
        let spines = run_spine_batch(&m, &s, &cfg, 5000, 4).unwrap();
        let walks: Vec<f64> = (0..5000)
            .map(|i| {
                let mut g = rng::stream(9, "walk", i);
                simulate_conditioned_walk(&s, a, 6, &mut g).unwrap().positions[6]
            })
            .collect();
        let tops: Vec<f64> = spines.iter().map(|r| r.spine_positions[6]).collect();
        assert!(tops.iter().all(|&p| p >= 0.0));
        // lattice laws are discrete; compare the two-sample statistic loosely
        assert!(ks_two_sample(&tops, &walks) < 2.0 * ks_critical(2500.0, 0.01));
        let sib: Vec<f64> = spines.iter().flat_map(|r| r.sibling_bundles.concat()).collect();
        let up = sib.iter().filter(|&&v| v > 0.0).count() as f64 / sib.len() as f64;
        let crate::model::DisplacementParams::Lattice { up_prob, .. } = m.params else { unreachable!() };
        let se = (up_prob * (1.0 - up_prob) / sib.len() as f64).sqrt();
        assert!((up - up_prob).abs() < 4.0 * se);
    }

    #[test]
    fn change_of_measure_total_mass() {
        let (m, s) = lattice();
        let a = m.lattice_span().unwrap();
        let cfg = KillConfig::killed(a, 6).with_v_cap(f64::INFINITY);
        let est = is_tail_estimate(&m, &s, &cfg, &[0.01], 20_000, 5).unwrap();
        let naive = run_batch(&m, s.renewal(), &cfg, 50_000, 6).unwrap();
        let p = naive.snapshots.iter().filter(|r| r.d_trunc > 0.0).count() as f64 / 5e4;
        let se = (p * (1.0 - p) / 5e4).sqrt() + est.total_mass.std_err();
        assert!((est.total_mass.mean - p).abs() < 3.0 * se, "{} vs {p}", est.total_mass.mean);
        let g_min: MeanVar = naive.snapshots.iter().map(|r| r.d_trunc.min(1.0)).collect();
        let spines = run_spine_batch(&m, &s, &cfg, 20_000, 7).unwrap();
        let scale = s.renewal().eval(a) * (-a).exp();
        let is_min: MeanVar = spines.iter().map(|r| r.d_value.min(1.0) * scale / r.d_value).collect();
        assert!((is_min.mean - g_min.mean).abs() < 3.0 * (is_min.std_err() + g_min.std_err()));
    }

    #[test]
    fn gaussian_spine_step_far_from_barrier_is_nearly_untilted() {
        // the residual tilt at height y is O(1/R(y)); pick a sample size that cannot resolve it
        let m = ModelSpec::gaussian_boundary();
        let step = step_law(&m);
        let t = estimate_renewal(&step, &RenewalConfig { replicas: 20_000, ..Default::default() }).unwrap().table;
        let s = ConditionedSampler::new(step, Arc::new(t));
        let draws = 4000;
        let crit = ks_critical(draws as f64, 0.05);
        let target = s.target_cdf(50.0).unwrap();
        let gap = (0..4000)
            .map(|i| -8.0 + i as f64 * 0.004)
            .map(|z| (target(50.0 + z) - step.cdf(z)).abs())
            .fold(0.0, f64::max);
        assert!(gap < crit / 2.0, "gap {gap}");
        let mut g = rng::stream(3, "far", 0);
        let steps: Vec<f64> = (0..draws).map(|_| spine_reproduce(&m, &s, 50.0, &mut g).unwrap().0).collect();
        assert!(ks_statistic(&steps, |z| step.cdf(z)) < crit);
        assert!(ks_statistic(&steps, |z| target(50.0 + z)) < crit);
    }

    #[test]
    fn additive_spine_root_only() {
        let m = ModelSpec::lattice_subcritical(0.8).unwrap();
        let t = estimate_renewal(&step_law(&m), &RenewalConfig::default()).unwrap().table;
        let x = 0.8;
        let y = 0.3;
        let e = additive_spine_estimate(&m, &t, &KillConfig::killed(x, 0), &[y, 0.5], 100, 1).unwrap();
        assert!((e.points[0].estimate - 1.0).abs() < 1e-12);
        assert_eq!(e.points[1].estimate, 0.0);
    }

    #[test]
    fn grid_helper_and_validation() {
        let naive: Vec<f64> = (1..=1000).map(|i| i as f64).collect();
        let g = default_y_grid(&naive, 5, 20.0).unwrap();
        assert!((g[0] - 500.5).abs() < 1e-9);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
        assert!(check_grid(&[1.0, 0.5]).is_err());
    }
}
