//! Depth-first simulation of the branching random walk with killing below a
//! barrier and pruning above a cap.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::rng::{self, child_key, node_rng};
use crate::stats::{wilson_interval, MeanVar};
use crate::walk::RenewalTable;

/// Heights this far below zero are still treated as zero (round-off of lattice sums).
pub const KILL_EPS: f64 = 1e-9;
pub const DEFAULT_BUDGET: u64 = 100_000_000;
/// Default pruning height above the barrier offset.
pub const DEFAULT_PRUNE_GAP: f64 = 8.0;

/// Killing barrier: particles with `x + V(u) < 0` are removed, or nothing is.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Barrier {
    At(f64),
    Disabled,
}

impl Barrier {
    /// Barrier offset, `∞` when killing is disabled.
    pub fn offset(self) -> f64 {
        match self {
            Barrier::At(x) => x,
            Barrier::Disabled => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KillConfig {
    pub barrier: Barrier,
    pub generations: u32,
    /// Internal particles at height `≥ v_cap` are pruned (height is `x + V(u)`,
    /// or `V(u)` without a barrier).
    pub v_cap: f64,
    pub budget: u64,
}

impl KillConfig {
    pub fn killed(x: f64, generations: u32) -> Self {
        KillConfig { barrier: Barrier::At(x), generations, v_cap: x + DEFAULT_PRUNE_GAP, budget: DEFAULT_BUDGET }
    }

    pub fn unkilled(generations: u32) -> Self {
        KillConfig { barrier: Barrier::Disabled, generations, v_cap: f64::INFINITY, budget: DEFAULT_BUDGET }
    }

    pub fn with_v_cap(mut self, v_cap: f64) -> Self {
        self.v_cap = v_cap;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let Barrier::At(x) = self.barrier {
            if !(x >= 0.0 && x.is_finite()) {
                return Err(Error::Domain(format!("barrier offset must be finite and ≥ 0, got {x}")));
            }
            if !(self.v_cap > x) {
                return Err(Error::Domain(format!("v_cap = {} must exceed x = {x}", self.v_cap)));
            }
        } else if !(self.v_cap > 0.0) {
            return Err(Error::Domain(format!("v_cap = {} must be positive", self.v_cap)));
        }
        Ok(())
    }
}

/// One replica's martingale values at generation `n`.
///
/// The untruncated sums are only available when killing is disabled; the
/// truncated sums are then zero (the barrier sits at infinity).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MartingaleSnapshot {
    pub replica: u64,
    pub n: u32,
    pub x: f64,
    pub w: Option<f64>,
    pub d: Option<f64>,
    pub w_trunc: f64,
    pub d_trunc: f64,
    pub min_position: f64,
    pub pruned_w: f64,
    pub pruned_d: f64,
    pub alive: u64,
    pub pruned: u64,
    pub killed: u64,
}

impl MartingaleSnapshot {
    /// `W` plus the mass parked at the pruning line: the additive martingale
    /// stopped at that line.
    pub fn w_stopped(&self) -> Option<f64> {
        self.w.map(|w| w + self.pruned_w)
    }

    pub fn d_stopped(&self) -> Option<f64> {
        self.d.map(|d| d + self.pruned_d)
    }
}

/// Simulates the tree rooted at key `key` under `cfg`.
pub fn simulate_replica(
    model: &ModelSpec,
    renewal: &RenewalTable,
    cfg: &KillConfig,
    key: u64,
) -> Result<MartingaleSnapshot> {
    let x = cfg.barrier.offset();
    let killing = matches!(cfg.barrier, Barrier::At(_));
    let base = if killing { x } else { 0.0 };
    let n = cfg.generations;

    let (mut w, mut d, mut w_trunc, mut d_trunc) = (0.0, 0.0, 0.0, 0.0);
    let (mut pruned_w, mut pruned_d) = (0.0, 0.0);
    let (mut alive, mut pruned, mut killed, mut visits) = (0u64, 0u64, 0u64, 0u64);
    let mut min_position = 0.0f64;

    let mut stack: Vec<(u64, u32, f64)> = Vec::with_capacity(2 * n as usize + 2);
    stack.push((key, 0, 0.0));
    while let Some((node, depth, v)) = stack.pop() {
        visits += 1;
        if visits > cfg.budget {
            return Err(Error::Resource { budget: cfg.budget, visits, alive, pruned, killed });
        }
        let height = base + v;
        if depth == n {
            alive += 1;
            if killing {
                let eh = (-height).exp();
                w_trunc += eh;
                d_trunc += renewal.eval(height) * eh;
            } else {
                let e = (-v).exp();
                w += e;
                d += v * e;
            }
            continue;
        }
        if height >= cfg.v_cap {
            pruned += 1;
            let eh = (-height).exp();
            pruned_w += eh;
            pruned_d += if killing { renewal.eval(height) * eh } else { height * eh };
            continue;
        }
        let mut g = node_rng(node);
        for c in 0..model.offspring_count {
            let child = v + model.sample_displacement(&mut g);
            min_position = min_position.min(child);
            if killing && base + child < -KILL_EPS {
                killed += 1;
                continue;
            }
            stack.push((child_key(node, c as u64), depth + 1, child));
        }
    }

    Ok(MartingaleSnapshot {
        replica: 0,
        n,
        x,
        w: (!killing).then_some(w),
        d: (!killing).then_some(d),
        w_trunc,
        d_trunc,
        min_position,
        pruned_w,
        pruned_d,
        alive,
        pruned,
        killed,
    })
}

/// Root key of replica `index` in the engine stage.
pub fn replica_root(seed: u64, index: u64) -> u64 {
    rng::replica_key(seed, rng::stage_tag("engine"), index)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Batch {
    pub snapshots: Vec<MartingaleSnapshot>,
    /// Replicas discarded because they exceeded the particle budget.
    pub over_budget: Vec<u64>,
}

/// Runs `replicas` replicas on the current rayon pool, in replica order.
pub fn run_batch(
    model: &ModelSpec,
    renewal: &RenewalTable,
    cfg: &KillConfig,
    replicas: u64,
    seed: u64,
) -> Result<Batch> {
    cfg.validate()?;
    let results: Vec<Result<MartingaleSnapshot>> = (0..replicas)
        .into_par_iter()
        .map(|i| {
            simulate_replica(model, renewal, cfg, replica_root(seed, i)).map(|mut s| {
                s.replica = i;
                s
            })
        })
        .collect();
    let mut snapshots = Vec::with_capacity(results.len());
    let mut over_budget = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(s) => snapshots.push(s),
            Err(Error::Resource { .. }) => over_budget.push(i as u64),
            Err(e) => return Err(e),
        }
    }
    Ok(Batch { snapshots, over_budget })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchSummary {
    pub replicas: u64,
    pub over_budget: u64,
    pub n: u32,
    pub x: f64,
    pub w: Option<MeanVar>,
    pub d: Option<MeanVar>,
    pub w_trunc: MeanVar,
    pub d_trunc: MeanVar,
    pub pruned_w: MeanVar,
    pub pruned_d: MeanVar,
    pub alive: MeanVar,
    pub extinct_fraction: f64,
}

impl Batch {
    pub fn summary(&self) -> BatchSummary {
        let s = &self.snapshots;
        let col = |f: &dyn Fn(&MartingaleSnapshot) -> f64| s.iter().map(f).collect::<MeanVar>();
        let first = s.first();
        BatchSummary {
            replicas: s.len() as u64,
            over_budget: self.over_budget.len() as u64,
            n: first.map_or(0, |f| f.n),
            x: first.map_or(f64::NAN, |f| f.x),
            w: first.and_then(|f| f.w).map(|_| col(&|r| r.w.unwrap_or(f64::NAN))),
            d: first.and_then(|f| f.d).map(|_| col(&|r| r.d.unwrap_or(f64::NAN))),
            w_trunc: col(&|r| r.w_trunc),
            d_trunc: col(&|r| r.d_trunc),
            pruned_w: col(&|r| r.pruned_w),
            pruned_d: col(&|r| r.pruned_d),
            alive: col(&|r| r.alive as f64),
            extinct_fraction: s.iter().filter(|r| r.alive == 0).count() as f64 / s.len().max(1) as f64,
        }
    }
}

pub const SNAPSHOT_COLUMNS: [&str; 13] = [
    "replica", "n", "x", "W", "D", "W_trunc", "D_trunc", "min_position", "pruned_W", "pruned_D", "alive", "pruned", "killed",
];

pub fn write_snapshots_csv<W: Write>(snapshots: &[MartingaleSnapshot], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SNAPSHOT_COLUMNS)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    for s in snapshots {
        w.write_record([
            s.replica.to_string(),
            s.n.to_string(),
            s.x.to_string(),
            opt(s.w),
            opt(s.d),
            s.w_trunc.to_string(),
            s.d_trunc.to_string(),
            s.min_position.to_string(),
            s.pruned_w.to_string(),
            s.pruned_d.to_string(),
            s.alive.to_string(),
            s.pruned.to_string(),
            s.killed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MinimumTailEstimate {
    pub x: f64,
    pub z: f64,
    pub n: u32,
    pub replicas: u64,
    pub hits: u64,
    pub estimate: f64,
    pub std_err: f64,
    pub ci: (f64, f64),
    pub bound: f64,
    /// Mean over replicas of `Σ e^{−κ(V − (z−x))}` over pruned particles: an
    /// upper bound on the hit probability lost to pruning.
    pub pruning_bound: f64,
    pub bound_holds: bool,
}

/// Frequency of `{x + I_n ≤ z}` together with the `e^{−κ(x−z)}` bound.
///
/// Particles at `V ≥ prune_height` are not expanded; each contributes
/// `e^{−κ(V − (z−x))}` to the reported pruning bound.
pub fn minimum_tail_experiment(
    model: &ModelSpec,
    x: f64,
    z: f64,
    n: u32,
    replicas: u64,
    prune_height: f64,
    seed: u64,
) -> Result<MinimumTailEstimate> {
    let kappa = match model.kappa.value() {
        Some(k) if model.regime == crate::model::Regime::Subcritical => k,
        _ => return Err(Error::Domain("minimum tail experiment needs a subcritical model with finite κ".into())),
    };
    if !(z <= x) {
        return Err(Error::Domain(format!("need z ≤ x, got x={x}, z={z}")));
    }
    let target = z - x;
    let per_replica: Vec<(bool, f64)> = (0..replicas)
        .into_par_iter()
        .map(|i| {
            let key = rng::replica_key(seed, rng::stage_tag("minimum"), i);
            let mut bound = 0.0;
            if target >= 0.0 {
                return (true, 0.0);
            }
            let mut stack = vec![(key, 0u32, 0.0f64)];
            while let Some((node, depth, v)) = stack.pop() {
                if depth == n {
                    continue;
                }
                if v >= prune_height {
                    bound += (-kappa * (v - target)).exp();
                    continue;
                }
                let mut g = node_rng(node);
                for c in 0..model.offspring_count {
                    let child = v + model.sample_displacement(&mut g);
                    if child <= target {
                        return (true, bound);
                    }
                    stack.push((child_key(node, c as u64), depth + 1, child));
                }
            }
            (false, bound)
        })
        .collect();
    let hits = per_replica.iter().filter(|r| r.0).count() as u64;
    let pruning_bound = per_replica.iter().map(|r| r.1).sum::<f64>() / replicas.max(1) as f64;
    let p = hits as f64 / replicas.max(1) as f64;
    let std_err = (p * (1.0 - p) / replicas.max(1) as f64).sqrt();
    let ci = wilson_interval(hits, replicas, 0.95);
    let bound = (-kappa * (x - z)).exp();
    Ok(MinimumTailEstimate {
        x,
        z,
        n,
        replicas,
        hits,
        estimate: p,
        std_err,
        ci,
        bound,
        pruning_bound,
        bound_holds: p <= bound + 3.0 * std_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::walk::{estimate_renewal, step_law, RenewalConfig};

    fn lattice_table(m: &ModelSpec) -> RenewalTable {
        estimate_renewal(&step_law(m), &RenewalConfig::default()).unwrap().table
    }

    #[test]
    fn generation_zero_is_the_root() {
        let m = ModelSpec::lattice_boundary();
        let t = lattice_table(&m);
        let s = simulate_replica(&m, &t, &KillConfig::killed(1.0, 0), 5).unwrap();
        assert_eq!(s.w_trunc, (-1.0f64).exp());
        assert_eq!(s.d_trunc, t.eval(1.0) * (-1.0f64).exp());
        assert_eq!(s.min_position, 0.0);
        assert_eq!(s.alive, 1);
        let u = simulate_replica(&m, &t, &KillConfig::unkilled(0), 5).unwrap();
        assert_eq!(u.w, Some(1.0));
        assert_eq!(u.w_trunc, 0.0);
    }

    #[test]
    fn snapshots_are_deterministic() {
        let m = ModelSpec::gaussian_boundary();
        let t = estimate_renewal(&step_law(&m), &RenewalConfig { replicas: 5000, ..Default::default() }).unwrap().table;
        let cfg = KillConfig::killed(1.0, 8);
        assert_eq!(simulate_replica(&m, &t, &cfg, 77).unwrap(), simulate_replica(&m, &t, &cfg, 77).unwrap());
    }

    #[test]
    fn exhaustive_small_lattice_tree() {
        // n = 1: both children at ±a; with x = 0 children at −a are killed
        let m = ModelSpec::lattice_boundary();
        let t = lattice_table(&m);
        let a = m.lattice_span().unwrap();
        for key in 0..50 {
            let s = simulate_replica(&m, &t, &KillConfig::killed(0.0, 1).with_v_cap(f64::INFINITY), key).unwrap();
            assert_eq!(s.alive + s.killed, 2);
            let expect = s.alive as f64 * (-a).exp();
            assert!((s.w_trunc - expect).abs() < 1e-15);
            assert!((s.d_trunc - s.alive as f64 * 2.0 * (-a).exp()).abs() < 1e-15);
        }
    }

    #[test]
    fn killing_only_removes_terms() {
        let m = ModelSpec::gaussian_boundary();
        let t = estimate_renewal(&step_law(&m), &RenewalConfig { replicas: 5000, ..Default::default() }).unwrap().table;
        for key in 0..200 {
            let free = simulate_replica(&m, &t, &KillConfig::unkilled(6), key).unwrap();
            let cut = simulate_replica(&m, &t, &KillConfig::killed(0.0, 6).with_v_cap(f64::INFINITY), key).unwrap();
            assert!(cut.w_trunc <= free.w.unwrap() + 1e-12);
            assert!(cut.min_position >= free.min_position);
        }
    }

    #[test]
    fn scaled_truncation_is_monotone_and_converges() {
        let m = ModelSpec::gaussian_boundary();
        let t = estimate_renewal(&step_law(&m), &RenewalConfig { replicas: 5000, ..Default::default() }).unwrap().table;
        for key in 0..100 {
            let w = simulate_replica(&m, &t, &KillConfig::unkilled(8), key).unwrap().w.unwrap();
            let mut prev = 0.0;
            for x in [1.0f64, 2.0, 4.0, 8.0, 40.0] {
                let s = simulate_replica(&m, &t, &KillConfig::killed(x, 8).with_v_cap(f64::INFINITY), key).unwrap();
                let scaled = x.exp() * s.w_trunc;
                assert!(scaled >= prev - 1e-12 * scaled.max(1.0));
                prev = scaled;
            }
            assert!((prev - w).abs() <= 1e-9 * w.max(1.0));
        }
    }

    #[test]
    fn pruning_certificate_covers_the_difference() {
        let m = ModelSpec::lattice_boundary();
        let t = lattice_table(&m);
        let a = m.lattice_span().unwrap();
        let full = KillConfig::killed(a, 10).with_v_cap(f64::INFINITY);
        let cut = KillConfig::killed(a, 10).with_v_cap(a + 4.0);
        let f = run_batch(&m, &t, &full, 20_000, 3).unwrap().summary();
        let c = run_batch(&m, &t, &cut, 20_000, 3).unwrap().summary();
        assert!(c.pruned_d.mean > 0.0);
        let diff = f.d_trunc.mean - (c.d_trunc.mean + c.pruned_d.mean);
        assert!(diff.abs() < 3.0 * (f.d_trunc.std_err() + c.pruned_d.std_err() + c.d_trunc.std_err()));
    }

    #[test]
    fn budget_breach_is_a_resource_error() {
        let m = ModelSpec::lattice_boundary();
        let t = lattice_table(&m);
        let mut cfg = KillConfig::unkilled(12);
        cfg.budget = 100;
        assert!(matches!(simulate_replica(&m, &t, &cfg, 1), Err(Error::Resource { .. })));
        let b = run_batch(&m, &t, &cfg, 4, 1).unwrap();
        assert_eq!(b.over_budget.len(), 4);
    }

    #[test]
    fn minimum_tail_trivial_cases() {
        let m = ModelSpec::gaussian_subcritical(1.0).unwrap();
        let r = minimum_tail_experiment(&m, 6.0, 1.0, 0, 1000, 4.0, 1).unwrap();
        assert_eq!(r.hits, 0);
        let r = minimum_tail_experiment(&m, 1.0, 1.0, 5, 100, 4.0, 1).unwrap();
        assert!(r.estimate <= 1.0);
        assert!(minimum_tail_experiment(&ModelSpec::gaussian_boundary(), 6.0, 1.0, 5, 10, 4.0, 1).is_err());
    }

    #[test]
    fn csv_has_contract_columns_and_empty_untruncated_fields() {
        let m = ModelSpec::lattice_boundary();
        let t = lattice_table(&m);
        let b = run_batch(&m, &t, &KillConfig::killed(1.0, 3), 2, 1).unwrap();
        let mut buf = Vec::new();
        write_snapshots_csv(&b.snapshots, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), SNAPSHOT_COLUMNS.join(","));
        assert!(lines.next().unwrap().starts_with("0,3,1,,,"));
    }
}
