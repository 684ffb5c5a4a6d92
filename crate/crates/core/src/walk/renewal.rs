use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::StepLaw;
use crate::error::{Error, Result};
use crate::rng;
use crate::stats::{linear_fit, MeanVar};

/// Positions within this distance below zero count as zero.
const ZERO_TOL: f64 = 1e-9;

/// Tabulated renewal function of the strictly descending ladder heights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenewalTable {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    /// Asymptotic increment of `R` per unit length.
    pub slope: f64,
    pub exact: bool,
    /// Lattice tables: span `a` and `r = P(ever reach −a)`, giving `R(ka) = Σ_{i≤k} rⁱ`.
    lattice: Option<(f64, f64)>,
    spacing: f64,
}

impl RenewalTable {
    /// Exact table for a two-point walk `±a` with `P(+a) = up ≥ 1/2`.
    pub fn exact_lattice(step: f64, up: f64, u_max: f64) -> Result<Self> {
        if up < 0.5 - 1e-12 {
            return Err(Error::Domain(format!("renewal needs a nonnegative drift, got P(+a) = {up}")));
        }
        let ratio = ((1.0 - up) / up).min(1.0);
        let k_max = (u_max / step).ceil().max(1.0) as usize;
        let grid: Vec<f64> = (0..=k_max).map(|k| k as f64 * step).collect();
        let values: Vec<f64> = (0..=k_max).map(|k| lattice_value(ratio, k)).collect();
        let slope = if ratio >= 1.0 { 1.0 / step } else { 0.0 };
        Ok(RenewalTable { grid, values, slope, exact: true, lattice: Some((step, ratio)), spacing: step })
    }

    fn from_values(grid: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if grid.len() < 4 || grid.len() != values.len() {
            return Err(Error::Estimation("renewal table needs at least four grid points".into()));
        }
        let spacing = grid[1] - grid[0];
        let half = grid.len() / 2;
        let slope = linear_fit(&grid[half..], &values[half..]).map_or(0.0, |f| f.slope.max(0.0));
        Ok(RenewalTable { grid, values, slope, exact: false, lattice: None, spacing })
    }

    pub fn u_max(&self) -> f64 {
        *self.grid.last().expect("nonempty grid")
    }

    pub fn span(&self) -> Option<f64> {
        self.lattice.map(|(a, _)| a)
    }

    /// `R(u)` for `u ≥ 0`.
    pub fn renewal_eval(&self, u: f64) -> Result<f64> {
        if u < -ZERO_TOL || u.is_nan() {
            return Err(Error::Domain(format!("renewal function evaluated at u = {u} < 0")));
        }
        Ok(self.eval(u))
    }

    /// Unchecked evaluation; negative arguments are clamped to zero.
    #[inline]
    pub fn eval(&self, u: f64) -> f64 {
        let u = u.max(0.0);
        if let Some((a, ratio)) = self.lattice {
            let k = (u / a + ZERO_TOL).floor() as usize;
            return lattice_value(ratio, k);
        }
        let top = self.grid.len() - 1;
        let pos = u / self.spacing;
        if pos >= top as f64 {
            return self.values[top] + self.slope * (u - self.grid[top]);
        }
        let i = pos.floor() as usize;
        let t = pos - i as f64;
        self.values[i] + t * (self.values[i + 1] - self.values[i])
    }

    /// Largest slope between consecutive nodes (used for sampler envelopes).
    pub fn max_increment_slope(&self) -> f64 {
        self.values
            .windows(2)
            .zip(self.grid.windows(2))
            .map(|(v, g)| (v[1] - v[0]) / (g[1] - g[0]))
            .fold(self.slope, f64::max)
    }

    /// CSV with columns `u,R,exact_flag`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["u", "R", "exact_flag"])?;
        for (u, r) in self.grid.iter().zip(&self.values) {
            out.write_record([u.to_string(), r.to_string(), (self.exact as u8).to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["u", "R", "exact_flag"] {
            return Err(Error::Estimation(format!("unexpected renewal CSV header {headers:?}")));
        }
        let (mut grid, mut values, mut exact) = (Vec::new(), Vec::new(), true);
        for rec in rdr.records() {
            let rec = rec?;
            let parse = |i: usize| -> Result<f64> {
                rec[i].parse::<f64>().map_err(|e| Error::Estimation(format!("bad renewal CSV field {:?}: {e}", &rec[i])))
            };
            grid.push(parse(0)?);
            values.push(parse(1)?);
            exact &= &rec[2] == "1";
        }
        if exact && grid.len() >= 2 {
            let a = grid[1] - grid[0];
            let ratio = values[1] - values[0];
            let mut t = RenewalTable::exact_lattice(a, 1.0 / (1.0 + ratio), *grid.last().unwrap())?;
            t.grid = grid;
            t.values = values;
            return Ok(t);
        }
        RenewalTable::from_values(grid, values)
    }

    pub fn content_hash(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory write");
        hex::encode(Sha256::digest(&buf))[..16].to_string()
    }
}

fn lattice_value(ratio: f64, k: usize) -> f64 {
    if ratio >= 1.0 {
        (k + 1) as f64
    } else {
        (1.0 - ratio.powi(k as i32 + 1)) / (1.0 - ratio)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenewalConfig {
    pub u_max: f64,
    pub spacing: f64,
    pub replicas: u64,
    pub step_cap: u64,
    pub batches: usize,
    pub bootstrap: usize,
    pub seed: u64,
}

impl Default for RenewalConfig {
    fn default() -> Self {
        RenewalConfig {
            u_max: 15.0,
            spacing: 0.05,
            replicas: 200_000,
            step_cap: 10_000_000,
            batches: 20,
            bootstrap: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RenewalEstimate {
    pub table: RenewalTable,
    /// Standard errors per grid point (zero for exact tables).
    pub std_errs: Vec<f64>,
    /// Bootstrap 95% interval for the slope (batch resampling).
    pub slope_ci: (f64, f64),
    pub capped_replicas: u64,
    pub replicas: u64,
}

/// Renewal function of the walk, exact for lattice steps and Monte Carlo otherwise.
///
/// The Monte Carlo route uses the duality form
/// `R(u) = E[Σ_{j<τ⁺} 1{S_j ≥ −u}]` with `τ⁺ = inf{n ≥ 1 : S_n ≥ 0}`.
pub fn estimate_renewal(step: &StepLaw, cfg: &RenewalConfig) -> Result<RenewalEstimate> {
    if step.mean() < -1e-12 {
        return Err(Error::Domain("renewal estimation needs a walk with nonnegative mean".into()));
    }
    if let StepLaw::Lattice { step: a, up } = *step {
        let table = RenewalTable::exact_lattice(a, up, cfg.u_max)?;
        let n = table.grid.len();
        let s = table.slope;
        return Ok(RenewalEstimate { table, std_errs: vec![0.0; n], slope_ci: (s, s), capped_replicas: 0, replicas: 0 });
    }
    monte_carlo_renewal(step, cfg)
}

/// Monte Carlo renewal table for any step law, including lattice steps (where
/// it serves as a check on the exact table).
pub fn monte_carlo_renewal(step: &StepLaw, cfg: &RenewalConfig) -> Result<RenewalEstimate> {
    if step.mean() < -1e-12 {
        return Err(Error::Domain("renewal estimation needs a walk with nonnegative mean".into()));
    }
    if !(cfg.spacing > 0.0 && cfg.u_max > 4.0 * cfg.spacing) || cfg.replicas == 0 || cfg.batches == 0 {
        return Err(Error::Domain("renewal config needs spacing > 0, u_max > 4·spacing, replicas > 0".into()));
    }
    let bins = (cfg.u_max / cfg.spacing).round() as usize;
    let grid: Vec<f64> = (0..=bins).map(|i| i as f64 * cfg.spacing).collect();
    let batches = cfg.batches.min(cfg.replicas as usize);
    let per_batch = cfg.replicas / batches as u64;
    let replicas = per_batch * batches as u64;

    // per-replica occupation histograms, summed per batch; u64 sums are order independent
    let results: Vec<(Vec<u64>, Vec<f64>, u64)> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut counts = vec![0u64; bins + 1];
            let mut sumsq = vec![0f64; bins + 1];
            let mut local = vec![0u64; bins + 1];
            let mut capped = 0u64;
            for r in 0..per_batch {
                let idx = b as u64 * per_batch + r;
                let mut g = rng::stream(cfg.seed, "renewal", idx);
                local.iter_mut().for_each(|c| *c = 0);
                let mut s = 0.0f64;
                let mut steps = 0u64;
                loop {
                    s += step.sample(&mut g);
                    steps += 1;
                    if s >= -ZERO_TOL {
                        break;
                    }
                    if steps >= cfg.step_cap {
                        capped += 1;
                        break;
                    }
                    // depths sitting on a grid node (lattice walks) must not spill into the next bin
                    let q = -s / cfg.spacing;
                    let k = if (q - q.round()).abs() < 1e-9 { q.round() } else { q.ceil() } as usize;
                    if k <= bins {
                        local[k.max(1)] += 1;
                    }
                }
                let mut cum = 0u64;
                for i in 0..=bins {
                    cum += local[i];
                    counts[i] += cum;
                    sumsq[i] += (cum as f64) * (cum as f64);
                }
            }
            (counts, sumsq, capped)
        })
        .collect();

    let capped: u64 = results.iter().map(|r| r.2).sum();
    if capped as f64 > 1e-3 * replicas as f64 {
        return Err(Error::Estimation(format!(
            "{capped} of {replicas} renewal replicas hit the {}-step cap",
            cfg.step_cap
        )));
    }
    let n = replicas as f64;
    let mut values = vec![1.0; bins + 1];
    let mut std_errs = vec![0.0; bins + 1];
    for i in 0..=bins {
        let total: u64 = results.iter().map(|r| r.0[i]).sum();
        let sq: f64 = results.iter().map(|r| r.1[i]).sum();
        let mean = total as f64 / n;
        values[i] = 1.0 + mean;
        std_errs[i] = ((sq / n - mean * mean).max(0.0) / (n - 1.0)).sqrt();
    }
    // R is nondecreasing by construction of the cumulative counts
    let table = RenewalTable::from_values(grid.clone(), values)?;

    let batch_tables: Vec<Vec<f64>> = results
        .iter()
        .map(|r| r.0.iter().map(|&c| 1.0 + c as f64 / per_batch as f64).collect())
        .collect();
    let half = grid.len() / 2;
    let mut boot = rng::stream(cfg.seed, "renewal-bootstrap", 0);
    let mut slopes: Vec<f64> = (0..cfg.bootstrap.max(1))
        .map(|_| {
            let mut avg = vec![0.0; bins + 1];
            for _ in 0..batches {
                let pick = &batch_tables[rand::Rng::random_range(&mut boot, 0..batches)];
                avg.iter_mut().zip(pick).for_each(|(a, v)| *a += v / batches as f64);
            }
            linear_fit(&grid[half..], &avg[half..]).map_or(f64::NAN, |f| f.slope)
        })
        .collect();
    slopes.sort_by(f64::total_cmp);
    let ci = (
        crate::stats::quantile_sorted(&slopes, 0.025),
        crate::stats::quantile_sorted(&slopes, 0.975),
    );
    Ok(RenewalEstimate { table, std_errs, slope_ci: ci, capped_replicas: capped, replicas })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HarmonicityPoint {
    pub x: f64,
    pub r: f64,
    pub lhs: f64,
    pub std_err: f64,
    pub relative_residual: f64,
}

/// `E[R(x+S₁) 1{x+S₁ ≥ 0}]` against `R(x)` at every grid point: exact for
/// lattice steps, Monte Carlo with common random numbers otherwise.
pub fn harmonicity_residuals(table: &RenewalTable, step: &StepLaw, draws: u64, seed: u64) -> Vec<HarmonicityPoint> {
    match *step {
        StepLaw::Lattice { step: a, up } => table
            .grid
            .iter()
            .map(|&x| {
                let down = if x - a >= -ZERO_TOL { table.eval(x - a) } else { 0.0 };
                let lhs = up * table.eval(x + a) + (1.0 - up) * down;
                let r = table.eval(x);
                HarmonicityPoint { x, r, lhs, std_err: 0.0, relative_residual: (lhs - r).abs() / r }
            })
            .collect(),
        StepLaw::Gaussian { .. } => {
            let mut g = rng::stream(seed, "harmonicity", 0);
            let zs: Vec<f64> = (0..draws).map(|_| step.sample(&mut g)).collect();
            table
                .grid
                .par_iter()
                .map(|&x| {
                    let acc: MeanVar = zs
                        .iter()
                        .map(|&z| if x + z >= 0.0 { table.eval(x + z) } else { 0.0 })
                        .collect();
                    let r = table.eval(x);
                    HarmonicityPoint {
                        x,
                        r,
                        lhs: acc.mean,
                        std_err: acc.std_err(),
                        relative_residual: (acc.mean - r).abs() / r,
                    }
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use crate::walk::step_law;

    #[test]
    fn exact_lattice_is_k_plus_one() {
        let s = step_law(&ModelSpec::lattice_boundary());
        let est = estimate_renewal(&s, &RenewalConfig::default()).unwrap();
        let t = est.table;
        let a = s.span().unwrap();
        assert!(t.exact);
        assert_eq!(t.renewal_eval(0.0).unwrap(), 1.0);
        for k in 0..30 {
            assert_eq!(t.eval(k as f64 * a), (k + 1) as f64);
        }
        assert_eq!(t.eval(2.0 * a), 3.0);
        // step function between lattice points
        assert_eq!(t.eval(1.5 * a), 2.0);
    }

    #[test]
    fn exact_lattice_is_harmonic_in_both_regimes() {
        for m in [ModelSpec::lattice_boundary(), ModelSpec::lattice_subcritical(0.8).unwrap()] {
            let s = step_law(&m);
            let t = estimate_renewal(&s, &RenewalConfig::default()).unwrap().table;
            for p in harmonicity_residuals(&t, &s, 0, 0) {
                assert!(p.relative_residual < 1e-12, "{p:?}");
            }
        }
    }

    #[test]
    fn negative_argument_is_a_domain_error() {
        let t = RenewalTable::exact_lattice(1.0, 0.5, 10.0).unwrap();
        assert!(matches!(t.renewal_eval(-0.5), Err(Error::Domain(_))));
    }

    #[test]
    fn extrapolation_uses_slope() {
        let grid: Vec<f64> = (0..=10).map(|i| i as f64).collect();
        let values: Vec<f64> = grid.iter().map(|u| 1.0 + 0.5 * u).collect();
        let t = RenewalTable::from_values(grid, values).unwrap();
        assert!((t.slope - 0.5).abs() < 1e-12);
        assert!((t.eval(11.0) - (t.eval(10.0) + t.slope)).abs() < 1e-12);
        assert!((t.eval(2.5) - 2.25).abs() < 1e-12);
        assert_eq!(t.eval(0.0), 1.0);
    }

    #[test]
    fn csv_round_trip_preserves_evaluation() {
        let t = RenewalTable::exact_lattice(1.3, 0.5, 10.0).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let back = RenewalTable::read_csv(buf.as_slice()).unwrap();
        assert!(back.exact);
        for u in [0.0, 0.7, 1.3, 5.2, 25.0] {
            assert_eq!(back.eval(u), t.eval(u));
        }
    }

    #[test]
    fn gaussian_monte_carlo_table_is_sane() {
        let s = step_law(&ModelSpec::gaussian_boundary());
        let cfg = RenewalConfig { replicas: 20_000, u_max: 6.0, bootstrap: 50, ..Default::default() };
        let est = estimate_renewal(&s, &cfg).unwrap();
        let t = &est.table;
        assert_eq!(t.values[0], 1.0);
        assert!(t.values.windows(2).all(|w| w[1] >= w[0]));
        assert!(t.slope > 0.0);
        assert!(est.slope_ci.0 > 0.0);
    }

    #[test]
    fn lattice_monte_carlo_route_matches_oracle() {
        let a = ModelSpec::lattice_boundary().lattice_span().unwrap();
        let s = StepLaw::Lattice { step: a, up: 0.5 };
        let cfg = RenewalConfig { replicas: 50_000, u_max: 8.0 * a, spacing: a, bootstrap: 10, seed: 9, ..Default::default() };
        let est = monte_carlo_renewal(&s, &cfg).unwrap();
        assert_eq!(est.table.values[0], 1.0);
        for k in 1..=8 {
            let r = est.table.values[k];
            assert!((r - (k + 1) as f64).abs() < 4.0 * est.std_errs[k], "k={k}: {r} ± {}", est.std_errs[k]);
        }
    }
}
