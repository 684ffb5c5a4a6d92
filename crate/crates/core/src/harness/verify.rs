//! End-to-end acceptance checks, one function per criterion.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, Exp, Pareto};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{simulate_stage, ExperimentConfig, WalkBlock};
use crate::analysis::{
    certify_mgf_bound, default_x_grid, fit_tail, mgf_recursion, scan_x_dependence, FitOptions, TailKind, XPoint,
};
use crate::engine::{minimum_tail_experiment, run_batch, Batch, KillConfig};
use crate::error::{Error, Result};
use crate::model::{estimate_transform, ModelSpec};
use crate::perpetuity::{
    excursion_anatomy, perpetuity_samples, probe_exponential_moment, survival_fit, PerpetuityConfig, QKind,
};
use crate::rng;
use crate::spine::{additive_spine_estimate, is_tail_estimate, TailEstimate};
use crate::stats::{quantile_sorted, MeanVar};
use crate::walk::{
    estimate_renewal, harmonicity_residuals, monte_carlo_renewal, step_law, ConditionedSampler, RenewalConfig,
    RenewalTable,
};

/// Runtime budgets are quoted for this many cores and scaled to the machine.
const REFERENCE_CORES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Criterion(u8);

impl Criterion {
    pub const ALL: [Criterion; 14] = [
        Criterion(1),
        Criterion(2),
        Criterion(3),
        Criterion(4),
        Criterion(5),
        Criterion(6),
        Criterion(7),
        Criterion(8),
        Criterion(9),
        Criterion(10),
        Criterion(11),
        Criterion(12),
        Criterion(13),
        Criterion(14),
    ];

    pub fn new(id: u8) -> Result<Self> {
        if (1..=14).contains(&id) {
            Ok(Criterion(id))
        } else {
            Err(Error::Config(format!("no acceptance criterion AC{id} (valid: AC1 to AC14)")))
        }
    }

    pub fn id(self) -> u8 {
        self.0
    }

    /// Wall-clock budget on the reference machine, in seconds.
    pub fn budget_secs(self) -> f64 {
        60.0 * match self.0 {
            1 => 1.0,
            2 | 3 => 5.0,
            4 | 9 | 10 => 10.0,
            5 | 6 | 8 => 20.0,
            7 => 30.0,
            11 => 15.0,
            12 => 5.0,
            _ => 2.0,
        }
    }

    pub fn title(self) -> &'static str {
        match self.0 {
            1 => "calibration and transform",
            2 => "renewal oracle",
            3 => "conditioned walk",
            4 => "martingale identities",
            5 => "untruncated polynomial tail",
            6 => "Cauchy tail of the derivative martingale",
            7 => "truncated exponential tails",
            8 => "x-dependence",
            9 => "minimum bound",
            10 => "importance-sampling consistency",
            11 => "perpetuity",
            12 => "MGF recursion",
            13 => "synthetic fitter oracles",
            _ => "determinism",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AC{}", self.0)
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let digits = t.strip_prefix("AC").or_else(|| t.strip_prefix("ac")).unwrap_or(t);
        let id: u8 = digits.parse().map_err(|_| Error::Config(format!("cannot parse criterion '{s}'")))?;
        Criterion::new(id)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CriterionReport {
    pub criterion: Criterion,
    pub passed: bool,
    pub checks: Vec<Check>,
    pub elapsed_secs: f64,
    pub budget_secs: f64,
}

impl CriterionReport {
    /// One-line verdict, e.g. `AC2 PASS renewal oracle (12.3 s)`.
    pub fn line(&self) -> String {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        let failed: Vec<&str> = self.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        let mut s = format!("{} {verdict} {} ({:.1} s)", self.criterion, self.criterion.title(), self.elapsed_secs);
        if !failed.is_empty() {
            s.push_str(&format!(" failed: {}", failed.join(", ")));
        }
        s
    }

    pub fn details(&self) -> String {
        self.checks
            .iter()
            .map(|c| format!("  [{}] {}: {}", if c.passed { "ok" } else { "FAIL" }, c.name, c.detail))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Shared state across criteria: run seed and renewal tables.
pub struct VerifyContext {
    pub seed: u64,
    renewals: Mutex<HashMap<String, (Arc<RenewalTable>, Arc<Vec<f64>>)>>,
}

impl VerifyContext {
    pub fn new(seed: u64) -> Self {
        VerifyContext { seed, renewals: Mutex::new(HashMap::new()) }
    }

    /// Renewal table for the model's walk and its per-node standard errors.
    fn renewal_with_errors(&self, model: &ModelSpec) -> Result<(Arc<RenewalTable>, Arc<Vec<f64>>)> {
        let key = model.content_hash();
        if let Some(t) = self.renewals.lock().expect("renewal memo lock").get(&key) {
            return Ok(t.clone());
        }
        let est = estimate_renewal(&step_law(model), &WalkBlock::default().renewal_config())?;
        let entry = (Arc::new(est.table), Arc::new(est.std_errs));
        self.renewals.lock().expect("renewal memo lock").insert(key, entry.clone());
        Ok(entry)
    }

    fn renewal(&self, model: &ModelSpec) -> Result<Arc<RenewalTable>> {
        Ok(self.renewal_with_errors(model)?.0)
    }

    fn seed(&self, tag: &str) -> u64 {
        super::stage_seed(self.seed, tag)
    }
}

#[derive(Default)]
struct Checks(Vec<Check>);

impl Checks {
    fn add(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.0.push(Check { name: name.into(), passed, detail: detail.into() });
    }
}

fn available_cores() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Runs one criterion end to end.
pub fn verify(criterion: Criterion, ctx: &VerifyContext) -> Result<CriterionReport> {
    let start = Instant::now();
    let mut checks = Checks::default();
    let run = match criterion.id() {
        1 => ac1(ctx, &mut checks),
        2 => ac2(ctx, &mut checks),
        3 => ac3(ctx, &mut checks),
        4 => ac4(ctx, &mut checks),
        5 => ac5(ctx, &mut checks),
        6 => ac6(ctx, &mut checks),
        7 => ac7(ctx, &mut checks),
        8 => ac8(ctx, &mut checks),
        9 => ac9(ctx, &mut checks),
        10 => ac10(ctx, &mut checks),
        11 => ac11(ctx, &mut checks),
        12 => ac12(ctx, &mut checks),
        13 => ac13(ctx, &mut checks),
        _ => ac14(ctx, &mut checks),
    };
    run.map_err(|e| e.in_stage(format!("verify {criterion}")))?;
    let elapsed = start.elapsed().as_secs_f64();
    let scale = REFERENCE_CORES as f64 / available_cores().min(REFERENCE_CORES) as f64;
    let budget = criterion.budget_secs();
    checks.add(
        "runtime",
        elapsed <= budget * scale,
        format!("{elapsed:.1} s against {budget:.0} s on {REFERENCE_CORES} cores (scaled ×{scale:.1})"),
    );
    let passed = checks.0.iter().all(|c| c.passed);
    Ok(CriterionReport { criterion, passed, checks: checks.0, elapsed_secs: elapsed, budget_secs: budget })
}

fn built_in_models() -> Result<Vec<(&'static str, ModelSpec)>> {
    Ok(vec![
        ("gaussian boundary", ModelSpec::gaussian_boundary()),
        ("gaussian subcritical", ModelSpec::gaussian_subcritical(1.0)?),
        ("lattice boundary", ModelSpec::lattice_boundary()),
        ("lattice subcritical", ModelSpec::lattice_subcritical(crate::model::DEFAULT_SUBCRITICAL_STEP)?),
    ])
}

fn ac1(ctx: &VerifyContext, c: &mut Checks) -> Result<()> {
    for (name, model) in built_in_models()? {
        let phi1 = model.biggins_transform(1.0)?;
        c.add(format!("{name}: Φ(1) = 0"), phi1.abs() <= 1e-12, format!("Φ(1) = {phi1:e}"));
        for theta in [0.0, 0.5, 1.0, 1.5] {
            let est = estimate_transform(&model, theta, 1_000_000, ctx.seed(&format!("ac1 {name}")))?;
            let diff = (est.estimate - est.analytic).abs();
            let tol = (3.0 * est.std_err).max(1e-12);
            c.add(
                format!("{name}: Φ̂({theta})"),
                diff <= tol,
                format!("estimate {:.6} vs {:.6}, |Δ| = {diff:.2e}, 3·SE = {:.2e}", est.estimate, est.analytic, 3.0 * est.std_err),
            );
        }
    }
    Ok(())
}

fn ac2(ctx: &VerifyContext, c: &mut Checks) -> Result<()> {
    let lattice = ModelSpec::lattice_boundary();
    let step = step_law(&lattice);
    let a = lattice.lattice_span().expect("lattice model");
    let exact = ctx.renewal(&lattice)?;
    c.add("exact R(0) = 1", exact.renewal_eval(0.0)? == 1.0, format!("R(0) = {}", exact.renewal_eval(0.0)?));
    let cfg = RenewalConfig {
        u_max: 20.0 * a,
        spacing: a,
        replicas: 1_000_000,
        batches: 20,
        bootstrap: 20,
        seed: ctx.seed("ac2 lattice"),
        ..Default::default()
    };
    let mc = monte_carlo_renewal(&step, &cfg)?;
    c.add("Monte Carlo R(0) = 1", mc.table.values[0] == 1.0, format!("R̂(0) = {}", mc.table.values[0]));
    let mut worst: f64 = 0.0;
    let mut bad = Vec::new();
    for k in 1..=20 {
        let z = (mc.table.values[k] - (k + 1) as f64).abs() / mc.std_errs[k];
        worst = worst.max(z);
        if z > 3.0 {
            bad.push(k);
        }
    }
    c.add(
        "lattice R̂(ka) = k+1 for k ≤ 20",
        bad.is_empty(),
        format!("max |z| = {worst:.2} over 20 levels ({} replicas, {} capped); outside 3·SE: {bad:?}", mc.replicas, mc.capped_replicas),
    );

    let gauss = ModelSpec::gaussian_boundary();
    let table = ctx.renewal(&gauss)?;
    let res = harmonicity_residuals(&table, &step_law(&gauss), 100_000, ctx.seed("ac2 harmonicity"));
    let worst = res.iter().map(|p| p.relative_residual).fold(0.0, f64::max);
    let at = res.iter().max_by(|p, q| p.relative_residual.total_cmp(&q.relative_residual)).map_or(f64::NAN, |p| p.x);
    c.add(
        "Gaussian harmonicity residual ≤ 2%",
        worst <= 0.02,
        format!("max relative residual {:.3}% at u = {at:.2} over {} grid points", 100.0 * worst, res.len()),
    );
    Ok(())
}

fn ac3(ctx: &VerifyContext, c: &mut Checks) -> Result<()> {
    let model = ModelSpec::lattice_boundary();
    let a = model.lattice_span().expect("lattice model");
    let renewal = ctx.renewal(&model)?;
    let sampler = ConditionedSampler::new(step_law(&model), renewal.clone());
    let per_level = 1_000_000 / 11;
    let seed = ctx.seed("ac3 steps");
    let mut worst: f64 = 0.0;
    let mut bad = Vec::new();
    for k in 0..=10usize {
        let x = k as f64 * a;
        let ups: u64 = (0..per_level)
            .into_par_iter()
            .map(|i| -> Result<u64> {
                let mut g = rng::stream(seed, "ac3 step", (k * per_level + i) as u64);
                Ok(u64::from(sampler.step(x, &mut g)? > x))
            })
            .sum::<Result<u64>>()?;
        let p = (k + 2) as f64 / (2.0 * (k + 1) as f64);
        let freq = ups as f64 / per_level as f64;
        let z = (freq - p).abs() / (p * (1.0 - p) / per_level as f64).sqrt();
        worst = worst.max(z);
        if z > 3.0 {
            bad.push(k);
        }
    }
    c.add(
        "up-step frequency (k+2)/(2(k+1)) for k ≤ 10",
        bad.is_empty(),
        format!("max |z| = {worst:.2} ({per_level} transitions per level); outside 3·SE: {bad:?}"),
    );

    // Level-indexed up probabilities make the long runs cheap; they are the
    // sampler's own transition law.
    const LEVELS: usize = 40_000;
    let up: Vec<f64> = (0..LEVELS)
        .map(|k| sampler.lattice_up_probability(k as f64 * a).expect("lattice sampler"))
        .collect();
    let walks = 10_000u64;
    let horizon = 500_000u64;
    for (xk, yk) in [(2usize, 1usize), (3, 1), (3, 2)] {
        let hits: u64 = (0..walks)
            .into_par_iter()
            .map(|i| {
                let mut g = rng::stream(seed, &format!("ac3 hit {xk} {yk}"), i);
                let mut k = xk;
                for _ in 0..horizon {
                    let p = if k < LEVELS { up[k] } else { 0.5 };
                    if g.random::<f64>() < p {
                        k += 1;
                    } else {
                        k -= 1;
                    }
                    if k < yk {
                        return 1;
                    }
                }
                0
            })
            .sum();
        let oracle = crate::walk::hitting_probability(&renewal, xk as f64 * a, yk as f64 * a)?;
        let freq = hits as f64 / walks as f64;
        let se = (oracle * (1.0 - oracle) / walks as f64).sqrt();
        // missed hits after the horizon: E[(x−y)/S_T] for a Bessel-like walk
        let tail = (yk as f64) * (2.0 / (std::f64::consts::PI * horizon as f64)).sqrt();
        c.add(
            format!("hitting [0,{yk}a) from {xk}a"),
            (freq - oracle).abs() <= 3.0 * se,
            format!("{freq:.4} vs 1 − R(x−y)/R(x) = {oracle:.4}, 3·SE = {:.4}, horizon bias ≈ {tail:.4}", 3.0 * se),
        );
    }
    Ok(())
}

/// At the default gap of 8 the pruned D mass is several percent of the mean at
/// n = 10, far above the 1e-3 certificate.
const AC4_PRUNE_GAP: f64 = 16.0;

fn ac4(ctx: &VerifyContext, c: &mut Checks) -> Result<()> {
    let lattice = ModelSpec::lattice_boundary();
    let a = lattice.lattice_span().expect("lattice model");
    let gauss = ModelSpec::gaussian_boundary();
    let cases: Vec<(&str, &ModelSpec, f64)> = vec![
        ("lattice", &lattice, a),
        ("lattice", &lattice, 2.0 * a),
        ("gaussian", &gauss, 0.5),
        ("gaussian", &gauss, 1.0),
        ("gaussian", &gauss, 2.0),
    ];
    let replicas = 100_000;
    for (name, model, x) in cases {
        let (renewal, errs) = ctx.renewal_with_errors(model)?;
        let cfg = KillConfig::killed(x, 10).with_v_cap(x + AC4_PRUNE_GAP);
        let batch = run_batch(model, &renewal, &cfg, replicas, ctx.seed(&format!("ac4 {name} {x}")))?;
        ensure_complete(&batch)?;
        let stopped: MeanVar = batch.snapshots.iter().map(|s| s.d_trunc + s.pruned_d).collect();
        let pruned: MeanVar = batch.snapshots.iter().map(|s| s.pruned_d).collect();
        let target = renewal.eval(x) * (-x).exp();
        let table_se = table_std_err(&renewal, &errs, x);
        let se = (stopped.std_err().powi(2) + (table_se * (-x).exp()).powi(2)).sqrt();
        let rel = pruned.mean / target;
        c.add(
            format!("{name} x = {x:.3}: mean D = R(x)e^(−x)"),
            (stopped.mean - target).abs() <= 3.0 * se,
            format!("{:.5} vs {target:.5}, 3·SE = {:.5}", stopped.mean, 3.0 * se),
        );
        c.add(format!("{name} x = {x:.3}: pruning certificate"), rel < 1e-3, format!("relative pruned mass {rel:.2e}"));
    }
    for (name, model) in [("lattice", &lattice), ("gaussian", &gauss)] {
        let renewal = ctx.renewal(model)?;
        let batch = run_batch(model, &renewal, &KillConfig::unkilled(10), replicas, ctx.seed(&format!("ac4 free {name}")))?;
        ensure_complete(&batch)?;
        let w: MeanVar = batch.snapshots.iter().map(|s| s.w.unwrap_or(f64::NAN)).collect();
        c.add(
            format!("{name}: mean W_10 = 1 without killing"),
            (w.mean - 1.0).abs() <= 3.0 * w.std_err(),
            format!("{:.5} ± {:.5}", w.mean, w.std_err()),
        );
    }
    Ok(())
}

/// Standard error of the renewal table at `u`, taken from the nearest node at or above it.
fn table_std_err(table: &RenewalTable, errs: &[f64], u: f64) -> f64 {
    let i = table.grid.partition_point(|&g| g < u - 1e-12).min(errs.len() - 1);
    errs[i]
}

fn ensure_complete(batch: &Batch) -> Result<()> {
    if batch.over_budget.is_empty() {
        Ok(())
    } else {
        Err(Error::Estimation(format!("{} replicas exceeded the particle budget", batch.over_budget.len())))
    }
}

fn ac5(ctx: &VerifyContext, c: &mut Checks) -> Result<()> {
    let model = ModelSpec::gaussian_subcritical(1.0)?;
    let renewal = ctx.renewal(&ModelSpec::gaussian_boundary())?;
    let cfg = KillConfig::unkilled(20).with_v_cap(8.0);
    let batch = run_batch(&model, &renewal, &cfg, 100_000, ctx.seed("ac5"))?;
    ensure_complete(&batch)?;
    let w: Vec<f64> = batch.snapshots.iter().filter_map(|s| s.w_stopped()).collect();
    let fit = fit_tail(&w, TailKind::Power, (0.99, 1.0), &FitOptions { bootstrap: 200, seed: ctx.seed("ac5 fit") })?;
    let kappa = model.kappa.value().unwrap_or(f64::NAN);
    c.add(
        "Hill index of W_20 in [1.19, 1.59]",
        (1.19..=1.59).contains(&fit.rate_or_index),
        format!(
            "index {:.3} (bootstrap 95% {:.3}–{:.3}, κ = {kappa:.4}, log-log slope {:.3})",
            fit.rate_or_index, fit.bootstrap_ci.0, fit.bootstrap_ci.1, fit.cross_check
        ),
    );
    c.add(
        "Exponential tail rejected",
        fit.model_comparison < 0.0,
        format!("log-likelihood Exponential − Pareto = {:.1}", fit.model_comparison),
    );
    Ok(())
}

fn ac6(ctx: &VerifyContext, c: &mut Checks) -> Result<()> {
    let model = ModelSpec::gaussian_boundary();
    let renewal = ctx.renewal(&model)?;
    let cfg = KillConfig::unkilled(18).with_v_cap(10.0);
    let batch = run_batch(&model, &renewal, &cfg, 100_000, ctx.seed("ac6"))?;
    ensure_complete(&batch)?;
    let d: Vec<f64> = batch.snapshots.iter().filter_map(|s| s.d_stopped()).filter(|&v| v > 0.0).collect();
    let fit = fit_tail(&d, TailKind::Power, (0.99, 1.0), &FitOptions { bootstrap: 200, seed: ctx.seed("ac6 fit") })?;
    let nonpositive = batch.snapshots.iter().filter_map(|s| s.d_stopped()).filter(|&v| v <= 0.0).count();
    let lowest = batch.snapshots.iter().filter_map(|s| s.d_stopped()).fold(f64::INFINITY, f64::min);
    c.add(
        "Hill index of positive D_18 in [0.8, 1.2]",
        (0.8..=1.2).contains(&fit.rate_or_index),
        format!(
            "index {:.3} (bootstrap 95% {:.3}–{:.3}) on {} positive of {} replicas; {nonpositive} nonpositive, lowest D {lowest:.1}",
            fit.rate_or_index,
            fit.bootstrap_ci.0,
            fit.bootstrap_ci.1,
            d.len(),
            batch.snapshots.len(),
        ),
    );
    Ok(())
}

struct LineCheck {
    r_squared: f64,
    points: Vec<(f64, f64, f64, f64, f64)>,
}

/// Fits the log-survival line over the top two naive decades and evaluates the
/// importance-sampling points placed 1, 2 and 3 decades further out.
fn extend_line(
    naive: &[f64],
    seed: u64,
    importance: impl FnOnce(&[f64]) -> Result<TailEstimate>,
) -> Result<(LineCheck, TailEstimate)> {
    let fit = fit_tail(naive, TailKind::Exponential, (0.9, 0.999), &FitOptions { bootstrap: 100, seed })?;
    let (ln_c, rate) = (fit.prefactor.ln(), fit.rate_or_index);
    let ys: Vec<f64> = [4.0, 5.0, 6.0].iter().map(|d: &f64| (ln_c + d * std::f64::consts::LN_10) / rate).collect();
    let est = importance(&ys)?;
    let points = est
        .points
        .iter()
        .map(|p| {
            let line = (ln_c - rate * p.y).exp();
            (p.y, p.estimate, p.std_err, p.ess, line)
        })
        .collect();
    Ok((LineCheck { r_squared: fit.r_squared, points }, est))
}

fn report_line(c: &mut Checks, name: &str, check: &LineCheck) {
    c.add(
        format!("{name}: log-survival linear over the top two decades"),
        check.r_squared >= 0.98,
        format!("R² = {:.4}", check.r_squared),
    );
    for (i, &(y, est, se, ess, line)) in check.points.iter().enumerate() {
        let z = (est - line) / se;
        let reliable = ess >= crate::spine::MIN_ESS as f64;
        c.add(
            format!("{name}: IS point {} decade(s) past the naive range", i + 1),
            reliable && z.abs() <= 2.0,
            format!("y = {y:.3}: {est:.3e} ± {se:.2e} (ESS {ess:.0}) vs line {line:.3e}, z = {z:.2}"),
        );
    }
}

fn ac7(ctx: &VerifyContext, c: &mut Checks) -> Result<()> {
    const IS_REPLICAS: u64 = 2_000_000;
    let sub = ModelSpec::lattice_subcritical(crate::model::DEFAULT_SUBCRITICAL_STEP)?;
    let a = sub.lattice_span().expect("lattice model");
    let renewal = ctx.renewal(&sub)?;
    let cfg = KillConfig::killed(a, 12).with_v_cap(f64::INFINITY);
    let batch = run_batch(&sub, &renewal, &cfg, 100_000, ctx.seed("ac7 W naive"))?;
    ensure_complete(&batch)?;
    let naive: Vec<f64> = batch.snapshots.iter().map(|s| s.w_trunc).collect();
    let (check, _) = extend_line(&naive, ctx.seed("ac7 W fit"), |ys| {
        additive_spine_estimate(&sub, &renewal, &cfg, ys, IS_REPLICAS, ctx.seed("ac7 W spine"))
    })?;
    report_line(c, "W_trunc", &check);

    let bnd = ModelSpec::lattice_boundary();
    let a = bnd.lattice_span().expect("lattice model");
    let renewal = ctx.renewal(&bnd)?;
    let sampler = ConditionedSampler::new(step_law(&bnd), renewal.clone());
    let cfg = KillConfig::killed(a, 12).with_v_cap(f64::INFINITY);
    let batch = run_batch(&bnd, &renewal, &cfg, 100_000, ctx.seed("ac7 D naive"))?;
    ensure_complete(&batch)?;
    let naive: Vec<f64> = batch.snapshots.iter().map(|s| s.d_trunc).collect();
    let (check, _) = extend_line(&naive, ctx.seed("ac7 D fit"), |ys| {
        is_tail_estimate(&bnd, &sampler, &cfg, ys, IS_REPLICAS, ctx.seed("ac7 D spine"))
    })?;
    report_line(c, "D_trunc", &check);
    Ok(())
}

/// Naive tail frequencies at `y0` for each start, with `y0` the 99.9% quantile
/// at the highest start.
fn x_scan_points(
    model: &ModelSpec,
    renewal: &RenewalTable,
    xs: &[f64],
    value: impl Fn(&crate::engine::MartingaleSnapshot) -> f64,
    seed: u64,
) -> Result<(f64, Vec<XPoint>)> {
    let mut samples = Vec::new();
    for (i, &x) in xs.iter().enumerate() {
        let cfg = KillConfig::killed(x, 12).with_v_cap(f64::INFINITY);
        let batch = run_batch(model, renewal, &cfg, 100_000, rng::replica_key(seed, 0, i as u64))?;
        ensure_complete(&batch)?;
        samples.push(batch.snapshots.iter().map(&value).collect::<Vec<f64>>());
    }
    let mut top = samples.last().expect("at least one start").clone();
    top.sort_by(f64::total_cmp);
    let y0 = quantile_sorted(&top, 0.999);
    let points = xs
        .iter()
        .zip(&samples)
        .map(|(&x, s)| {
            let n = s.len() as f64;
            let p = s.iter().filter(|&&v| v > y0).count() as f64 / n;
            XPoint { x, estimate: p, std_err: (p * (1.0 - p) / n).sqrt() }
        })
        .collect();
    Ok((y0, points))
}

fn ac8(ctx: &VerifyContext, c: &mut Checks) -> Result<()> {
    let sub = ModelSpec::lattice_subcritical(crate::model::DEFAULT_SUBCRITICAL_STEP)?;
    let a = sub.lattice_span().expect("lattice model");
    let xs: Vec<f64> = (1..=4).map(|k| k as f64 * a).collect();
    let renewal = ctx.renewal(&sub)?;
    let (y0, pts) = x_scan_points(&sub, &renewal, &xs, |s| s.w_trunc, ctx.seed("ac8 W"))?;
    let scan = scan_x_dependence(&pts, None)?;
    c.add(
        "slope of ln P(W_trunc > y0) in x ≤ −1",
        scan.slope_below(-1.0),
        format!(
            "y0 = {y0:.4}, slope {:.3} (95% {:.3} to {:.3}), P̂ = {:?}",
            scan.slope,
            scan.slope_ci.0,
            scan.slope_ci.1,
            pts.iter().map(|p| format!("{:.2e}", p.estimate)).collect::<Vec<_>>()
        ),
    );

    let bnd = ModelSpec::lattice_boundary();
    let a = bnd.lattice_span().expect("lattice model");
    let xs: Vec<f64> = (1..=4).map(|k| k as f64 * a).collect();
    let renewal = ctx.renewal(&bnd)?;
    let (y0, pts) = x_scan_points(&bnd, &renewal, &xs, |s| s.d_trunc, ctx.seed("ac8 D"))?;
    let scan = scan_x_dependence(&pts, Some(&renewal))?;
    c.add(
        "slope of ln[P(D_trunc > y0)/(R(x)e^(−x))] not positive",
        scan.slope_not_positive(),
        format!("y0 = {y0:.4}, slope {:.3} (95% {:.3} to {:.3})", scan.slope, scan.slope_ci.0, scan.slope_ci.1),
    );
    Ok(())
}

fn ac9(ctx: &VerifyContext, c: &mut Checks) -> Result<()> {
    let model = ModelSpec::gaussian_subcritical(1.0)?;
    let est = minimum_tail_experiment(&model, 6.0, 1.0, 20, 100_000, 5.0, ctx.seed("ac9"))?;
    let ok = est.estimate <= est.bound + 3.0 * est.std_err;
    c.add(
        "P(x + min ≤ z) ≤ e^(−κ(x−z)) + 3·SE",
        ok,
        format!(
            "{} hits in {} replicas: {:.3e} ± {:.2e} vs bound {:.3e} (pruning bound {:.2e})",
            est.hits, est.replicas, est.estimate, est.std_err, est.bound, est.pruning_bound
        ),
    );
    c.add(
        "pruning cannot hide a violation",
        est.estimate + est.pruning_bound <= est.bound + 3.0 * est.std_err,
        format!("estimate plus pruning bound {:.3e}", est.estimate + est.pruning_bound),
    );
    Ok(())
}

fn ac10(ctx: &VerifyContext, c: &mut Checks) -> Result<()> {
    let model = ModelSpec::lattice_boundary();
    let a = model.lattice_span().expect("lattice model");
    let renewal = ctx.renewal(&model)?;
    let sampler = ConditionedSampler::new(step_law(&model), renewal.clone());
    let cfg = KillConfig::killed(a, 8).with_v_cap(f64::INFINITY);
    // levels come from a separate pilot so the naive counts stay binomial
    let pilot = run_batch(&model, &renewal, &cfg, 100_000, ctx.seed("ac10 pilot"))?;
    ensure_complete(&pilot)?;
    let mut sorted: Vec<f64> = pilot.snapshots.iter().map(|s| s.d_trunc).collect();
    sorted.sort_by(f64::total_cmp);
    let batch = run_batch(&model, &renewal, &cfg, 100_000, ctx.seed("ac10 naive"))?;
    ensure_complete(&batch)?;
    let naive: Vec<f64> = batch.snapshots.iter().map(|s| s.d_trunc).collect();
    let ys: Vec<f64> = [0.9, 0.99, 0.998].iter().map(|&q| quantile_sorted(&sorted, q)).collect();
    let mut est = is_tail_estimate(&model, &sampler, &cfg, &ys, 100_000, ctx.seed("ac10 spine"))?;
    est.attach_naive(&naive);
    for p in &est.points {
        let q = p.naive_estimate.expect("naive attached");
        let se = p.naive_std_err.expect("naive attached");
        let hits = (q * naive.len() as f64).round();
        let (lo, hi) = p.ci();
        let overlap = lo <= q + 1.96 * se && q - 1.96 * se <= hi;
        c.add(
            format!("y = {:.3}: naive and IS intervals overlap", p.y),
            overlap && hits >= 100.0,
            format!("naive {q:.3e} ± {se:.1e} ({hits} hits), IS {:.3e} ± {:.1e}", p.estimate, p.std_err),
        );
    }
    let positive = naive.iter().filter(|&&v| v > 0.0).count() as f64 / naive.len() as f64;
    let pse = (positive * (1.0 - positive) / naive.len() as f64).sqrt();
    let m = &est.total_mass;
    let se = (m.std_err().powi(2) + pse * pse).sqrt();
    c.add(
        "E_spine[weight] = P(D_trunc > 0)",
        (m.mean - positive).abs() <= 3.0 * se,
        format!("{:.5} ± {:.5} vs {positive:.5} ± {pse:.5}", m.mean, m.std_err()),
    );
    Ok(())
}

fn ac11(ctx: &VerifyContext, c: &mut Checks) -> Result<()> {
    let model = ModelSpec::lattice_boundary();
    let renewal = ctx.renewal(&model)?;
    let sampler = ConditionedSampler::new(step_law(&model), renewal);
    let cfg = PerpetuityConfig::default();
    let replicas = 2000;
    let probe = probe_exponential_moment(&model, &sampler, &cfg, replicas, ctx.seed("ac11 probe"))?;
    c.add(
        "ε* > 0 with max-over-x MGF ≤ 2",
        probe.epsilon_star > 0.0 && probe.max_upper_ci <= 2.2,
        format!(
            "ε* = {:.4}, largest upper 95% bound {:.3}, MGF at ε*/2 {:.3}, {} unconverged runs",
            probe.epsilon_star, probe.max_upper_ci, probe.max_mgf_at_half, probe.unconverged_runs
        ),
    );
    let runs = perpetuity_samples(&model, &sampler, &cfg, replicas, ctx.seed("ac11 samples"), "ac11")?;
    let finals: Vec<f64> = runs.iter().map(|r| r.final_value).collect();
    match survival_fit(&finals) {
        Some(fit) => c.add(
            "perpetuity tail exponential",
            fit.r_squared >= 0.95 && fit.slope < 0.0,
            format!("log-survival slope {:.3}, R² = {:.4}", fit.slope, fit.r_squared),
        ),
        None => c.add("perpetuity tail exponential", false, "too few samples for a fit"),
    }
    let stats =
        excursion_anatomy(&model, &sampler, 0.0, QKind::Constant, 5, cfg.horizon, replicas, ctx.seed("ac11 levels"))?;
    for level in &stats.levels {
        match level.local_time_fit {
            Some(fit) => c.add(
                format!("L({}) tail log-linear", level.level),
                fit.r_squared >= 0.95 && fit.slope < 0.0,
                format!("slope {:.3}, R² = {:.4}", fit.slope, fit.r_squared),
            ),
            None => c.add(format!("L({}) tail log-linear", level.level), false, "too few excursions"),
        }
    }
    Ok(())
}

fn ac12(ctx: &VerifyContext, c: &mut Checks) -> Result<()> {
    let model = ModelSpec::lattice_subcritical(crate::model::DEFAULT_SUBCRITICAL_STEP)?;
    let xs = default_x_grid(&model);
    let thetas: Vec<f64> = (0..=16).map(|i| 0.001 * 2f64.powi(i)).collect();
    let table = mgf_recursion(&model, &thetas, &xs, 40)?;
    let exact = thetas
        .iter()
        .enumerate()
        .all(|(i, &t)| xs.iter().enumerate().all(|(k, &x)| table.psi(0, i, k) == t * (-x).exp()));
    c.add("ψ_0 = θe^(−x) exactly", exact, format!("{} θ values × {} x nodes", thetas.len(), xs.len()));
    let small = 0.1;
    let settled = table.settled_by(small, 1e-10);
    c.add(
        "increments < 1e-10 by n = 40 for θ ≤ 0.1",
        settled.is_some_and(|n| n <= 40),
        format!("settled by n = {settled:?}; last increment {:.2e}", table.final_increment(small)),
    );
    let rho = model.gamma.map_or(2.0, |g| g.min(2.0));
    let cert = certify_mgf_bound(&table, rho, 1e3)?;
    c.add(
        "bound certified with θ̄ ≥ 0.01",
        cert.holds && cert.theta_bar >= 0.01,
        format!(
            "ρ = {rho}, K = {:.4}, θ̄ = {}, divergence frontier {:?}; monotone in θ: {}, in x: {}, max decrease in n {:.2e}",
            cert.k, cert.theta_bar, cert.divergence_frontier, table.monotone_in_theta, table.monotone_in_x, table.max_decrease_in_n
        ),
    );
    let theta = 1e-6;
    let tiny = mgf_recursion(&model, &[theta], &xs, 12)?;
    let a = model.lattice_span().expect("lattice model");
    let renewal = ctx.renewal(&model)?;
    for k in [1usize, 2] {
        let x = k as f64 * a;
        let cfg = KillConfig::killed(x, 12).with_v_cap(f64::INFINITY);
        let batch = run_batch(&model, &renewal, &cfg, 100_000, ctx.seed(&format!("ac12 {k}")))?;
        ensure_complete(&batch)?;
        let mc: MeanVar = batch.snapshots.iter().map(|s| s.w_trunc).collect();
        let psi = tiny.psi(12, 0, k) / theta;
        let tol = (3.0 * mc.std_err()).max(1e-4);
        c.add(
            format!("ψ_12(1e-6, {k}a)/1e-6 = E[W_trunc]"),
            (psi - mc.mean).abs() <= tol,
            format!("{psi:.5} vs engine {:.5} ± {:.5}", mc.mean, mc.std_err()),
        );
    }
    Ok(())
}

fn ac13(ctx: &VerifyContext, c: &mut Checks) -> Result<()> {
    let n = 1_000_000;
    let opts = FitOptions { bootstrap: 100, seed: ctx.seed("ac13 bootstrap") };
    let mut g = rng::stream(ctx.seed("ac13"), "exponential", 0);
    let exp = Exp::new(2.0).expect("valid rate");
    let xs: Vec<f64> = (0..n).map(|_| exp.sample(&mut g)).collect();
    let fit = fit_tail(&xs, TailKind::Exponential, (0.5, 0.999), &opts)?;
    c.add(
        "Exponential(2) rate in [1.95, 2.05]",
        (1.95..=2.05).contains(&fit.rate_or_index),
        format!("ĉ = {:.4} (bootstrap {:.4}–{:.4})", fit.rate_or_index, fit.bootstrap_ci.0, fit.bootstrap_ci.1),
    );
    let mut g = rng::stream(ctx.seed("ac13"), "pareto", 0);
    let par = Pareto::new(1.0, 1.5).expect("valid shape");
    let ps: Vec<f64> = (0..n).map(|_| par.sample(&mut g)).collect();
    let fit = fit_tail(&ps, TailKind::Power, (0.9, 1.0), &opts)?;
    c.add(
        "Pareto(1.5) index in [1.4, 1.6]",
        (1.4..=1.6).contains(&fit.rate_or_index),
        format!("κ̂ = {:.4} (bootstrap {:.4}–{:.4})", fit.rate_or_index, fit.bootstrap_ci.0, fit.bootstrap_ci.1),
    );
    Ok(())
}

fn ac14(ctx: &VerifyContext, c: &mut Checks) -> Result<()> {
    let tmp = std::env::temp_dir().join(format!("brwtail-ac14-{}-{}", std::process::id(), ctx.seed));
    let mut cfg = ExperimentConfig { seed: 7, ..Default::default() };
    cfg.engine.replicas = 2000;
    cfg.engine.generations = 10;
    let mut outputs = Vec::new();
    for workers in [1usize, 4] {
        let mut run = cfg.clone();
        run.workers = Some(workers);
        run.output_dir = tmp.join(format!("workers-{workers}"));
        let manifest = simulate_stage(&run)?;
        let files: Vec<(String, Vec<u8>)> = manifest
            .outputs
            .keys()
            .filter(|name| name.ends_with(".csv"))
            .map(|name| Ok((name.clone(), std::fs::read(run.output_dir.join(name))?)))
            .collect::<Result<_>>()?;
        outputs.push(files);
    }
    let _ = std::fs::remove_dir_all(&tmp);
    let identical = !outputs[0].is_empty() && outputs[0] == outputs[1];
    let bytes: usize = outputs[0].iter().map(|f| f.1.len()).sum();
    c.add(
        "byte-identical CSVs at 1 and 4 workers",
        identical,
        format!("{} CSV files, {bytes} bytes", outputs[0].len()),
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn criterion_ids_parse() {
        assert_eq!("AC7".parse::<Criterion>().unwrap().id(), 7);
        assert_eq!("ac14".parse::<Criterion>().unwrap().id(), 14);
        assert_eq!("3".parse::<Criterion>().unwrap().to_string(), "AC3");
        assert!("AC15".parse::<Criterion>().is_err());
        assert!("ACx".parse::<Criterion>().is_err());
    }

    #[test]
    fn report_line_names_failures() {
        let r = CriterionReport {
            criterion: Criterion(2),
            passed: false,
            checks: vec![
                Check { name: "a".into(), passed: true, detail: String::new() },
                Check { name: "b".into(), passed: false, detail: String::new() },
            ],
            elapsed_secs: 1.0,
            budget_secs: 300.0,
        };
        assert!(r.line().starts_with("AC2 FAIL renewal oracle"));
        assert!(r.line().ends_with("failed: b"));
    }
}
