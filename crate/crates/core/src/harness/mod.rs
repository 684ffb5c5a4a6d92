//! Configuration, persistence, worker pools, stage runners and the acceptance
//! checks that tie the other modules together.

mod config;
pub mod verify;

pub use config::{
    resolve_output, stage_seed, AnalysisBlock, EngineBlock, ExperimentConfig, ModelBlock, PerpetuityBlock,
    SpineBlock, WalkBlock, OUTPUT_ROOT_ENV,
};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{self, certify_mgf_bound, default_x_grid, mgf_recursion, FitOptions, TailFit, TailKind};
use crate::engine::{run_batch, write_snapshots_csv, BatchSummary, SNAPSHOT_COLUMNS};
use crate::error::{Error, Result};
use crate::model::{ModelSpec, Regime};
use crate::perpetuity::{self, excursion_anatomy, perpetuity_samples, probe_exponential_moment};
use crate::spine::{additive_spine_estimate, default_y_grid, is_tail_estimate, write_tail_csv, TailEstimate};
use crate::stats::LineFit;
use crate::walk::{estimate_renewal, step_law, ConditionedSampler, RenewalTable};

pub const SCHEMA_VERSION: u32 = 1;
/// Version of the CSV column layouts listed in manifests.
pub const CSV_SCHEMA_VERSION: u32 = 1;
pub const RENEWAL_COLUMNS: [&str; 3] = ["u", "R", "exact_flag"];
pub const TAIL_COLUMNS: [&str; 6] = ["y", "estimate", "SE", "ESS", "naive_estimate", "naive_SE"];
pub const FINALS_COLUMNS: [&str; 4] = ["replica", "final", "tail_increment", "converged"];
pub const LEVELS_COLUMNS: [&str; 9] =
    ["j", "mean_zeta", "L_slope", "L_r2", "Q1_slope", "Q1_intercept", "Q1_r2", "no_return", "no_return_oracle"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruningCertificate {
    pub x: f64,
    pub mean_pruned_w: f64,
    pub mean_pruned_d: f64,
    /// Mean pruned `D` mass relative to the mean truncated `D`.
    pub relative_d: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub stage: String,
    pub config_hash: String,
    pub model_hash: String,
    pub renewal_hash: Option<String>,
    pub renewal_reused: bool,
    pub seeds: BTreeMap<String, u64>,
    pub wall_clock_secs: BTreeMap<String, f64>,
    pub csv_schema_version: u32,
    /// Output file name to CSV columns (empty for JSON files).
    pub outputs: BTreeMap<String, Vec<String>>,
    pub pruning: Vec<PruningCertificate>,
    pub workers: usize,
}

impl RunManifest {
    fn new(stage: &str, cfg: &ExperimentConfig, model: &ModelSpec) -> Self {
        RunManifest {
            schema_version: SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            stage: stage.to_string(),
            config_hash: cfg.content_hash(),
            model_hash: model.content_hash(),
            renewal_hash: None,
            renewal_reused: false,
            seeds: BTreeMap::new(),
            wall_clock_secs: BTreeMap::new(),
            csv_schema_version: CSV_SCHEMA_VERSION,
            outputs: BTreeMap::new(),
            pruning: Vec::new(),
            workers: rayon::current_num_threads(),
        }
    }
}

/// JSON summary wrapper carrying the schema version.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Versioned<T> {
    pub schema_version: u32,
    pub data: T,
}

impl<T: Serialize> Versioned<T> {
    pub fn to_json(data: T) -> Vec<u8> {
        serde_json::to_vec_pretty(&Versioned { schema_version: SCHEMA_VERSION, data }).expect("summary serializes")
    }
}

/// Outputs buffered in memory and written only once a stage has succeeded.
#[derive(Default)]
struct Outputs {
    files: Vec<(String, Vec<u8>, Vec<String>)>,
}

impl Outputs {
    fn csv(&mut self, name: String, bytes: Vec<u8>, columns: &[&str]) {
        self.files.push((name, bytes, columns.iter().map(|c| c.to_string()).collect()));
    }

    fn json(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes, Vec::new()));
    }

    fn commit(self, dir: &Path, mut manifest: RunManifest) -> Result<RunManifest> {
        std::fs::create_dir_all(dir)?;
        for (name, bytes, columns) in self.files {
            write_atomic(&dir.join(&name), &bytes)?;
            manifest.outputs.insert(name, columns);
        }
        let text = serde_json::to_vec_pretty(&manifest)?;
        write_atomic(&dir.join("manifest.json"), &text)?;
        Ok(manifest)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Runs `f` on a dedicated pool of `workers` threads (all cores when `None`).
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        builder = builder.num_threads(w);
    }
    let pool = builder.build().map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Where renewal tables are cached: under the output root when set, else next
/// to the output directory.
pub fn renewal_cache_dir(cfg: &ExperimentConfig) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join("renewal-cache"),
        None => {
            let out = cfg.resolved_output_dir();
            let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            parent.join("renewal-cache")
        }
    }
}

#[derive(Debug, Clone)]
pub struct RenewalHandle {
    pub table: Arc<RenewalTable>,
    pub hash: String,
    pub reused: bool,
    pub path: Option<PathBuf>,
}

/// Cache key of a renewal table: model hash plus the estimator settings.
pub fn renewal_key(model: &ModelSpec, walk: &WalkBlock) -> String {
    let bytes = serde_json::to_vec(walk).expect("walk block serializes");
    format!("{}-{}", model.content_hash(), &hex::encode(Sha256::digest(&bytes))[..12])
}

/// Loads the renewal table for `model` from `cache_dir`, estimating and storing
/// it on a miss. Lattice tables are exact and never cached.
pub fn load_or_build_renewal(model: &ModelSpec, walk: &WalkBlock, cache_dir: Option<&Path>) -> Result<RenewalHandle> {
    let step = step_law(model);
    if model.lattice_span().is_some() {
        let table = estimate_renewal(&step, &walk.renewal_config())?.table;
        return Ok(RenewalHandle { hash: table.content_hash(), table: Arc::new(table), reused: false, path: None });
    }
    let path = cache_dir.map(|d| d.join(format!("renewal-{}.csv", renewal_key(model, walk))));
    if let Some(p) = path.as_ref().filter(|p| p.exists()) {
        let file = std::fs::File::open(p)?;
        let table = RenewalTable::read_csv(file)?;
        return Ok(RenewalHandle { hash: table.content_hash(), table: Arc::new(table), reused: true, path });
    }
    let table = estimate_renewal(&step, &walk.renewal_config())?.table;
    if let Some(p) = &path {
        std::fs::create_dir_all(p.parent().expect("cache file has a parent"))?;
        let mut buf = Vec::new();
        table.write_csv(&mut buf)?;
        write_atomic(p, &buf)?;
    }
    Ok(RenewalHandle { hash: table.content_hash(), table: Arc::new(table), reused: false, path })
}

fn timed<T>(manifest: &mut RunManifest, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t = Instant::now();
    let out = f().map_err(|e| e.in_stage(name))?;
    manifest.wall_clock_secs.insert(name.to_string(), t.elapsed().as_secs_f64());
    Ok(out)
}

fn prepare(stage: &str, cfg: &ExperimentConfig) -> Result<(ModelSpec, RunManifest)> {
    let model = cfg.validate().map_err(|e| e.in_stage(stage))?;
    let manifest = RunManifest::new(stage, cfg, &model);
    Ok((model, manifest))
}

fn renewal_for(cfg: &ExperimentConfig, model: &ModelSpec, manifest: &mut RunManifest) -> Result<Arc<RenewalTable>> {
    let cache = renewal_cache_dir(cfg);
    let handle = timed(manifest, "renewal", || load_or_build_renewal(model, &cfg.walk, Some(&cache)))?;
    manifest.seeds.insert("renewal".into(), cfg.walk.seed);
    manifest.renewal_hash = Some(handle.hash);
    manifest.renewal_reused = handle.reused;
    Ok(handle.table)
}

/// Estimates (or reloads) the renewal table and writes it out.
pub fn renewal_stage(cfg: &ExperimentConfig) -> Result<RunManifest> {
    with_workers(cfg.workers, || {
        let (model, mut manifest) = prepare("renewal", cfg)?;
        let table = renewal_for(cfg, &model, &mut manifest)?;
        let mut out = Outputs::default();
        let mut buf = Vec::new();
        table.write_csv(&mut buf)?;
        out.csv("renewal.csv".into(), buf, &RENEWAL_COLUMNS);
        out.commit(&cfg.resolved_output_dir(), manifest).map_err(|e| e.in_stage("renewal"))
    })?
}

/// Runs the engine at every configured start height.
pub fn simulate_stage(cfg: &ExperimentConfig) -> Result<RunManifest> {
    with_workers(cfg.workers, || {
        let (model, mut manifest) = prepare("simulate", cfg)?;
        let renewal = renewal_for(cfg, &model, &mut manifest)?;
        let seed = stage_seed(cfg.seed, "simulate");
        manifest.seeds.insert("simulate".into(), seed);
        let mut out = Outputs::default();
        let mut summaries: Vec<BatchSummary> = Vec::new();
        for (i, x) in cfg.engine.starts(&model).into_iter().enumerate() {
            let kill = cfg.engine.kill_config(x);
            let batch = timed(&mut manifest, &format!("simulate x{i}"), || {
                run_batch(&model, &renewal, &kill, cfg.engine.replicas, seed)
            })?;
            let summary = batch.summary();
            manifest.pruning.push(PruningCertificate {
                x,
                mean_pruned_w: summary.pruned_w.mean,
                mean_pruned_d: summary.pruned_d.mean,
                relative_d: relative(summary.pruned_d.mean, summary.d_trunc.mean),
            });
            let mut buf = Vec::new();
            write_snapshots_csv(&batch.snapshots, &mut buf)?;
            out.csv(format!("snapshots_x{i}.csv"), buf, &SNAPSHOT_COLUMNS);
            summaries.push(summary);
        }
        out.json("summary.json", Versioned::to_json(&summaries));
        out.commit(&cfg.resolved_output_dir(), manifest).map_err(|e| e.in_stage("simulate"))
    })?
}

fn relative(part: f64, whole: f64) -> f64 {
    if whole > 0.0 {
        part / whole
    } else {
        0.0
    }
}

/// Naive tail of the truncated martingale plus the spine importance-sampling
/// estimate (conditioned spine for boundary models, additive spine otherwise).
pub fn spine_tail_stage(cfg: &ExperimentConfig) -> Result<RunManifest> {
    with_workers(cfg.workers, || {
        let (model, mut manifest) = prepare("spine-tail", cfg)?;
        if !cfg.engine.killing {
            return Err(Error::Config("spine tails need engine.killing = true".into()).in_stage("spine-tail"));
        }
        let renewal = renewal_for(cfg, &model, &mut manifest)?;
        let sampler = ConditionedSampler::new(step_law(&model), renewal.clone());
        let naive_seed = stage_seed(cfg.seed, "spine-tail naive");
        let is_seed = stage_seed(cfg.seed, "spine-tail importance");
        manifest.seeds.insert("naive".into(), naive_seed);
        manifest.seeds.insert("importance".into(), is_seed);
        let mut out = Outputs::default();
        let mut estimates: Vec<(f64, TailEstimate)> = Vec::new();
        for (i, x) in cfg.engine.starts(&model).into_iter().enumerate() {
            let kill = cfg.engine.kill_config(x);
            let batch = timed(&mut manifest, &format!("naive x{i}"), || {
                run_batch(&model, &renewal, &kill, cfg.engine.replicas, naive_seed)
            })?;
            let naive: Vec<f64> = batch
                .snapshots
                .iter()
                .map(|s| if model.regime == Regime::Boundary { s.d_trunc } else { s.w_trunc })
                .collect();
            let y_grid = if cfg.spine.y.is_empty() {
                default_y_grid(&naive, cfg.spine.y_points, cfg.spine.y_stretch).map_err(|e| e.in_stage("spine-tail"))?
            } else {
                cfg.spine.y.clone()
            };
            let mut est = timed(&mut manifest, &format!("importance x{i}"), || match model.regime {
                Regime::Boundary => is_tail_estimate(&model, &sampler, &kill, &y_grid, cfg.spine.replicas, is_seed),
                Regime::Subcritical => {
                    additive_spine_estimate(&model, &renewal, &kill, &y_grid, cfg.spine.replicas, is_seed)
                }
            })?;
            est.attach_naive(&naive);
            let mut buf = Vec::new();
            write_tail_csv(&est.points, &mut buf)?;
            out.csv(format!("tail_x{i}.csv"), buf, &TAIL_COLUMNS);
            estimates.push((x, est));
        }
        out.json("tail.json", Versioned::to_json(&estimates));
        out.commit(&cfg.resolved_output_dir(), manifest).map_err(|e| e.in_stage("spine-tail"))
    })?
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerpetuitySummary {
    pub replicas: u64,
    pub unconverged: u64,
    pub survival_fit: Option<LineFit>,
    pub probe: Option<perpetuity::ProbeReport>,
}

/// Perpetuity samples, the exponential-moment probe and (boundary models)
/// the excursion statistics per level band.
pub fn perpetuity_stage(cfg: &ExperimentConfig) -> Result<RunManifest> {
    with_workers(cfg.workers, || {
        let (model, mut manifest) = prepare("perpetuity", cfg)?;
        let renewal = renewal_for(cfg, &model, &mut manifest)?;
        let sampler = ConditionedSampler::new(step_law(&model), renewal);
        let p = &cfg.perpetuity;
        let pcfg = p.perpetuity_config();
        let seed = stage_seed(cfg.seed, "perpetuity");
        manifest.seeds.insert("perpetuity".into(), seed);
        let runs = timed(&mut manifest, "samples", || {
            perpetuity_samples(&model, &sampler, &pcfg, p.replicas, seed, "perpetuity")
        })?;
        let finals: Vec<f64> = runs.iter().map(|r| r.final_value).collect();
        let probe = if p.probe {
            let probe_seed = stage_seed(cfg.seed, "perpetuity probe");
            manifest.seeds.insert("probe".into(), probe_seed);
            Some(timed(&mut manifest, "probe", || {
                probe_exponential_moment(&model, &sampler, &pcfg, p.replicas, probe_seed)
            })?)
        } else {
            None
        };
        let mut out = Outputs::default();
        let mut buf = Vec::new();
        perpetuity::write_finals_csv(&runs, &mut buf)?;
        out.csv("finals.csv".into(), buf, &FINALS_COLUMNS);
        if model.regime == Regime::Boundary {
            let exc_seed = stage_seed(cfg.seed, "perpetuity excursions");
            manifest.seeds.insert("excursions".into(), exc_seed);
            let stats = timed(&mut manifest, "excursions", || {
                excursion_anatomy(&model, &sampler, p.start_x, p.q, p.levels, p.horizon, p.replicas, exc_seed)
            })?;
            let mut buf = Vec::new();
            perpetuity::write_levels_csv(&stats, &mut buf)?;
            out.csv("levels.csv".into(), buf, &LEVELS_COLUMNS);
        }
        let summary = PerpetuitySummary {
            replicas: p.replicas,
            unconverged: runs.iter().filter(|r| !r.converged).count() as u64,
            survival_fit: perpetuity::survival_fit(&finals),
            probe,
        };
        out.json("perpetuity.json", Versioned::to_json(&summary));
        out.commit(&cfg.resolved_output_dir(), manifest).map_err(|e| e.in_stage("perpetuity"))
    })?
}

/// Solves the MGF recursion on the configured θ grid and certifies the bound.
pub fn mgf_stage(cfg: &ExperimentConfig) -> Result<RunManifest> {
    with_workers(cfg.workers, || {
        let (model, mut manifest) = prepare("mgf", cfg)?;
        let a = &cfg.analysis;
        let rho = a.rho.or(model.rho).ok_or_else(|| {
            Error::Domain("the MGF recursion needs a subcritical model".into()).in_stage("mgf")
        })?;
        let table = timed(&mut manifest, "recursion", || {
            let mut t = mgf_recursion(&model, &a.theta_grid, &default_x_grid(&model), a.mgf_generations)?;
            t.certificate = Some(certify_mgf_bound(&t, rho, a.k_cap)?);
            Ok(t)
        })?;
        let mut out = Outputs::default();
        out.json("mgf.json", Versioned::to_json(&table));
        out.commit(&cfg.resolved_output_dir(), manifest).map_err(|e| e.in_stage("mgf"))
    })?
}

/// Fits a tail model to one column of a CSV file and writes the fit as JSON.
/// Nothing is written unless the fit succeeds.
pub fn fit_stage(
    input: &Path,
    column: &str,
    kind: TailKind,
    range: (f64, f64),
    opts: &FitOptions,
    output: &Path,
) -> Result<TailFit> {
    let run = || -> Result<TailFit> {
        let file = std::fs::File::open(input)
            .map_err(|e| Error::Config(format!("cannot open {}: {e}", input.display())))?;
        let samples = analysis::read_column(file, column)?;
        let fit = analysis::fit_tail(&samples, kind, range, opts)?;
        if let Some(dir) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        write_atomic(output, &Versioned::to_json(&fit))?;
        Ok(fit)
    };
    run().map_err(|e| e.in_stage("fit"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 7;
        cfg.output_dir = dir.join("out");
        cfg.engine.replicas = 200;
        cfg.engine.generations = 6;
        cfg
    }

    #[test]
    fn simulate_is_identical_across_worker_counts() {
        let tmp = tempfile::tempdir().unwrap();
        let mut a = small(tmp.path());
        a.workers = Some(1);
        a.output_dir = tmp.path().join("a");
        let mut b = a.clone();
        b.workers = Some(3);
        b.output_dir = tmp.path().join("b");
        let ma = simulate_stage(&a).unwrap();
        let mb = simulate_stage(&b).unwrap();
        assert_eq!(ma.config_hash, mb.config_hash);
        for name in ma.outputs.keys() {
            let x = std::fs::read(a.output_dir.join(name)).unwrap();
            let y = std::fs::read(b.output_dir.join(name)).unwrap();
            assert_eq!(x, y, "{name}");
        }
        assert!(a.output_dir.join("manifest.json").exists());
    }

    #[test]
    fn gaussian_renewal_is_cached_and_reused() {
        let tmp = tempfile::tempdir().unwrap();
        let model = ModelSpec::gaussian_boundary();
        let walk = WalkBlock { replicas: 2000, u_max: 3.0, bootstrap: 5, ..Default::default() };
        let first = load_or_build_renewal(&model, &walk, Some(tmp.path())).unwrap();
        let second = load_or_build_renewal(&model, &walk, Some(tmp.path())).unwrap();
        assert!(!first.reused && second.reused);
        assert_eq!(first.hash, second.hash);
        for u in [0.0, 0.7, 2.9] {
            assert!((first.table.eval(u) - second.table.eval(u)).abs() < 1e-12);
        }
    }

    #[test]
    fn failed_fit_writes_nothing() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("fit.json");
        let err = fit_stage(
            &tmp.path().join("missing.csv"),
            "D_trunc",
            TailKind::Exponential,
            (0.9, 0.999),
            &FitOptions::default(),
            &out,
        )
        .unwrap_err();
        assert!(err.to_string().starts_with("fit:"));
        assert!(!out.exists());
    }

    #[test]
    fn stage_errors_name_the_stage() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = small(tmp.path());
        cfg.engine.killing = false;
        let err = spine_tail_stage(&cfg).unwrap_err();
        assert!(err.to_string().starts_with("spine-tail:"), "{err}");
        assert!(!cfg.output_dir.exists());
    }
}
