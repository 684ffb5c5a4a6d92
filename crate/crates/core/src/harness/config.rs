use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::TailKind;
use crate::engine::{Barrier, KillConfig, DEFAULT_BUDGET};
use crate::error::{Error, Result};
use crate::model::{calibrate, Family, FreeParams, ModelSpec, Regime};
use crate::perpetuity::{PerpetuityConfig, QKind, DEFAULT_HORIZON};
use crate::walk::RenewalConfig;

/// Environment variable that relocates relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "BRWTAIL_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub family: Family,
    pub regime: Regime,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
}

impl Default for ModelBlock {
    fn default() -> Self {
        ModelBlock {
            family: Family::LatticeBinary,
            regime: Regime::Boundary,
            variance: None,
            step: None,
            gamma: None,
            rho: None,
        }
    }
}

impl ModelBlock {
    pub fn build(&self) -> Result<ModelSpec> {
        let free = FreeParams { variance: self.variance, step: self.step, gamma: self.gamma, rho: self.rho };
        calibrate(self.family, free, self.regime)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WalkBlock {
    pub u_max: f64,
    pub spacing: f64,
    pub replicas: u64,
    pub step_cap: u64,
    pub batches: usize,
    pub bootstrap: usize,
    /// Seed of the renewal estimate, kept apart from the run seed so tables are
    /// shared between runs.
    pub seed: u64,
}

impl Default for WalkBlock {
    fn default() -> Self {
        let d = RenewalConfig::default();
        WalkBlock {
            u_max: d.u_max,
            spacing: d.spacing,
            replicas: d.replicas,
            step_cap: d.step_cap,
            batches: d.batches,
            bootstrap: d.bootstrap,
            seed: 0,
        }
    }
}

impl WalkBlock {
    pub fn renewal_config(&self) -> RenewalConfig {
        RenewalConfig {
            u_max: self.u_max,
            spacing: self.spacing,
            replicas: self.replicas,
            step_cap: self.step_cap,
            batches: self.batches,
            bootstrap: self.bootstrap,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineBlock {
    pub generations: u32,
    /// Start heights; empty means one lattice step (or 1 for Gaussian steps).
    pub x: Vec<f64>,
    pub killing: bool,
    /// Pruning height above the start; absent means no pruning.
    pub prune_gap: Option<f64>,
    pub replicas: u64,
    pub budget: u64,
}

impl Default for EngineBlock {
    fn default() -> Self {
        EngineBlock {
            generations: 10,
            x: Vec::new(),
            killing: true,
            prune_gap: None,
            replicas: 10_000,
            budget: DEFAULT_BUDGET,
        }
    }
}

impl EngineBlock {
    pub fn starts(&self, model: &ModelSpec) -> Vec<f64> {
        if self.x.is_empty() {
            vec![model.lattice_span().unwrap_or(1.0)]
        } else {
            self.x.clone()
        }
    }

    pub fn kill_config(&self, x: f64) -> KillConfig {
        let barrier = if self.killing { Barrier::At(x) } else { Barrier::Disabled };
        let base = if self.killing { x } else { 0.0 };
        KillConfig {
            barrier,
            generations: self.generations,
            v_cap: self.prune_gap.map_or(f64::INFINITY, |g| base + g),
            budget: self.budget,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpineBlock {
    pub replicas: u64,
    /// Explicit tail levels; when empty a geometric grid is built from the naive run.
    pub y: Vec<f64>,
    pub y_points: usize,
    pub y_stretch: f64,
}

impl Default for SpineBlock {
    fn default() -> Self {
        SpineBlock { replicas: 10_000, y: Vec::new(), y_points: 8, y_stretch: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerpetuityBlock {
    pub q: QKind,
    pub start_x: f64,
    pub horizon: usize,
    pub epsilon: f64,
    pub replicas: u64,
    pub probe: bool,
    /// Highest level band for the excursion statistics (boundary models only).
    pub levels: usize,
}

impl Default for PerpetuityBlock {
    fn default() -> Self {
        PerpetuityBlock {
            q: QKind::Constant,
            start_x: 0.0,
            horizon: DEFAULT_HORIZON,
            epsilon: 0.1,
            replicas: 2000,
            probe: true,
            levels: 5,
        }
    }
}

impl PerpetuityBlock {
    pub fn perpetuity_config(&self) -> PerpetuityConfig {
        PerpetuityConfig {
            q_kind: self.q,
            start_x: self.start_x,
            horizon: self.horizon,
            epsilon: self.epsilon,
            keep_path: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisBlock {
    pub column: String,
    pub kind: TailKind,
    /// Empirical quantile range of the fit.
    pub range: (f64, f64),
    pub bootstrap: usize,
    /// MGF-bound exponent; defaults to the model's.
    pub rho: Option<f64>,
    pub theta_grid: Vec<f64>,
    pub mgf_generations: usize,
    pub k_cap: f64,
}

impl Default for AnalysisBlock {
    fn default() -> Self {
        AnalysisBlock {
            column: "D_trunc".into(),
            kind: TailKind::Exponential,
            range: (0.9, 0.999),
            bootstrap: 200,
            rho: None,
            theta_grid: (0..=16).map(|i| 0.001 * 2f64.powi(i)).collect(),
            mgf_generations: 40,
            k_cap: 1e3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Worker threads; absent means all available cores. Never affects results.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default)]
    pub model: ModelBlock,
    #[serde(default)]
    pub walk: WalkBlock,
    #[serde(default)]
    pub engine: EngineBlock,
    #[serde(default)]
    pub spine: SpineBlock,
    #[serde(default)]
    pub perpetuity: PerpetuityBlock,
    #[serde(default)]
    pub analysis: AnalysisBlock,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("brwtail-out")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: default_output_dir(),
            workers: None,
            model: ModelBlock::default(),
            walk: WalkBlock::default(),
            engine: EngineBlock::default(),
            spine: SpineBlock::default(),
            perpetuity: PerpetuityBlock::default(),
            analysis: AnalysisBlock::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Fails for integers above `i64::MAX` (seeds, mostly), which TOML cannot hold.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config cannot be written as TOML: {e}")))
    }

    /// Checks every block against its module's preconditions and returns the model.
    pub fn validate(&self) -> Result<ModelSpec> {
        let model = self.model.build()?;
        let w = &self.walk;
        if !(w.spacing > 0.0 && w.u_max > 4.0 * w.spacing) || w.replicas == 0 || w.batches == 0 {
            return Err(Error::Config("walk: need spacing > 0, u_max > 4·spacing, replicas > 0, batches > 0".into()));
        }
        let e = &self.engine;
        if e.replicas == 0 {
            return Err(Error::Config("engine: replicas must be positive".into()));
        }
        if e.prune_gap.is_some_and(|g| !(g > 0.0)) {
            return Err(Error::Config("engine: prune_gap must be positive".into()));
        }
        for x in e.starts(&model) {
            e.kill_config(x).validate().map_err(|err| Error::Config(format!("engine: {err}")))?;
        }
        let s = &self.spine;
        if s.replicas == 0 || (s.y.is_empty() && s.y_points < 2) {
            return Err(Error::Config("spine: need replicas > 0 and either y or y_points ≥ 2".into()));
        }
        if s.y.iter().any(|&y| !(y > 0.0)) || s.y.windows(2).any(|p| p[1] <= p[0]) {
            return Err(Error::Config("spine: y must be positive and increasing".into()));
        }
        let p = &self.perpetuity;
        p.perpetuity_config().validate().map_err(|err| Error::Config(format!("perpetuity: {err}")))?;
        if p.horizon == 0 || p.replicas == 0 {
            return Err(Error::Config("perpetuity: horizon and replicas must be positive".into()));
        }
        let a = &self.analysis;
        if !(0.0 <= a.range.0 && a.range.0 < a.range.1 && a.range.1 <= 1.0) {
            return Err(Error::Config(format!("analysis: invalid quantile range {:?}", a.range)));
        }
        if let Some(rho) = a.rho {
            if !(rho > 1.0 && rho <= 2.0) {
                return Err(Error::Config(format!("analysis: rho = {rho} outside (1, 2]")));
            }
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be positive".into()));
        }
        Ok(model)
    }

    /// Hash of everything that can change results: the worker count and the
    /// output location are excluded.
    pub fn content_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.workers = None;
        canonical.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))[..16].to_string()
    }

    /// Output directory, relocated under the output root when it is relative and
    /// the root variable is set.
    pub fn resolved_output_dir(&self) -> PathBuf {
        resolve_output(&self.output_dir)
    }
}

pub fn resolve_output(dir: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

/// Seed of one stage, derived from the run seed.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    crate::rng::replica_key(seed, crate::rng::stage_tag(stage), 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, back);
        assert!(cfg.validate().is_ok());
        let huge = ExperimentConfig { seed: u64::MAX, ..Default::default() };
        assert!(matches!(huge.to_toml(), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml("seed = 1\n[engine]\ngenerations = 4\nreplica = 10\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(ExperimentConfig::from_toml("sede = 1\n").is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = ExperimentConfig::from_toml(
            "seed = 7\n[model]\nfamily = \"gaussian_binary\"\nregime = \"subcritical\"\nvariance = 1.0\n[engine]\nx = [0.5, 1.0]\n",
        )
        .unwrap();
        let model = cfg.validate().unwrap();
        assert_eq!(model.regime, Regime::Subcritical);
        assert_eq!(cfg.engine.starts(&model), vec![0.5, 1.0]);
        assert_eq!(cfg.engine.replicas, EngineBlock::default().replicas);
    }

    #[test]
    fn invalid_blocks_fail_validation() {
        let mut cfg = ExperimentConfig::default();
        cfg.analysis.range = (0.9, 0.5);
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.model.variance = Some(1.0);
        cfg.model.family = Family::GaussianBinary;
        assert!(matches!(cfg.validate(), Err(Error::Calibration { .. })));
        let mut cfg = ExperimentConfig::default();
        cfg.engine.x = vec![-1.0];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_ignores_workers_and_location() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.workers = Some(3);
        b.output_dir = "elsewhere".into();
        assert_eq!(a.content_hash(), b.content_hash());
        b.seed = 1;
        assert_ne!(a.content_hash(), b.content_hash());
    }
}
