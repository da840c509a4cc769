//! Study configuration: one TOML file, overridable by `--set key=value`.

use std::path::Path;

use drivescale_core::closed_loop::{CalibrationSpec, SimConfig};
use drivescale_core::codec::TokenVocab;
use drivescale_core::eval::{BucketRules, MissThresholds};
use drivescale_core::synth::{WindowSpec, WorldConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorldPreset {
    Toy,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub preset: WorldPreset,
    pub seed: u64,
    pub train_segments: usize,
    pub eval_seed: u64,
    pub eval_segments: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            preset: WorldPreset::Toy,
            seed: 0,
            train_segments: 512,
            eval_seed: 999,
            eval_segments: 10,
        }
    }
}

impl DataConfig {
    pub fn world(&self, seed: u64, segments: usize) -> WorldConfig {
        let base = match self.preset {
            WorldPreset::Toy => WorldConfig::toy(),
            WorldPreset::Full => WorldConfig::default(),
        };
        WorldConfig {
            seed,
            num_segments: segments,
            ..base
        }
    }

    pub fn train_world(&self) -> WorldConfig {
        self.world(self.seed, self.train_segments)
    }

    pub fn eval_world(&self) -> WorldConfig {
        self.world(self.eval_seed, self.eval_segments)
    }

    pub fn windows(&self) -> WindowSpec {
        WindowSpec::from_config(&self.train_world())
    }
}

/// Optimizer settings shared by every job; step counts come from the plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub batch_examples: usize,
    /// Warm-up length as a fraction of the run.
    pub warmup_fraction: f64,
    pub peak_lr: f64,
    pub final_lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            batch_examples: 16,
            warmup_fraction: 0.1,
            peak_lr: 3e-3,
            final_lr: 3e-4,
            weight_decay: 0.01,
            clip_norm: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    /// Several shapes per compute budget.
    Isoflop,
    /// Every shape crossed with every dataset size.
    Grid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataVariant {
    Full,
    /// AV trajectories removed from the modeled agents.
    WithoutAv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanConfig {
    pub mode: PlanMode,
    pub seeds: Vec<u64>,
    pub variants: Vec<DataVariant>,
    /// Iso-FLOP budgets, ascending.
    pub budgets: Vec<f64>,
    pub shapes_per_budget: usize,
    /// Candidate width-to-depth ratios.
    pub width_ratios: Vec<usize>,
    /// Candidate layers per stack (encoder = decoder).
    pub max_layers: usize,
    pub min_steps: usize,
    pub rel_tol: f64,
    /// Grid shapes as `[enc, dec, width]`.
    pub shapes: Vec<[usize; 3]>,
    pub dataset_sizes: Vec<usize>,
    pub epochs: usize,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            mode: PlanMode::Isoflop,
            seeds: vec![0],
            variants: vec![DataVariant::Full],
            budgets: vec![1e10, 3e10, 1e11],
            shapes_per_budget: 4,
            width_ratios: vec![8, 16],
            max_layers: 4,
            min_steps: 8,
            rel_tol: 0.1,
            shapes: vec![[1, 1, 16], [2, 2, 32], [3, 3, 48]],
            dataset_sizes: vec![512, 1024, 2048],
            epochs: 1,
        }
    }
}

/// Open-loop metrics attached to each run record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Eval scenes scored per run; 0 disables.
    pub scenes: usize,
    pub rollouts: usize,
    pub k: usize,
    pub temperature: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            scenes: 8,
            rollouts: 16,
            k: 6,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub sample_counts: Vec<usize>,
    pub scenes: usize,
    pub k: usize,
    pub temperature: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            sample_counts: (3..=10).map(|e| 1usize << e).collect(),
            scenes: 20,
            k: 6,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClosedLoopConfig {
    pub calibration_seed: u64,
    pub calibration_scenarios: usize,
    pub eval_seed: u64,
    pub eval_scenarios: usize,
    pub sim_seconds: f64,
    pub sim: SimConfig,
    pub calibration: CalibrationSpec,
    pub temperature: f64,
    /// Plan length in steps for the scripted policies.
    pub horizon: usize,
    /// Planner fine-tuning compute as a fraction of pretraining compute.
    pub planner_fraction: f64,
    pub speed_center: (f64, f64),
    pub speed_spread: f64,
}

impl Default for ClosedLoopConfig {
    fn default() -> Self {
        Self {
            calibration_seed: 7001,
            calibration_scenarios: 10,
            eval_seed: 7002,
            eval_scenarios: 10,
            sim_seconds: 8.0,
            sim: SimConfig::default(),
            calibration: CalibrationSpec::default(),
            temperature: 1.0,
            horizon: 16,
            planner_fraction: 0.5,
            speed_center: (0.7, 1.0),
            speed_spread: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub seed: u64,
    /// Jobs trained concurrently.
    pub max_parallel: usize,
    pub vocab: TokenVocab,
    pub data: DataConfig,
    pub optim: OptimConfig,
    pub plan: PlanConfig,
    pub metrics: MetricsConfig,
    pub inference: InferenceConfig,
    pub closedloop: ClosedLoopConfig,
    pub thresholds: MissThresholds,
    pub buckets: BucketRules,
    /// Relative tolerance used to band run records by compute.
    pub band_tol: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            max_parallel: 1,
            vocab: TokenVocab::default(),
            data: DataConfig::default(),
            optim: OptimConfig::default(),
            plan: PlanConfig::default(),
            metrics: MetricsConfig::default(),
            inference: InferenceConfig::default(),
            closedloop: ClosedLoopConfig::default(),
            thresholds: MissThresholds::default(),
            buckets: BucketRules::default(),
            band_tol: 0.1,
        }
    }
}

impl StudyConfig {
    /// Parses TOML text and applies `key.path=value` overrides, where the
    /// value is TOML (bare words are taken as strings).
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut root: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override `{o}` is not key=value")))?;
            let value = parse_value(raw.trim());
            set_path(&mut root, key.trim(), value)?;
        }
        let cfg: StudyConfig = root
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.vocab
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.data
            .train_world()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.max_parallel == 0 {
            return bad("max_parallel must be >= 1".into());
        }
        let o = &self.optim;
        if o.batch_examples == 0 || !(0.0..1.0).contains(&o.warmup_fraction) {
            return bad("optim: need batch_examples >= 1 and warmup_fraction in [0, 1)".into());
        }
        if !(o.peak_lr > o.final_lr && o.final_lr > 0.0) {
            return bad("optim: need peak_lr > final_lr > 0".into());
        }
        let p = &self.plan;
        if p.seeds.is_empty() || p.variants.is_empty() {
            return bad("plan: seeds and variants must be non-empty".into());
        }
        if p.budgets.windows(2).any(|w| !(w[0] < w[1])) || p.budgets.iter().any(|b| !(*b > 0.0)) {
            return bad("plan: budgets must be positive and strictly ascending".into());
        }
        if !(p.rel_tol > 0.0 && self.band_tol > 0.0) {
            return bad("rel_tol and band_tol must be positive".into());
        }
        if p.epochs == 0 || p.dataset_sizes.iter().any(|&d| d == 0) {
            return bad("plan: epochs and dataset sizes must be >= 1".into());
        }
        if self.inference.sample_counts.is_empty()
            || self.inference.sample_counts.iter().any(|&c| c == 0)
        {
            return bad("inference: sample counts must be >= 1".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON of the resolved config.
    pub fn hash(&self) -> String {
        content_hash(self)
    }
}

pub fn content_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    hex(&Sha256::digest(json))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("`{part}` in `{key}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(StudyConfig::parse("", &[]).unwrap(), StudyConfig::default());
    }

    #[test]
    fn overrides_apply_after_file() {
        let cfg = StudyConfig::parse(
            "seed = 3\n[plan]\nbudgets = [1e9, 2e9]\n",
            &[
                "seed=5".into(),
                "plan.mode=grid".into(),
                "optim.batch_examples = 4".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.plan.mode, PlanMode::Grid);
        assert_eq!(cfg.plan.budgets, vec![1e9, 2e9]);
        assert_eq!(cfg.optim.batch_examples, 4);
    }

    #[test]
    fn bad_configs_are_config_errors() {
        for (text, o) in [
            ("nonsense = 1", vec![]),
            ("[plan]\nbudgets = [2e9, 1e9]", vec![]),
            ("", vec!["optim.final_lr=1.0".to_string()]),
            ("", vec!["seed".to_string()]),
        ] {
            assert!(
                matches!(StudyConfig::parse(text, &o), Err(CliError::Config(_))),
                "{text} {o:?}"
            );
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = StudyConfig::default();
        let b = StudyConfig {
            seed: 1,
            ..a.clone()
        };
        assert_eq!(a.hash(), StudyConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
