//! Sweep planning: iso-FLOP shape selection and the shape-by-data grid.

use std::collections::BTreeMap;

use drivescale_core::ledger;
use drivescale_model::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::config::{content_hash, DataVariant, PlanMode, StudyConfig};
use crate::CliError;

/// One training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    /// `[encoder layers, decoder layers, width]`
    pub shape: [usize; 3],
    pub seed: u64,
    pub variant: DataVariant,
    /// Distinct training examples drawn from the dataset.
    pub dataset_examples: usize,
    pub train: TrainConfig,
    /// Target compute for iso-FLOP jobs.
    pub budget: Option<f64>,
}

impl Job {
    pub fn model_config(&self, cfg: &StudyConfig) -> ModelConfig {
        let [n, m, d] = self.shape;
        ModelConfig::new(n, m, d, &cfg.data.train_world(), cfg.vocab)
    }

    pub fn flops(&self, cfg: &StudyConfig) -> Result<u64, CliError> {
        Ok(ledger::train_flops(
            &self.model_config(cfg).shape(),
            self.train.examples(),
        )?)
    }

    /// Content hash of everything that determines the run's result.
    pub fn key(&self, cfg: &StudyConfig) -> String {
        content_hash(&(
            self,
            &cfg.data,
            &cfg.vocab,
            &cfg.metrics,
            &cfg.thresholds,
            &cfg.buckets,
        ))[..16]
            .to_string()
    }
}

/// A candidate shape left out of a budget, with the reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub budget: f64,
    pub shape: [usize; 3],
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    pub mode: PlanMode,
    pub jobs: Vec<Job>,
    pub rejected: Vec<Rejection>,
    pub config_hash: String,
}

/// Candidate shapes with equal encoder and decoder depth and the configured
/// width-to-depth ratios, ordered by parameter count.
pub fn candidate_shapes(cfg: &StudyConfig) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for layers in 1..=cfg.plan.max_layers {
        for &ratio in &cfg.plan.width_ratios {
            let shape = [layers, layers, ratio * 2 * layers];
            let mc = ModelConfig::new(
                shape[0],
                shape[1],
                shape[2],
                &cfg.data.train_world(),
                cfg.vocab,
            );
            if mc.validate().is_ok() && !out.contains(&shape) {
                out.push(shape);
            }
        }
    }
    out.sort_by_key(|s| ((12 * s[0] + 16 * s[1]) * s[2] * s[2], s[0]));
    out
}

pub fn train_config(cfg: &StudyConfig, steps: usize, seed: u64) -> TrainConfig {
    let o = &cfg.optim;
    TrainConfig {
        batch_examples: o.batch_examples,
        total_steps: steps,
        warmup_steps: (o.warmup_fraction * steps as f64).floor() as usize,
        peak_lr: o.peak_lr,
        final_lr: o.final_lr,
        weight_decay: o.weight_decay,
        clip_norm: o.clip_norm,
        seed,
    }
}

/// Plans the sweep. `available` holds the number of training examples of
/// each data variant.
pub fn plan_sweep(
    cfg: &StudyConfig,
    available: &BTreeMap<DataVariant, usize>,
) -> Result<SweepPlan, CliError> {
    let mut jobs = Vec::new();
    let mut rejected = Vec::new();
    let batch = cfg.optim.batch_examples;
    let have = |v: DataVariant| available.get(&v).copied().unwrap_or(0);
    match cfg.plan.mode {
        PlanMode::Isoflop => {
            let candidates = candidate_shapes(cfg);
            let tol = (1.0 + cfg.plan.rel_tol).ln();
            for &budget in &cfg.plan.budgets {
                for &variant in &cfg.plan.variants {
                    let mut feasible = Vec::new();
                    for &shape in &candidates {
                        let mc = ModelConfig::new(
                            shape[0],
                            shape[1],
                            shape[2],
                            &cfg.data.train_world(),
                            cfg.vocab,
                        );
                        let per_batch =
                            ledger::flops_per_example(&mc.shape())? as f64 * batch as f64;
                        let steps = (budget / per_batch).floor() as usize;
                        let reason = if steps < cfg.plan.min_steps {
                            Some(format!("{steps} steps < minimum {}", cfg.plan.min_steps))
                        } else if (steps as f64 * per_batch / budget).ln().abs() > tol {
                            Some("compute falls outside the band tolerance".to_string())
                        } else if steps * batch > have(variant) {
                            Some(format!(
                                "needs {} examples, dataset has {} (epoch reuse)",
                                steps * batch,
                                have(variant)
                            ))
                        } else {
                            None
                        };
                        match reason {
                            Some(reason) => {
                                if variant == cfg.plan.variants[0] {
                                    rejected.push(Rejection {
                                        budget,
                                        shape,
                                        reason,
                                    });
                                }
                            }
                            None => feasible.push((shape, steps)),
                        }
                    }
                    let want = cfg.plan.shapes_per_budget;
                    if feasible.len() < want.max(1) {
                        let why: Vec<String> = rejected
                            .iter()
                            .filter(|r| r.budget == budget)
                            .map(|r| format!("{:?}: {}", r.shape, r.reason))
                            .collect();
                        return Err(CliError::Config(format!(
                            "budget {budget:e} affords {} of the {want} required shapes ({})",
                            feasible.len(),
                            why.join("; ")
                        )));
                    }
                    // spread the picks over the feasible range
                    let picks: Vec<usize> = if want <= 1 {
                        vec![feasible.len() / 2]
                    } else {
                        (0..want)
                            .map(|i| {
                                ((i * (feasible.len() - 1)) as f64 / (want - 1) as f64).round()
                                    as usize
                            })
                            .collect()
                    };
                    for &seed in &cfg.plan.seeds {
                        for &i in &picks {
                            let (shape, steps) = feasible[i];
                            jobs.push(Job {
                                shape,
                                seed,
                                variant,
                                dataset_examples: steps * batch,
                                train: train_config(cfg, steps, seed),
                                budget: Some(budget),
                            });
                        }
                    }
                }
            }
        }
        PlanMode::Grid => {
            for &variant in &cfg.plan.variants {
                for &seed in &cfg.plan.seeds {
                    for &shape in &cfg.plan.shapes {
                        let mc = ModelConfig::new(
                            shape[0],
                            shape[1],
                            shape[2],
                            &cfg.data.train_world(),
                            cfg.vocab,
                        );
                        mc.validate().map_err(|e| CliError::Config(e.to_string()))?;
                        for &size in &cfg.plan.dataset_sizes {
                            if size > have(variant) {
                                return Err(CliError::Config(format!(
                                    "dataset size {size} exceeds the {} available examples",
                                    have(variant)
                                )));
                            }
                            if (size * cfg.plan.epochs) % batch != 0 {
                                return Err(CliError::Config(format!(
                                    "dataset size {size} x {} epochs is not a multiple of the batch {batch}",
                                    cfg.plan.epochs
                                )));
                            }
                            jobs.push(Job {
                                shape,
                                seed,
                                variant,
                                dataset_examples: size,
                                train: train_config(cfg, size * cfg.plan.epochs / batch, seed),
                                budget: None,
                            });
                        }
                    }
                }
            }
        }
    }
    for j in &jobs {
        j.train
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    Ok(SweepPlan {
        mode: cfg.plan.mode,
        jobs,
        rejected,
        config_hash: cfg.hash(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plenty() -> BTreeMap<DataVariant, usize> {
        [
            (DataVariant::Full, 1 << 30),
            (DataVariant::WithoutAv, 1 << 30),
        ]
        .into()
    }

    fn fpe(cfg: &StudyConfig, shape: [usize; 3]) -> u64 {
        let mc = ModelConfig::new(
            shape[0],
            shape[1],
            shape[2],
            &cfg.data.train_world(),
            cfg.vocab,
        );
        ledger::flops_per_example(&mc.shape()).unwrap()
    }

    #[test]
    fn one_budget_one_shape_steps_are_exact() {
        let mut cfg = StudyConfig::default();
        cfg.plan.max_layers = 1;
        cfg.plan.width_ratios = vec![8];
        cfg.plan.shapes_per_budget = 1;
        let per_batch = fpe(&cfg, [1, 1, 16]) * 16;
        cfg.plan.budgets = vec![(per_batch * 100 + per_batch / 3) as f64];
        let plan = plan_sweep(&cfg, &plenty()).unwrap();
        assert_eq!(plan.jobs.len(), 1);
        assert_eq!(plan.jobs[0].shape, [1, 1, 16]);
        assert_eq!(plan.jobs[0].train.total_steps, 100);
        // doubling the budget doubles the steps
        cfg.plan.budgets = vec![(per_batch * 200) as f64];
        assert_eq!(
            plan_sweep(&cfg, &plenty()).unwrap().jobs[0]
                .train
                .total_steps,
            200
        );
    }

    #[test]
    fn desk_default_has_twelve_runs_in_band() {
        let cfg = StudyConfig::default();
        let plan = plan_sweep(&cfg, &plenty()).unwrap();
        assert_eq!(plan.jobs.len(), 12);
        for budget in &cfg.plan.budgets {
            let band: Vec<&Job> = plan
                .jobs
                .iter()
                .filter(|j| j.budget == Some(*budget))
                .collect();
            assert_eq!(band.len(), 4);
            let mut shapes: Vec<[usize; 3]> = band.iter().map(|j| j.shape).collect();
            shapes.dedup();
            assert_eq!(shapes.len(), 4);
            for j in band {
                let c = j.flops(&cfg).unwrap() as f64;
                assert!(c <= *budget && (budget / c).ln() <= (1.0 + cfg.plan.rel_tol).ln());
            }
        }
    }

    #[test]
    fn data_hungry_shapes_are_rejected() {
        let cfg = StudyConfig::default();
        let few: BTreeMap<DataVariant, usize> = [(DataVariant::Full, 3000)].into();
        match plan_sweep(&cfg, &few) {
            Ok(plan) => assert!(plan
                .rejected
                .iter()
                .any(|r| r.reason.contains("epoch reuse"))),
            Err(e) => assert!(matches!(e, CliError::Config(_))),
        }
        let none: BTreeMap<DataVariant, usize> = [(DataVariant::Full, 10)].into();
        assert!(matches!(plan_sweep(&cfg, &none), Err(CliError::Config(_))));
    }

    #[test]
    fn grid_plan_crosses_shapes_and_sizes() {
        let mut cfg = StudyConfig::default();
        cfg.plan.mode = PlanMode::Grid;
        cfg.plan.seeds = vec![0, 1, 2];
        let plan = plan_sweep(&cfg, &plenty()).unwrap();
        assert_eq!(plan.jobs.len(), 27);
        assert!(plan
            .jobs
            .iter()
            .all(|j| j.train.examples() == j.dataset_examples as u64));
        let keys: std::collections::BTreeSet<String> =
            plan.jobs.iter().map(|j| j.key(&cfg)).collect();
        assert_eq!(keys.len(), 27);
    }
}
