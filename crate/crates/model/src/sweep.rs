//! Open-loop metrics of sampled rollouts as a function of sample count.

use drivescale_core::eval::{
    self, AgentGroundTruth, BucketRules, ClusteredForecast, MissThresholds, OpenLoopMetrics,
    SweepRow, Track,
};
use drivescale_core::ledger;
use drivescale_core::synth::Example;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::JointModel;
use crate::sample::{sample_rollouts, ModeledAgent, SampleSpec};
use crate::ModelError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub sample_counts: Vec<usize>,
    /// Clusters per forecast.
    pub k: usize,
    pub temperature: f64,
    pub seed: u64,
    pub thresholds: MissThresholds,
    pub rules: BucketRules,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            sample_counts: (3..=10).map(|e| 1usize << e).collect(),
            k: 6,
            temperature: 1.0,
            seed: 0,
            thresholds: MissThresholds::default(),
            rules: BucketRules::default(),
        }
    }
}

/// Ground truth of every modeled agent of an example.
pub fn ground_truth(ex: &Example, step_seconds: f64) -> Vec<AgentGroundTruth> {
    ex.modeled_targets()
        .map(|t| AgentGroundTruth {
            current: t.seed[1],
            future: t.future.clone(),
            speed: t.initial_speed,
            step_seconds,
        })
        .collect()
}

/// Clustered forecasts for each modeled agent of `ex` from the first `n`
/// of `rollouts[agent]`.
fn forecasts(
    rollouts: &[Vec<Track>],
    gts: &[AgentGroundTruth],
    n: usize,
    cfg: &SweepConfig,
) -> Result<Vec<ClusteredForecast>, ModelError> {
    rollouts
        .iter()
        .zip(gts)
        .map(|(tracks, gt)| {
            let radius = cfg.thresholds.at(gt.horizon_seconds(), gt.speed).0;
            Ok(eval::aggregate(&tracks[..n], cfg.k.min(n), radius)?)
        })
        .collect()
}

/// Samples `max(sample_counts)` rollouts per example once and scores the
/// leading `n` for every `n`, so larger counts extend smaller ones.
pub fn inference_sweep(
    model: &JointModel,
    examples: &[Example],
    cfg: &SweepConfig,
) -> Result<Vec<SweepRow>, ModelError> {
    let modeled = examples.first().map_or(0, |e| e.modeled.len());
    let shape = model.config().shape_for(modeled.max(1));
    open_loop_by_count(model, examples, cfg)?
        .into_iter()
        .zip(&cfg.sample_counts)
        .map(|(m, &n)| {
            Ok(SweepRow {
                samples: n as u64,
                flops: ledger::inference_flops(&shape, n as u64)?,
                min_ade: m.min_ade,
                min_fde: m.min_fde,
                miss_rate: m.miss_rate,
                map: m.map,
            })
        })
        .collect()
}

/// Open-loop metrics over all modeled agents for each sample count.
pub fn open_loop_by_count(
    model: &JointModel,
    examples: &[Example],
    cfg: &SweepConfig,
) -> Result<Vec<OpenLoopMetrics>, ModelError> {
    if examples.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let max = *cfg
        .sample_counts
        .iter()
        .max()
        .ok_or_else(|| ModelError::InvalidConfig("no sample counts".into()))?;
    let step_seconds = model.config().vocab.token_dt;
    type Scored = (Vec<Vec<ClusteredForecast>>, Vec<AgentGroundTruth>);
    let per_scene: Vec<Scored> = examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let agents: Vec<ModeledAgent> = ex
                .modeled_targets()
                .map(|t| ModeledAgent {
                    slot: t.slot,
                    seed: t.seed,
                })
                .collect();
            let spec = SampleSpec {
                count: max,
                temperature: cfg.temperature,
                seed: cfg.seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                steps: None,
            };
            let rs = sample_rollouts(model, &ex.context, &agents, &spec)?;
            let per_agent: Vec<Vec<Track>> = (0..agents.len())
                .map(|a| rs.iter().map(|r| r.decoded[a].clone()).collect())
                .collect();
            let gts = ground_truth(ex, step_seconds);
            let fs = cfg
                .sample_counts
                .iter()
                .map(|&n| forecasts(&per_agent, &gts, n, cfg))
                .collect::<Result<_, _>>()?;
            Ok((fs, gts))
        })
        .collect::<Result<_, ModelError>>()?;
    (0..cfg.sample_counts.len())
        .map(|j| {
            let mut fs = Vec::new();
            let mut gts = Vec::new();
            for (scene_fs, scene_gts) in &per_scene {
                fs.extend(scene_fs[j].iter().cloned());
                gts.extend(scene_gts.iter().cloned());
            }
            Ok(eval::evaluate(&fs, &gts, &cfg.thresholds, &cfg.rules)?)
        })
        .collect()
}
