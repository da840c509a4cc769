//! AdamW training with linear warm-up and cosine decay.

use std::collections::BTreeSet;

use drivescale_core::fit::RunRecord;
use drivescale_core::ledger;
use drivescale_core::synth::Example;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{JointModel, LossBreakdown, Targets};
use crate::tape::Mat;
use crate::ModelError;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_examples: usize,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub final_lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_examples: 32,
            total_steps: 1000,
            warmup_steps: 100,
            peak_lr: 3e-3,
            final_lr: 3e-4,
            weight_decay: 0.01,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.into()));
        if self.batch_examples == 0 || self.total_steps == 0 {
            return bad("batch and step counts must be >= 1");
        }
        if self.warmup_steps >= self.total_steps {
            return bad("warmup_steps must be < total_steps");
        }
        if !(self.peak_lr > self.final_lr && self.final_lr > 0.0) {
            return bad("need peak_lr > final_lr > 0");
        }
        if !(self.weight_decay >= 0.0 && self.clip_norm > 0.0) {
            return bad("weight_decay must be >= 0 and clip_norm > 0");
        }
        Ok(())
    }

    /// Learning rate for optimizer step `step` in `1..=total_steps`: linear
    /// warm-up to `peak_lr` at `warmup_steps`, then cosine decay reaching
    /// `final_lr` at `total_steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * step as f64 / self.warmup_steps as f64;
        }
        if step == self.warmup_steps {
            return self.peak_lr;
        }
        if step >= self.total_steps {
            return self.final_lr;
        }
        let frac =
            (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        self.final_lr
            + 0.5 * (self.peak_lr - self.final_lr) * (1.0 + (std::f64::consts::PI * frac).cos())
    }

    pub fn examples(&self) -> u64 {
        (self.batch_examples * self.total_steps) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub record: RunRecord,
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
}

impl TrainOutcome {
    /// Mean loss over the last tenth of training.
    pub fn final_train_loss(&self) -> f64 {
        let n = (self.losses.len() / 10).max(1);
        self.losses[self.losses.len() - n..].iter().sum::<f64>() / n as f64
    }
}

/// Token-weighted loss over a dataset.
pub fn evaluate(model: &JointModel, examples: &[Example]) -> Result<LossBreakdown, ModelError> {
    if examples.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let parts: Vec<LossBreakdown> = examples
        .par_iter()
        .map(|ex| model.teacher_forced_loss(&ex.context, &Targets::from_example(ex)))
        .collect::<Result<_, _>>()?;
    Ok(LossBreakdown::merge(&parts))
}

/// Deterministic epoch-shuffled batches.
struct Batches {
    order: Vec<usize>,
    at: usize,
    rng: ChaCha8Rng,
}

impl Batches {
    fn new(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Self { order, at: 0, rng }
    }

    fn next(&mut self, n: usize) -> Vec<usize> {
        (0..n)
            .map(|_| {
                if self.at == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.at = 0;
                }
                self.at += 1;
                self.order[self.at - 1]
            })
            .collect()
    }
}

struct AdamW {
    m: Vec<Mat>,
    v: Vec<Mat>,
    step: i32,
}

impl AdamW {
    fn new(params: &[Mat]) -> Self {
        Self {
            m: params.iter().map(|p| Mat::zeros(p.dim())).collect(),
            v: params.iter().map(|p| Mat::zeros(p.dim())).collect(),
            step: 0,
        }
    }

    fn update(
        &mut self,
        params: &mut [Mat],
        grads: &[Mat],
        decay: &[bool],
        lr: f64,
        weight_decay: f64,
    ) {
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step);
        let c2 = 1.0 - BETA2.powi(self.step);
        for i in 0..params.len() {
            let wd = if decay[i] { weight_decay } else { 0.0 };
            ndarray::Zip::from(&mut params[i])
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(&grads[i])
                .for_each(|p, m, v, &g| {
                    *m = BETA1 * *m + (1.0 - BETA1) * g;
                    *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                    let step = (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                    *p -= lr * (step + wd * *p);
                });
        }
    }
}

/// Trains `model` in place and evaluates it on `eval_set`.
pub fn train(
    model: &mut JointModel,
    train_set: &[Example],
    eval_set: &[Example],
    cfg: &TrainConfig,
    run_id: &str,
) -> Result<TrainOutcome, ModelError> {
    cfg.validate()?;
    if train_set.is_empty() || eval_set.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let modeled = train_set[0].modeled.len();
    if train_set.iter().any(|e| e.modeled.len() != modeled) {
        return Err(ModelError::Shape(
            "examples disagree on the modeled agent count".into(),
        ));
    }
    let decay: Vec<bool> = model.param_info().iter().map(|i| i.decay).collect();
    let mut opt = AdamW::new(model.params());
    let mut batches = Batches::new(train_set.len(), cfg.seed);
    let mut seen = BTreeSet::new();
    let mut losses = Vec::with_capacity(cfg.total_steps);
    for step in 1..=cfg.total_steps {
        let idx = batches.next(cfg.batch_examples);
        seen.extend(idx.iter().copied());
        let shared: &JointModel = model;
        let results: Vec<(LossBreakdown, Vec<Mat>)> = idx
            .par_iter()
            .map(|&i| {
                let ex = &train_set[i];
                shared.loss_and_grad(&ex.context, &Targets::from_example(ex))
            })
            .collect::<Result<_, _>>()?;
        let inv = 1.0 / results.len() as f64;
        let mut grads: Vec<Mat> = shared
            .params()
            .iter()
            .map(|p| Mat::zeros(p.dim()))
            .collect();
        let mut loss = 0.0;
        for (l, g) in &results {
            loss += l.loss * inv;
            for (acc, gi) in grads.iter_mut().zip(g) {
                acc.scaled_add(inv, gi);
            }
        }
        if !loss.is_finite() {
            return Err(ModelError::Diverged { step, loss });
        }
        losses.push(loss);
        let norm = grads
            .iter()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if norm > cfg.clip_norm {
            let s = cfg.clip_norm / norm;
            grads.iter_mut().for_each(|g| *g *= s);
        }
        opt.update(
            model.params_mut(),
            &grads,
            &decay,
            cfg.lr_at(step),
            cfg.weight_decay,
        );
    }
    let eval = evaluate(model, eval_set)?;
    if !eval.loss.is_finite() {
        return Err(ModelError::Diverged {
            step: cfg.total_steps,
            loss: eval.loss,
        });
    }
    let shape = model.config().shape_for(modeled);
    let examples = cfg.examples();
    let params = model.param_count();
    debug_assert_eq!(params, ledger::param_count(&shape)?);
    let miles = seen.iter().map(|&i| train_set[i].miles()).sum();
    Ok(TrainOutcome {
        record: RunRecord {
            run_id: run_id.to_string(),
            seed: cfg.seed,
            shape,
            params,
            examples,
            flops: ledger::train_flops(&shape, examples)?,
            eval_loss: eval.loss,
            per_type_losses: eval.per_type(),
            min_ade: None,
            w_ade: None,
            miles,
        },
        losses,
    })
}

/// Fine-tunes a pretrained model as a single-agent planner on
/// route-conditioned examples, spending at most `budget_flops`. The step
/// count is the largest that fits the budget at the configured batch.
pub fn finetune_planner(
    model: &mut JointModel,
    dataset: &[Example],
    eval_set: &[Example],
    budget_flops: u64,
    cfg: &TrainConfig,
    run_id: &str,
) -> Result<TrainOutcome, ModelError> {
    if dataset.iter().chain(eval_set).any(|e| e.modeled.len() != 1) {
        return Err(ModelError::Shape(
            "planner examples must model exactly one agent".into(),
        ));
    }
    let per_batch =
        ledger::flops_per_example(&model.config().shape_for(1))? * cfg.batch_examples as u64;
    let steps = (budget_flops / per_batch) as usize;
    if steps < 2 {
        return Err(ModelError::InvalidConfig(format!(
            "budget {budget_flops} affords {steps} steps at {per_batch} FLOPs per batch"
        )));
    }
    let cfg = TrainConfig {
        total_steps: steps,
        warmup_steps: cfg.warmup_steps.min(steps / 10),
        ..*cfg
    };
    train(model, dataset, eval_set, &cfg, run_id)
}
