//! Autoregressive joint sampling with per-layer key/value caches.
//!
//! Rollouts are drawn in fixed-size chunks, each with its own RNG stream,
//! so results do not depend on thread scheduling.

use drivescale_core::codec::{self, Point, Token};
use drivescale_core::synth::{AgentHistory, SceneContext};
use ndarray::{s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{Attn, JointModel, Norm};
use crate::tape::{self, attention_forward, Mask, Mat, Tape};
use crate::ModelError;

const CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub count: usize,
    /// Softmax temperature; `0` picks the most likely token.
    pub temperature: f64,
    pub seed: u64,
    /// Steps to sample; `None` samples the full horizon.
    pub steps: Option<usize>,
}

/// A modeled agent: its context slot and the two positions (previous and
/// current) that anchor token decoding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeledAgent {
    pub slot: usize,
    pub seed: [Point; 2],
}

impl ModeledAgent {
    /// Anchors from the last two history states. A missing previous state
    /// is extrapolated backwards from the current velocity.
    pub fn from_history(ctx: &SceneContext, slot: usize, token_dt: f64) -> Option<Self> {
        let h: &AgentHistory = ctx.agents.get(slot)?;
        let n = h.states.len();
        let cur = h.states.last().filter(|s| s.valid)?;
        let now = [cur.x, cur.y];
        let prev = match n.checked_sub(2).map(|i| &h.states[i]) {
            Some(p) if p.valid => [p.x, p.y],
            _ => [cur.x - cur.vx * token_dt, cur.y - cur.vy * token_dt],
        };
        Some(Self {
            slot,
            seed: [prev, now],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointRollout {
    /// `[M][steps]` sampled tokens.
    pub tokens: Vec<Vec<Token>>,
    /// Model log-probability of each sampled token (temperature 1).
    pub log_probs: Vec<Vec<f64>>,
    /// Decoded future positions per agent.
    pub decoded: Vec<Vec<Point>>,
}

fn norm(x: &Mat, p: &[Mat], n: Norm) -> Mat {
    tape::normalize(x).0 * &p[n.gain] + &p[n.bias]
}

pub fn sample_rollouts(
    model: &JointModel,
    ctx: &SceneContext,
    agents: &[ModeledAgent],
    spec: &SampleSpec,
) -> Result<Vec<JointRollout>, ModelError> {
    let cfg = model.config();
    let steps = spec.steps.unwrap_or(cfg.future_steps);
    if steps == 0 || steps > cfg.future_steps {
        return Err(ModelError::PrefixTooLong {
            have: steps,
            max: cfg.future_steps,
        });
    }
    if agents.is_empty() {
        return Err(ModelError::Shape("no modeled agents".into()));
    }
    if !(spec.temperature >= 0.0 && spec.temperature.is_finite()) {
        return Err(ModelError::InvalidConfig(
            "temperature must be finite and >= 0".into(),
        ));
    }
    let inputs = model.scene_inputs(ctx)?;
    for a in agents {
        if a.slot >= cfg.slots.agents || !inputs.valid[1 + a.slot] {
            return Err(ModelError::Shape(format!(
                "modeled slot {} is not a valid context agent",
                a.slot
            )));
        }
    }
    let mut t = Tape::new(&model.params);
    let (scene, key_mask) = model.encode_on(&mut t, &inputs);
    let scene = t.value(scene).clone();
    let p = &model.params;
    let cross: Vec<(Mat, Mat)> = model
        .layout
        .decoder
        .iter()
        .map(|l| (scene.dot(&p[l.cross.k]), scene.dot(&p[l.cross.v])))
        .collect();
    let chunks: Vec<usize> = (0..spec.count.div_ceil(CHUNK)).collect();
    let out: Result<Vec<Vec<JointRollout>>, ModelError> = chunks
        .par_iter()
        .map(|&c| {
            let n = CHUNK.min(spec.count - c * CHUNK);
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(c as u64);
            let ctx = ChunkContext {
                model,
                scene: &scene,
                cross: &cross,
                key_mask: &key_mask,
                agents,
            };
            ctx.run(n, steps, spec.temperature, &mut rng)
        })
        .collect();
    Ok(out?.into_iter().flatten().collect())
}

struct ChunkContext<'a> {
    model: &'a JointModel,
    scene: &'a Mat,
    cross: &'a [(Mat, Mat)],
    key_mask: &'a Mask,
    agents: &'a [ModeledAgent],
}

impl ChunkContext<'_> {
    fn self_attention(
        &self,
        x: &Mat,
        attn: Attn,
        cache: &mut [(Vec<f64>, Vec<f64>)],
        n: usize,
    ) -> Mat {
        let p = &self.model.params;
        let m = self.agents.len();
        let d = x.ncols();
        let (q, k, v) = (x.dot(&p[attn.q]), x.dot(&p[attn.k]), x.dot(&p[attn.v]));
        let mut out = Array2::zeros((n * m, d));
        for (r, (kc, vc)) in cache.iter_mut().enumerate() {
            let rows = s![r * m..(r + 1) * m, ..];
            kc.extend(k.slice(rows).iter());
            vc.extend(v.slice(rows).iter());
            let keys = kc.len() / d;
            let kv = ArrayView2::from_shape((keys, d), kc).unwrap();
            let vv = ArrayView2::from_shape((keys, d), vc).unwrap();
            let (a, _) =
                attention_forward(q.slice(rows), kv, vv, self.model.config().heads, &Mask::All);
            out.slice_mut(rows).assign(&a);
        }
        out.dot(&p[attn.o])
    }

    fn run(
        &self,
        n: usize,
        steps: usize,
        temperature: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<JointRollout>, ModelError> {
        let model = self.model;
        let cfg = model.config();
        let l = &model.layout;
        let p = &model.params;
        let m = self.agents.len();
        let v2 = cfg.vocab.size();
        let rows = n * m;
        let agent_rows: Vec<usize> = (0..rows).map(|i| 1 + self.agents[i % m].slot).collect();
        let agent_emb = self.scene.select(Axis(0), &agent_rows);
        let mut caches: Vec<Vec<(Vec<f64>, Vec<f64>)>> = l
            .decoder
            .iter()
            .map(|_| vec![Default::default(); n])
            .collect();
        let mut prev = vec![v2; rows];
        let mut tokens = vec![vec![vec![0 as Token; steps]; m]; n];
        let mut log_probs = vec![vec![vec![0.0; steps]; m]; n];
        for step in 0..steps {
            let mut x = p[l.token_emb].select(Axis(0), &prev) + &agent_emb;
            x += &p[l.time_emb].row(step);
            for (li, layer) in l.decoder.iter().enumerate() {
                let h = norm(&x, p, layer.norm1);
                x += &self.self_attention(&h, layer.self_attn, &mut caches[li], n);
                let h = norm(&x, p, layer.norm2);
                let q = h.dot(&p[layer.cross.q]);
                let (kc, vc) = &self.cross[li];
                let (a, _) =
                    attention_forward(q.view(), kc.view(), vc.view(), cfg.heads, self.key_mask);
                x += &a.dot(&p[layer.cross.o]);
                let h = norm(&x, p, layer.norm3);
                let f = h
                    .dot(&p[layer.ffn.up])
                    .mapv(tape::gelu)
                    .dot(&p[layer.ffn.down]);
                x += &f;
            }
            let z = norm(&x, p, l.dec_norm).dot(&p[l.head.0]) + &p[l.head.1];
            for (i, row) in z.rows().into_iter().enumerate() {
                let row = row.as_slice().unwrap();
                let tok = choose(row, temperature, rng);
                let (r, a) = (i / m, i % m);
                tokens[r][a][step] = tok as Token;
                log_probs[r][a][step] = row[tok] - tape::log_sum_exp(row);
                prev[i] = tok;
            }
        }
        tokens
            .into_iter()
            .zip(log_probs)
            .map(|(toks, lps)| {
                let decoded = toks
                    .iter()
                    .zip(self.agents)
                    .map(|(t, a)| codec::decode_future(t, a.seed, &cfg.vocab))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(JointRollout {
                    tokens: toks,
                    log_probs: lps,
                    decoded,
                })
            })
            .collect()
    }
}

/// Samples an index from `softmax(logits / temperature)`; at temperature
/// zero returns the first maximal logit.
fn choose(logits: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    if temperature == 0.0 {
        let mut best = 0;
        for (i, v) in logits.iter().enumerate() {
            if *v > logits[best] {
                best = i;
            }
        }
        return best;
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits
        .iter()
        .map(|v| ((v - max) / temperature).exp())
        .collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, wi) in w.iter().enumerate() {
        if u < *wi {
            return i;
        }
        u -= wi;
    }
    w.len() - 1
}
