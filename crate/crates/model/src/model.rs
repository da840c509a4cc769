//! Parameters, input featurization and the teacher-forced forward pass.
//!
//! Scene tokens are laid out as `[summary, agents, roadgraph, lights,
//! route]`. Decoder rows are flattened time-major: row `t * M + m` holds
//! agent `m` at step `t`, fed the agent's token from step `t - 1` (a
//! start token at `t = 0`), and may attend to every row at steps `<= t`.

use std::collections::BTreeMap;
use std::sync::Arc;

use drivescale_core::codec::{Token, TokenVocab};
use drivescale_core::ledger::{self, ModelShape};
use drivescale_core::synth::{
    AgentType, Example, PolylineFeature, SceneContext, SceneSlots, WorldConfig,
};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tape::{Mask, Mat, Tape, Var};
use crate::ModelError;

pub(crate) const POSITION_SCALE: f64 = 20.0;
pub(crate) const SPEED_SCALE: f64 = 10.0;
pub(crate) const EXTENT_SCALE: f64 = 5.0;

const AGENT_STEP_FEATURES: usize = 7;
const AGENT_STATIC_FEATURES: usize = 4 + 3;
const POLYLINE_FEATURES: usize = 12;
const LIGHT_FEATURES: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub vocab: TokenVocab,
    pub slots: SceneSlots,
    /// History states per agent, including the current one.
    pub history_steps: usize,
    /// Motion tokens per agent.
    pub future_steps: usize,
    /// Agents decoded jointly; only used for compute accounting.
    pub modeled_agents: usize,
}

impl ModelConfig {
    /// Width `d` with one head per 16 channels (at least one).
    pub fn new(
        enc_layers: usize,
        dec_layers: usize,
        d_model: usize,
        world: &WorldConfig,
        vocab: TokenVocab,
    ) -> Self {
        Self {
            enc_layers,
            dec_layers,
            d_model,
            heads: (d_model / 16).max(1),
            vocab,
            slots: world.slots,
            history_steps: (world.history_seconds / vocab.token_dt).round() as usize + 1,
            future_steps: (world.future_seconds / vocab.token_dt).round() as usize,
            modeled_agents: world.modeled_agents,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.into()));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("d_model must be a positive multiple of heads");
        }
        if self.history_steps == 0 || self.future_steps == 0 {
            return bad("history and future steps must be >= 1");
        }
        if self.slots.agents == 0 {
            return bad("need at least one agent slot");
        }
        self.vocab.validate()?;
        Ok(())
    }

    pub fn shape(&self) -> ModelShape {
        self.shape_for(self.modeled_agents)
    }

    /// Shape when decoding `modeled` agents.
    pub fn shape_for(&self, modeled: usize) -> ModelShape {
        ModelShape {
            enc_layers: self.enc_layers as u64,
            dec_layers: self.dec_layers as u64,
            d_model: self.d_model as u64,
            scene_tokens: self.slots.scene_tokens() as u64,
            query_tokens: (modeled * self.future_steps) as u64,
        }
    }

    pub fn agent_features(&self) -> usize {
        AGENT_STEP_FEATURES * self.history_steps + AGENT_STATIC_FEATURES
    }

    fn start_token(&self) -> usize {
        self.vocab.size()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Norm {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Attn {
    pub q: usize,
    pub k: usize,
    pub v: usize,
    pub o: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Ffn {
    pub up: usize,
    pub down: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EncoderLayer {
    pub norm1: Norm,
    pub attn: Attn,
    pub norm2: Norm,
    pub ffn: Ffn,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DecoderLayer {
    pub norm1: Norm,
    pub self_attn: Attn,
    pub norm2: Norm,
    pub cross: Attn,
    pub norm3: Norm,
    pub ffn: Ffn,
}

/// Indices of every tensor in the parameter list.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub agent_in: (usize, usize),
    pub road_in: (usize, usize),
    pub light_in: (usize, usize),
    pub route_in: (usize, usize),
    pub summary: usize,
    pub null: usize,
    pub encoder: Vec<EncoderLayer>,
    pub enc_norm: Norm,
    pub token_emb: usize,
    pub time_emb: usize,
    pub decoder: Vec<DecoderLayer>,
    pub dec_norm: Norm,
    pub head: (usize, usize),
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// Metadata for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    /// Counted as a non-embedding parameter.
    pub counted: bool,
    /// Subject to weight decay.
    pub decay: bool,
}

struct Builder {
    tensors: Vec<Mat>,
    info: Vec<ParamInfo>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn add(
        &mut self,
        name: String,
        shape: (usize, usize),
        init: Init,
        counted: bool,
        decay: bool,
    ) -> usize {
        let t = match init {
            Init::Zeros => Array2::zeros(shape),
            Init::Ones => Array2::ones(shape),
            Init::Normal(std) => {
                let n = Normal::new(0.0, std).unwrap();
                Array2::from_shape_simple_fn(shape, || n.sample(&mut self.rng))
            }
        };
        self.tensors.push(t);
        self.info.push(ParamInfo {
            name,
            counted,
            decay,
        });
        self.tensors.len() - 1
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> (usize, usize) {
        (
            self.add(
                format!("{name}.w"),
                (fan_in, fan_out),
                Init::Normal((fan_in as f64).powf(-0.5)),
                false,
                true,
            ),
            self.add(format!("{name}.b"), (1, fan_out), Init::Zeros, false, false),
        )
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gain: self.add(format!("{name}.gain"), (1, d), Init::Ones, false, false),
            bias: self.add(format!("{name}.bias"), (1, d), Init::Zeros, false, false),
        }
    }

    fn counted(&mut self, name: String, shape: (usize, usize), std: f64) -> usize {
        self.add(name, shape, Init::Normal(std), true, true)
    }

    fn attn(&mut self, name: &str, d: usize, out_std: f64) -> Attn {
        let std = (d as f64).powf(-0.5);
        Attn {
            q: self.counted(format!("{name}.q"), (d, d), std),
            k: self.counted(format!("{name}.k"), (d, d), std),
            v: self.counted(format!("{name}.v"), (d, d), std),
            o: self.counted(format!("{name}.o"), (d, d), out_std),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, out_scale: f64) -> Ffn {
        let h = ledger::FFN_MULT as usize * d;
        Ffn {
            up: self.counted(format!("{name}.up"), (d, h), (d as f64).powf(-0.5)),
            down: self.counted(
                format!("{name}.down"),
                (h, d),
                (h as f64).powf(-0.5) * out_scale,
            ),
        }
    }
}

/// Dense inputs for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneInputs {
    pub agents: Mat,
    pub roadgraph: Mat,
    pub lights: Mat,
    pub route: Mat,
    /// Validity per scene token, summary first.
    pub valid: Vec<bool>,
}

/// Tokens to predict for the modeled agents of one example.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    /// Agent slot of each modeled agent in the scene context.
    pub slots: Vec<usize>,
    pub types: Vec<AgentType>,
    /// `[M][T]` motion tokens.
    pub tokens: Vec<Vec<Token>>,
}

impl Targets {
    pub fn from_example(ex: &Example) -> Self {
        let mut t = Targets {
            slots: Vec::new(),
            types: Vec::new(),
            tokens: Vec::new(),
        };
        for target in ex.modeled_targets() {
            t.slots.push(target.slot);
            t.types.push(target.agent_type);
            t.tokens.push(target.tokens.clone());
        }
        t
    }
}

/// Mean token cross-entropy, overall and by agent type.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossBreakdown {
    pub loss: f64,
    /// `(sum, count)` of per-token losses by agent type.
    pub by_type: BTreeMap<AgentType, (f64, usize)>,
}

impl LossBreakdown {
    pub fn per_type(&self) -> BTreeMap<AgentType, f64> {
        self.by_type
            .iter()
            .map(|(k, (s, n))| (*k, s / *n as f64))
            .collect()
    }

    /// Token-weighted combination of several breakdowns.
    pub fn merge<'a>(parts: impl IntoIterator<Item = &'a LossBreakdown>) -> LossBreakdown {
        let mut out = LossBreakdown::default();
        let (mut sum, mut count) = (0.0, 0usize);
        for p in parts {
            for (k, (s, n)) in &p.by_type {
                let e = out.by_type.entry(*k).or_insert((0.0, 0));
                e.0 += s;
                e.1 += n;
                sum += s;
                count += n;
            }
        }
        out.loss = if count == 0 {
            f64::NAN
        } else {
            sum / count as f64
        };
        out
    }
}

#[derive(Debug, Clone)]
pub struct JointModel {
    config: ModelConfig,
    pub(crate) layout: Layout,
    pub(crate) params: Vec<Mat>,
    info: Vec<ParamInfo>,
}

impl JointModel {
    /// Fresh weights drawn from `seed`; the output head starts at zero so
    /// the initial prediction is uniform.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.d_model;
        let layers = (config.enc_layers + config.dec_layers).max(1);
        let out_scale = (2.0 * layers as f64).powf(-0.5);
        let out_std = (d as f64).powf(-0.5) * out_scale;
        let mut b = Builder {
            tensors: Vec::new(),
            info: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let agent_in = b.linear("embed.agent", config.agent_features(), d);
        let road_in = b.linear("embed.roadgraph", POLYLINE_FEATURES, d);
        let light_in = b.linear("embed.lights", LIGHT_FEATURES, d);
        let route_in = b.linear("embed.route", POLYLINE_FEATURES, d);
        let summary = b.add(
            "embed.summary".into(),
            (1, d),
            Init::Normal(0.5),
            false,
            true,
        );
        let null = b.add("embed.null".into(), (1, d), Init::Normal(0.5), false, true);
        let encoder = (0..config.enc_layers)
            .map(|i| EncoderLayer {
                norm1: b.norm(&format!("enc{i}.norm1"), d),
                attn: b.attn(&format!("enc{i}.attn"), d, out_std),
                norm2: b.norm(&format!("enc{i}.norm2"), d),
                ffn: b.ffn(&format!("enc{i}.ffn"), d, out_scale),
            })
            .collect();
        let enc_norm = b.norm("enc.norm", d);
        let token_emb = b.add(
            "embed.token".into(),
            (config.vocab.size() + 1, d),
            Init::Normal(0.5),
            false,
            true,
        );
        let time_emb = b.add(
            "embed.time".into(),
            (config.future_steps, d),
            Init::Normal(0.5),
            false,
            true,
        );
        let decoder = (0..config.dec_layers)
            .map(|i| DecoderLayer {
                norm1: b.norm(&format!("dec{i}.norm1"), d),
                self_attn: b.attn(&format!("dec{i}.self"), d, out_std),
                norm2: b.norm(&format!("dec{i}.norm2"), d),
                cross: b.attn(&format!("dec{i}.cross"), d, out_std),
                norm3: b.norm(&format!("dec{i}.norm3"), d),
                ffn: b.ffn(&format!("dec{i}.ffn"), d, out_scale),
            })
            .collect();
        let dec_norm = b.norm("dec.norm", d);
        let head = (
            b.add(
                "head.w".into(),
                (d, config.vocab.size()),
                Init::Zeros,
                false,
                true,
            ),
            b.add(
                "head.b".into(),
                (1, config.vocab.size()),
                Init::Zeros,
                false,
                false,
            ),
        );
        Ok(Self {
            config,
            layout: Layout {
                agent_in,
                road_in,
                light_in,
                route_in,
                summary,
                null,
                encoder,
                enc_norm,
                token_emb,
                time_emb,
                decoder,
                dec_norm,
                head,
            },
            params: b.tensors,
            info: b.info,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Mat] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Mat] {
        &mut self.params
    }

    pub fn param_info(&self) -> &[ParamInfo] {
        &self.info
    }

    /// Non-embedding parameters: the attention and feed-forward weights.
    pub fn param_count(&self) -> u64 {
        self.params
            .iter()
            .zip(&self.info)
            .filter(|(_, i)| i.counted)
            .map(|(p, _)| p.len() as u64)
            .sum()
    }

    /// Every trainable scalar.
    pub fn total_params(&self) -> u64 {
        self.params.iter().map(|p| p.len() as u64).sum()
    }

    pub fn scene_inputs(&self, ctx: &SceneContext) -> Result<SceneInputs, ModelError> {
        let c = &self.config;
        let s = &c.slots;
        if ctx.agents.len() != s.agents
            || ctx.roadgraph.len() != s.roadgraph
            || ctx.traffic_lights.len() != s.traffic_lights
            || ctx.route.len() != s.route
        {
            return Err(ModelError::Shape(format!(
                "slots agents/roadgraph/lights/route {}/{}/{}/{} expected {}/{}/{}/{}",
                ctx.agents.len(),
                ctx.roadgraph.len(),
                ctx.traffic_lights.len(),
                ctx.route.len(),
                s.agents,
                s.roadgraph,
                s.traffic_lights,
                s.route
            )));
        }
        let mut valid = vec![true];
        let mut agents = Array2::zeros((s.agents, c.agent_features()));
        for (i, a) in ctx.agents.iter().enumerate() {
            if a.states.len() != c.history_steps {
                return Err(ModelError::Shape(format!(
                    "agent history has {} states, expected {}",
                    a.states.len(),
                    c.history_steps
                )));
            }
            let mut row = agents.row_mut(i);
            let mut last = None;
            for (j, st) in a.states.iter().enumerate() {
                if !st.valid {
                    continue;
                }
                let f = [
                    st.x / POSITION_SCALE,
                    st.y / POSITION_SCALE,
                    st.heading.cos(),
                    st.heading.sin(),
                    st.vx / SPEED_SCALE,
                    st.vy / SPEED_SCALE,
                    1.0,
                ];
                check_finite(&f)?;
                for (k, v) in f.iter().enumerate() {
                    row[j * AGENT_STEP_FEATURES + k] = *v;
                }
                last = Some(st);
            }
            valid.push(last.is_some());
            if let Some(st) = last {
                let base = AGENT_STEP_FEATURES * c.history_steps;
                row[base + a.agent_type.index()] = 1.0;
                row[base + 4] = st.length / EXTENT_SCALE;
                row[base + 5] = st.width / EXTENT_SCALE;
                row[base + 6] = st.height / EXTENT_SCALE;
            }
        }
        let roadgraph = polyline_rows(&ctx.roadgraph, &mut valid)?;
        let mut lights = Array2::zeros((s.traffic_lights, LIGHT_FEATURES));
        for (i, obs) in ctx.traffic_lights.iter().enumerate() {
            match obs.last() {
                Some(o) if o.valid => {
                    let f = [
                        o.position[0] / POSITION_SCALE,
                        o.position[1] / POSITION_SCALE,
                        o.position[2] / POSITION_SCALE,
                        o.confidence,
                    ];
                    check_finite(&f)?;
                    let mut row = lights.row_mut(i);
                    row[0] = f[0];
                    row[1] = f[1];
                    row[2] = f[2];
                    row[3 + o.state.index()] = 1.0;
                    row[6] = f[3];
                    valid.push(true);
                }
                _ => valid.push(false),
            }
        }
        let route = polyline_rows(&ctx.route, &mut valid)?;
        Ok(SceneInputs {
            agents,
            roadgraph,
            lights,
            route,
            valid,
        })
    }

    fn check_targets(
        &self,
        inputs: &SceneInputs,
        targets: &Targets,
        steps: usize,
    ) -> Result<(), ModelError> {
        let m = targets.slots.len();
        if m == 0 || targets.tokens.len() != m || targets.types.len() != m {
            return Err(ModelError::Shape(
                "need one token row and type per modeled agent".into(),
            ));
        }
        for &slot in &targets.slots {
            if slot >= self.config.slots.agents || !inputs.valid[1 + slot] {
                return Err(ModelError::Shape(format!(
                    "modeled slot {slot} is not a valid context agent"
                )));
            }
        }
        for row in &targets.tokens {
            if row.len() < steps {
                return Err(ModelError::Shape(format!(
                    "{} tokens, need {steps}",
                    row.len()
                )));
            }
            if let Some(&t) = row
                .iter()
                .find(|&&t| t as usize >= self.config.vocab.size())
            {
                return Err(ModelError::InvalidToken(t));
            }
        }
        Ok(())
    }

    fn linear(&self, t: &mut Tape, x: Mat, (w, b): (usize, usize)) -> Var {
        let x = t.constant(x);
        let w = t.param(w);
        let b = t.param(b);
        let y = t.matmul_uncounted(x, w);
        t.add_row(y, b)
    }

    fn norm(&self, t: &mut Tape, x: Var, n: Norm) -> Var {
        let g = t.param(n.gain);
        let b = t.param(n.bias);
        t.layer_norm(x, g, b)
    }

    fn project(&self, t: &mut Tape, x: Var, w: usize) -> Var {
        let w = t.param(w);
        t.matmul(x, w)
    }

    fn ffn(&self, t: &mut Tape, x: Var, f: Ffn) -> Var {
        let h = self.project(t, x, f.up);
        let h = t.gelu(h);
        self.project(t, h, f.down)
    }

    /// Runs the encoder; returns `[E, d]` scene tokens (invalid slots
    /// replaced by the learned null state) and the key mask.
    pub(crate) fn encode_on(&self, t: &mut Tape, inputs: &SceneInputs) -> (Var, Arc<Mask>) {
        let l = &self.layout;
        let agents = self.linear(t, inputs.agents.clone(), l.agent_in);
        let road = self.linear(t, inputs.roadgraph.clone(), l.road_in);
        let lights = self.linear(t, inputs.lights.clone(), l.light_in);
        let route = self.linear(t, inputs.route.clone(), l.route_in);
        let summary = t.param(l.summary);
        let mut x = t.concat(vec![summary, agents, road, lights, route]);
        let mask = Arc::new(Mask::Keys(inputs.valid.clone()));
        for layer in &l.encoder {
            let h = self.norm(t, x, layer.norm1);
            let q = self.project(t, h, layer.attn.q);
            let k = self.project(t, h, layer.attn.k);
            let v = self.project(t, h, layer.attn.v);
            let a = t.attention(q, k, v, self.config.heads, &mask);
            let a = self.project(t, a, layer.attn.o);
            x = t.add(x, a);
            let h = self.norm(t, x, layer.norm2);
            let f = self.ffn(t, h, layer.ffn);
            x = t.add(x, f);
        }
        let h = self.norm(t, x, l.enc_norm);
        let null = t.param(l.null);
        let both = t.concat(vec![h, null]);
        let e = inputs.valid.len();
        let rows = (0..e)
            .map(|i| if inputs.valid[i] { i } else { e })
            .collect();
        (t.gather(both, rows), mask)
    }

    /// Logits for `steps` decoder steps, rows time-major.
    pub(crate) fn decode_on(
        &self,
        t: &mut Tape,
        scene: Var,
        key_mask: &Arc<Mask>,
        targets: &Targets,
        steps: usize,
    ) -> Var {
        let l = &self.layout;
        let m = targets.slots.len();
        let mut tokens = Vec::with_capacity(steps * m);
        let mut times = Vec::with_capacity(steps * m);
        let mut agent_rows = Vec::with_capacity(steps * m);
        for step in 0..steps {
            for (j, &slot) in targets.slots.iter().enumerate() {
                tokens.push(if step == 0 {
                    self.config.start_token()
                } else {
                    targets.tokens[j][step - 1] as usize
                });
                times.push(step);
                agent_rows.push(1 + slot);
            }
        }
        let causal = Arc::new(Mask::Causal {
            query_time: times.iter().map(|&x| x as u32).collect(),
            key_time: times.iter().map(|&x| x as u32).collect(),
        });
        let tok_table = t.param(l.token_emb);
        let tok = t.gather(tok_table, tokens);
        let time_table = t.param(l.time_emb);
        let tim = t.gather(time_table, times);
        let agt = t.gather(scene, agent_rows);
        let x = t.add(tok, tim);
        let mut x = t.add(x, agt);
        let heads = self.config.heads;
        for layer in &l.decoder {
            let h = self.norm(t, x, layer.norm1);
            let q = self.project(t, h, layer.self_attn.q);
            let k = self.project(t, h, layer.self_attn.k);
            let v = self.project(t, h, layer.self_attn.v);
            let a = t.attention(q, k, v, heads, &causal);
            let a = self.project(t, a, layer.self_attn.o);
            x = t.add(x, a);
            let h = self.norm(t, x, layer.norm2);
            let q = self.project(t, h, layer.cross.q);
            let k = self.project(t, scene, layer.cross.k);
            let v = self.project(t, scene, layer.cross.v);
            let a = t.attention(q, k, v, heads, key_mask);
            let a = self.project(t, a, layer.cross.o);
            x = t.add(x, a);
            let h = self.norm(t, x, layer.norm3);
            let f = self.ffn(t, h, layer.ffn);
            x = t.add(x, f);
        }
        let h = self.norm(t, x, l.dec_norm);
        let w = t.param(l.head.0);
        let b = t.param(l.head.1);
        let z = t.matmul_uncounted(h, w);
        t.add_row(z, b)
    }

    /// `[E, d]` scene embedding.
    pub fn encode_scene(&self, ctx: &SceneContext) -> Result<Mat, ModelError> {
        let inputs = self.scene_inputs(ctx)?;
        let mut t = Tape::new(&self.params);
        let (scene, _) = self.encode_on(&mut t, &inputs);
        Ok(t.value(scene).clone())
    }

    /// `[M, V^2]` logits for the step after `prefix` (`prefix[m]` holds the
    /// tokens already emitted by modeled agent `m`, all of equal length).
    pub fn next_token_logits(
        &self,
        ctx: &SceneContext,
        slots: &[usize],
        prefix: &[Vec<Token>],
    ) -> Result<Mat, ModelError> {
        let len = prefix.first().map_or(0, Vec::len);
        if prefix.len() != slots.len() || prefix.iter().any(|p| p.len() != len) {
            return Err(ModelError::Shape(
                "one equal-length prefix per modeled agent".into(),
            ));
        }
        if len >= self.config.future_steps {
            return Err(ModelError::PrefixTooLong {
                have: len,
                max: self.config.future_steps,
            });
        }
        let targets = Targets {
            slots: slots.to_vec(),
            types: vec![AgentType::Vehicle; slots.len()],
            tokens: prefix.to_vec(),
        };
        let inputs = self.scene_inputs(ctx)?;
        self.check_targets(&inputs, &targets, len)?;
        let mut t = Tape::new(&self.params);
        let (scene, mask) = self.encode_on(&mut t, &inputs);
        let z = self.decode_on(&mut t, scene, &mask, &targets, len + 1);
        let m = slots.len();
        Ok(t.value(z).slice(ndarray::s![len * m.., ..]).to_owned())
    }

    fn forward<'a>(
        &'a self,
        ctx: &SceneContext,
        targets: &Targets,
    ) -> Result<(Tape<'a>, Var, Var), ModelError> {
        let steps = self.config.future_steps;
        let inputs = self.scene_inputs(ctx)?;
        self.check_targets(&inputs, targets, steps)?;
        let mut t = Tape::new(&self.params);
        let (scene, mask) = self.encode_on(&mut t, &inputs);
        let z = self.decode_on(&mut t, scene, &mask, targets, steps);
        let m = targets.slots.len();
        let labels = (0..steps * m)
            .map(|r| targets.tokens[r % m][r / m] as usize)
            .collect();
        let loss = t.cross_entropy(z, labels);
        Ok((t, z, loss))
    }

    fn breakdown(t: &Tape, loss: Var, targets: &Targets) -> LossBreakdown {
        let m = targets.slots.len();
        let mut by_type = BTreeMap::new();
        for (r, l) in t.row_losses(loss).iter().enumerate() {
            let e = by_type.entry(targets.types[r % m]).or_insert((0.0, 0));
            e.0 += l;
            e.1 += 1;
        }
        LossBreakdown {
            loss: t.scalar(loss),
            by_type,
        }
    }

    /// Teacher-forced logits, `[T * M, V^2]`, time-major.
    pub fn teacher_forced_logits(
        &self,
        ctx: &SceneContext,
        targets: &Targets,
    ) -> Result<Mat, ModelError> {
        let (t, z, _) = self.forward(ctx, targets)?;
        Ok(t.value(z).clone())
    }

    pub fn teacher_forced_loss(
        &self,
        ctx: &SceneContext,
        targets: &Targets,
    ) -> Result<LossBreakdown, ModelError> {
        let (t, _, loss) = self.forward(ctx, targets)?;
        Ok(Self::breakdown(&t, loss, targets))
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn loss_and_grad(
        &self,
        ctx: &SceneContext,
        targets: &Targets,
    ) -> Result<(LossBreakdown, Vec<Mat>), ModelError> {
        let (t, _, loss) = self.forward(ctx, targets)?;
        let grads = t.backward(loss);
        Ok((Self::breakdown(&t, loss, targets), grads))
    }

    /// Multiply-adds charged by one teacher-forced forward pass.
    pub fn forward_macs(&self, ctx: &SceneContext, targets: &Targets) -> Result<u64, ModelError> {
        Ok(self.forward(ctx, targets)?.0.macs())
    }

    pub(crate) fn from_parts(config: ModelConfig, params: Vec<Mat>) -> Result<Self, ModelError> {
        let mut model = Self::new(config, 0)?;
        if params.len() != model.params.len() {
            return Err(ModelError::Checkpoint(format!(
                "{} tensors, expected {}",
                params.len(),
                model.params.len()
            )));
        }
        for (i, (have, want)) in params.iter().zip(&model.params).enumerate() {
            if have.dim() != want.dim() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    model.info[i].name,
                    have.dim(),
                    want.dim()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }
}

fn check_finite(f: &[f64]) -> Result<(), ModelError> {
    if f.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::Shape("non-finite input feature".into()))
    }
}

fn polyline_rows(feats: &[PolylineFeature], valid: &mut Vec<bool>) -> Result<Mat, ModelError> {
    let mut out = Array2::zeros((feats.len(), POLYLINE_FEATURES));
    for (i, p) in feats.iter().enumerate() {
        valid.push(p.valid);
        if !p.valid {
            continue;
        }
        let f = [
            p.start[0] / POSITION_SCALE,
            p.start[1] / POSITION_SCALE,
            p.start[2] / POSITION_SCALE,
            p.end[0] / POSITION_SCALE,
            p.end[1] / POSITION_SCALE,
            p.end[2] / POSITION_SCALE,
            p.direction[0],
            p.direction[1],
        ];
        check_finite(&f)?;
        let mut row = out.row_mut(i);
        for (k, v) in f.iter().enumerate() {
            row[k] = *v;
        }
        row[8 + p.kind.index()] = 1.0;
    }
    Ok(out)
}
