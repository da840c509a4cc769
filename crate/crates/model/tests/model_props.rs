use drivescale_core::codec::{Token, TokenVocab};
use drivescale_core::ledger;
use drivescale_core::synth::{
    self, AgentHistory, AgentState, AgentType, Example, LightObservation, LightState,
    PolylineFeature, RoadKind, SceneContext, SceneSlots, WindowSpec, WorldConfig,
};
use drivescale_model::sample::sample_rollouts;
use drivescale_model::{checkpoint, JointModel, ModelConfig, ModeledAgent, SampleSpec, Targets};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_examples(segments: usize) -> (WorldConfig, Vec<Example>) {
    let world = WorldConfig {
        num_segments: segments,
        ..WorldConfig::toy()
    };
    let vocab = TokenVocab::default();
    let ex = synth::build_dataset(&world, &vocab, &WindowSpec::from_config(&world)).unwrap();
    (world, ex)
}

fn toy_model(n: usize, m: usize, d: usize, seed: u64) -> (JointModel, Vec<Example>) {
    let (world, ex) = toy_examples(2);
    let model = JointModel::new(
        ModelConfig::new(n, m, d, &world, TokenVocab::default()),
        seed,
    )
    .unwrap();
    (model, ex)
}

/// Random nonzero weights everywhere, including the zero-initialized head.
fn perturb(model: &mut JointModel, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.params_mut() {
        p.mapv_inplace(|v| v + scale * (rng.random::<f64>() - 0.5));
    }
}

/// A small random scene matching `cfg`, with every slot valid.
fn random_context(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> SceneContext {
    let mut r = |s: f64| s * (rng.random::<f64>() - 0.5);
    let agents = (0..cfg.slots.agents)
        .map(|i| AgentHistory {
            agent_id: i as u32,
            agent_type: AgentType::ALL[i % 4],
            states: (0..cfg.history_steps)
                .map(|_| AgentState {
                    x: r(40.0),
                    y: r(40.0),
                    z: 0.0,
                    heading: r(6.0),
                    vx: r(10.0),
                    vy: r(10.0),
                    length: 4.5,
                    width: 2.0,
                    height: 1.5,
                    valid: true,
                })
                .collect(),
        })
        .collect();
    let mut poly = |kind| PolylineFeature {
        start: [r(40.0), r(40.0), 0.0],
        end: [r(40.0), r(40.0), 0.0],
        direction: [0.6, 0.8],
        kind,
        valid: true,
    };
    let roadgraph = (0..cfg.slots.roadgraph)
        .map(|_| poly(RoadKind::Lane))
        .collect();
    let route = (0..cfg.slots.route).map(|_| poly(RoadKind::Lane)).collect();
    let traffic_lights = (0..cfg.slots.traffic_lights)
        .map(|_| {
            vec![
                LightObservation {
                    position: [5.0, -3.0, 4.0],
                    state: LightState::Green,
                    confidence: 0.9,
                    valid: true,
                };
                cfg.history_steps
            ]
        })
        .collect();
    SceneContext {
        agents,
        roadgraph,
        traffic_lights,
        route,
    }
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        enc_layers: 1,
        dec_layers: 1,
        d_model: 4,
        heads: 1,
        vocab: TokenVocab::new(3, 1.0, 0.5).unwrap(),
        slots: SceneSlots {
            agents: 2,
            roadgraph: 1,
            traffic_lights: 1,
            route: 1,
        },
        history_steps: 2,
        future_steps: 3,
        modeled_agents: 2,
    }
}

fn random_targets(cfg: &ModelConfig, slots: Vec<usize>, rng: &mut ChaCha8Rng) -> Targets {
    let v = cfg.vocab.size();
    Targets {
        types: slots.iter().map(|s| AgentType::ALL[s % 4]).collect(),
        tokens: slots
            .iter()
            .map(|_| {
                (0..cfg.future_steps)
                    .map(|_| rng.random_range(0..v) as Token)
                    .collect()
            })
            .collect(),
        slots,
    }
}

#[test]
fn instantiated_parameters_and_macs_match_ledger() {
    let (world, ex) = toy_examples(1);
    for (n, m, d) in [(1, 1, 16), (2, 1, 32), (1, 3, 16), (2, 2, 48), (0, 2, 32)] {
        let model =
            JointModel::new(ModelConfig::new(n, m, d, &world, TokenVocab::default()), 1).unwrap();
        let shape = model.config().shape();
        assert_eq!(model.param_count(), ledger::param_count(&shape).unwrap());
        assert_eq!(model.param_count(), ((12 * n + 16 * m) * d * d) as u64);
        let macs = model
            .forward_macs(&ex[0].context, &Targets::from_example(&ex[0]))
            .unwrap();
        assert_eq!(
            2 * macs,
            ledger::flops_per_example(&shape).unwrap(),
            "{shape:?}"
        );
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let cfg = tiny_config();
    let mut model = JointModel::new(cfg, 5).unwrap();
    assert!(model.total_params() <= 1000, "{}", model.total_params());
    perturb(&mut model, 6, 0.6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ctx = random_context(&cfg, &mut rng);
    let targets = random_targets(&cfg, vec![0, 1], &mut rng);
    let (_, grads) = model.loss_and_grad(&ctx, &targets).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for p in 0..model.params().len() {
        for i in 0..model.params()[p].len() {
            let ncols = model.params()[p].ncols();
            let at = (i / ncols, i % ncols);
            let orig = model.params()[p][at];
            model.params_mut()[p][at] = orig + h;
            let up = model.teacher_forced_loss(&ctx, &targets).unwrap().loss;
            model.params_mut()[p][at] = orig - h;
            let down = model.teacher_forced_loss(&ctx, &targets).unwrap().loss;
            model.params_mut()[p][at] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[p][at];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7);
            worst = worst.max(rel);
            assert!(
                rel < 1e-3,
                "{} {at:?}: {analytic} vs {numeric}",
                model.param_info()[p].name
            );
        }
    }
    eprintln!("worst relative gradient error {worst:.2e}");
}

#[test]
fn future_tokens_never_leak_into_earlier_logits() {
    let (mut model, ex) = toy_model(1, 2, 16, 2);
    perturb(&mut model, 3, 0.2);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = *model.config();
    for trial in 0..100 {
        let e = &ex[trial % ex.len()];
        let base = Targets::from_example(e);
        let logits = model.teacher_forced_logits(&e.context, &base).unwrap();
        let m = base.slots.len();
        let t = rng.random_range(0..cfg.future_steps);
        let a = rng.random_range(0..m);
        let mut changed = base.clone();
        let old = changed.tokens[a][t];
        changed.tokens[a][t] = ((old as usize + 1 + rng.random_range(0..cfg.vocab.size() - 1))
            % cfg.vocab.size()) as Token;
        let after = model.teacher_forced_logits(&e.context, &changed).unwrap();
        // token t of any agent is input only to rows at steps > t
        for row in 0..(t + 1) * m {
            assert_eq!(logits.row(row), after.row(row), "trial {trial} row {row}");
        }
        if t + 1 < cfg.future_steps {
            assert_ne!(logits.row((t + 1) * m + a), after.row((t + 1) * m + a));
        }
    }
}

#[test]
fn untrained_loss_is_log_vocab() {
    let (model, ex) = toy_model(1, 1, 16, 0);
    let l = model
        .teacher_forced_loss(&ex[0].context, &Targets::from_example(&ex[0]))
        .unwrap();
    assert!((l.loss - 169f64.ln()).abs() < 1e-3);
    for v in l.per_type().values() {
        assert!((v - 169f64.ln()).abs() < 1e-3);
    }
}

#[test]
fn loss_matches_recomputation_from_logits() {
    let (mut model, ex) = toy_model(1, 1, 16, 4);
    perturb(&mut model, 9, 0.3);
    let e = &ex[3];
    let t = Targets::from_example(e);
    let z = model.teacher_forced_logits(&e.context, &t).unwrap();
    let m = t.slots.len();
    let mut sum = 0.0;
    for (r, row) in z.rows().into_iter().enumerate() {
        let target = t.tokens[r % m][r / m] as usize;
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        sum += lse - row[target];
        let p: f64 = row.iter().map(|v| (v - lse).exp()).sum();
        assert!((p - 1.0).abs() < 1e-6);
    }
    let loss = model.teacher_forced_loss(&e.context, &t).unwrap().loss;
    assert!((loss - sum / z.nrows() as f64).abs() < 1e-6);
}

#[test]
fn next_token_logits_agree_with_teacher_forcing() {
    let (mut model, ex) = toy_model(1, 2, 16, 4);
    perturb(&mut model, 10, 0.3);
    let e = &ex[1];
    let t = Targets::from_example(e);
    let m = t.slots.len();
    let full = model.teacher_forced_logits(&e.context, &t).unwrap();
    for step in [0, 5, 21] {
        let prefix: Vec<Vec<Token>> = t.tokens.iter().map(|r| r[..step].to_vec()).collect();
        let z = model
            .next_token_logits(&e.context, &t.slots, &prefix)
            .unwrap();
        assert_eq!(z.nrows(), m);
        for a in 0..m {
            for (x, y) in z.row(a).iter().zip(full.row(step * m + a)) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }
    let too_long: Vec<Vec<Token>> = t.tokens.clone();
    assert!(model
        .next_token_logits(&e.context, &t.slots, &too_long)
        .is_err());
}

#[test]
fn cached_sampling_matches_teacher_forcing() {
    let (mut model, ex) = toy_model(1, 2, 32, 4);
    perturb(&mut model, 12, 0.3);
    let e = &ex[2];
    let t = Targets::from_example(e);
    let agents: Vec<ModeledAgent> = e
        .modeled_targets()
        .map(|x| ModeledAgent {
            slot: x.slot,
            seed: x.seed,
        })
        .collect();
    let spec = SampleSpec {
        count: 40,
        temperature: 1.0,
        seed: 3,
        steps: None,
    };
    let rs = sample_rollouts(&model, &e.context, &agents, &spec).unwrap();
    assert_eq!(rs.len(), 40);
    for r in rs.iter().step_by(7) {
        let forced = Targets {
            tokens: r.tokens.clone(),
            ..t.clone()
        };
        let z = model.teacher_forced_logits(&e.context, &forced).unwrap();
        let m = agents.len();
        for (a, lps) in r.log_probs.iter().enumerate() {
            for (s, lp) in lps.iter().enumerate() {
                let row = z.row(s * m + a);
                let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
                assert!((row[r.tokens[a][s] as usize] - lse - lp).abs() < 1e-9);
                assert!(*lp <= 0.0);
            }
            let decoded = drivescale_core::codec::decode_future(
                &r.tokens[a],
                agents[a].seed,
                &model.config().vocab,
            )
            .unwrap();
            assert_eq!(decoded, r.decoded[a]);
        }
    }
    assert_eq!(
        rs,
        sample_rollouts(&model, &e.context, &agents, &spec).unwrap()
    );
    let greedy = sample_rollouts(
        &model,
        &e.context,
        &agents,
        &SampleSpec {
            temperature: 0.0,
            ..spec
        },
    )
    .unwrap();
    assert!(greedy.iter().all(|r| r.tokens == greedy[0].tokens));
}

#[test]
fn single_step_sample_frequencies_follow_softmax() {
    let (mut model, ex) = toy_model(1, 1, 16, 4);
    perturb(&mut model, 13, 0.4);
    let e = &ex[0];
    let t = Targets::from_example(e);
    let agents = [ModeledAgent {
        slot: t.slots[0],
        seed: e.modeled_targets().next().unwrap().seed,
    }];
    let n = 100_000;
    let rs = sample_rollouts(
        &model,
        &e.context,
        &agents,
        &SampleSpec {
            count: n,
            temperature: 1.0,
            seed: 3,
            steps: Some(1),
        },
    )
    .unwrap();
    let z = model
        .next_token_logits(&e.context, &t.slots[..1], &[vec![]])
        .unwrap();
    let lse = z.row(0).iter().map(|v| v.exp()).sum::<f64>().ln();
    let mut counts = vec![0usize; z.ncols()];
    for r in &rs {
        counts[r.tokens[0][0] as usize] += 1;
    }
    let mut chi2 = 0.0;
    let mut worst: f64 = 0.0;
    for (k, c) in counts.iter().enumerate() {
        let p = (z[[0, k]] - lse).exp();
        let expect = n as f64 * p;
        let sigma = (expect * (1.0 - p)).sqrt();
        worst = worst.max((*c as f64 - expect).abs() / sigma);
        chi2 += (*c as f64 - expect).powi(2) / expect;
    }
    // a 3-sigma band taken jointly over all tokens: the chi-square statistic
    // within 3 sigma of its mean, and each count within the per-token z
    // whose family-wise coverage across V^2 tokens matches 3 sigma
    let dof = (counts.len() - 1) as f64;
    assert!(chi2 <= dof + 3.0 * (2.0 * dof).sqrt(), "chi2 {chi2}");
    assert!(worst <= 4.31, "worst z {worst}");
}

#[test]
fn roadgraph_order_does_not_matter() {
    let (mut model, ex) = toy_model(2, 1, 16, 4);
    perturb(&mut model, 14, 0.3);
    let e = &ex[0];
    let mut shuffled = e.context.clone();
    shuffled.roadgraph.reverse();
    shuffled.roadgraph.swap(0, 3);
    let a = model.encode_scene(&e.context).unwrap();
    let b = model.encode_scene(&shuffled).unwrap();
    let s = &model.config().slots;
    let perm: Vec<usize> = {
        let mut idx: Vec<usize> = (0..s.roadgraph).rev().collect();
        idx.swap(0, 3);
        idx
    };
    let base = 1 + s.agents;
    for i in 0..a.nrows() {
        let j = if (base..base + s.roadgraph).contains(&i) {
            base + perm[i - base]
        } else {
            i
        };
        for (x, y) in b.row(i).iter().zip(a.row(j)) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}

#[test]
fn loss_ignores_order_of_unmodeled_context_agents() {
    let (mut model, ex) = toy_model(1, 1, 16, 4);
    perturb(&mut model, 15, 0.3);
    let e = ex
        .iter()
        .find(|e| e.context.agents.iter().filter(|a| a.is_valid()).count() >= 7)
        .unwrap();
    let t = Targets::from_example(e);
    let mut ctx = e.context.clone();
    let free: Vec<usize> = (0..ctx.agents.len())
        .filter(|s| !t.slots.contains(s))
        .collect();
    ctx.agents.swap(free[0], free[free.len() - 1]);
    let a = model.teacher_forced_loss(&e.context, &t).unwrap().loss;
    let b = model.teacher_forced_loss(&ctx, &t).unwrap().loss;
    assert!((a - b).abs() < 1e-5);
}

#[test]
fn identical_agents_get_identical_logits() {
    let cfg = ModelConfig {
        slots: SceneSlots {
            agents: 3,
            roadgraph: 2,
            traffic_lights: 1,
            route: 0,
        },
        future_steps: 4,
        ..tiny_config()
    };
    let cfg = ModelConfig { d_model: 16, ..cfg };
    let mut model = JointModel::new(cfg, 1).unwrap();
    perturb(&mut model, 2, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ctx = random_context(&cfg, &mut rng);
    ctx.agents[2] = ctx.agents[1].clone();
    let prefix = vec![vec![1, 4], vec![1, 4]];
    let z = model.next_token_logits(&ctx, &[1, 2], &prefix).unwrap();
    for (x, y) in z.row(0).iter().zip(z.row(1)) {
        assert!((x - y).abs() < 1e-5);
    }
}

#[test]
fn all_invalid_scene_embeds_to_null_state() {
    let (model, ex) = toy_model(1, 1, 16, 4);
    let mut ctx = ex[0].context.clone();
    for a in &mut ctx.agents {
        a.states.iter_mut().for_each(|s| *s = AgentState::invalid());
    }
    ctx.roadgraph
        .iter_mut()
        .for_each(|p| *p = PolylineFeature::invalid());
    ctx.route
        .iter_mut()
        .for_each(|p| *p = PolylineFeature::invalid());
    ctx.traffic_lights
        .iter_mut()
        .flatten()
        .for_each(|o| o.valid = false);
    let emb = model.encode_scene(&ctx).unwrap();
    assert_eq!(emb.dim(), (model.config().slots.scene_tokens(), 16));
    let null = emb.row(1).to_owned();
    for i in 1..emb.nrows() {
        assert_eq!(emb.row(i), null);
    }
    assert!(emb.iter().all(|v| v.is_finite()));
    // with no valid agent there is nothing to model
    assert!(model
        .teacher_forced_loss(&ctx, &Targets::from_example(&ex[0]))
        .is_err());
}

#[test]
fn checkpoint_round_trips() {
    let (mut model, ex) = toy_model(1, 2, 16, 4);
    perturb(&mut model, 16, 0.3);
    let mut buf = Vec::new();
    checkpoint::write(&mut buf, &model, 42, 7).unwrap();
    assert_eq!(&buf[..4], b"DSCK");
    let (back, man) = checkpoint::read(buf.as_slice()).unwrap();
    assert_eq!(man.step, 42);
    assert_eq!(man.seed, 7);
    assert_eq!(man.shape, model.config().shape());
    assert_eq!(back.params(), model.params());
    let t = Targets::from_example(&ex[0]);
    assert_eq!(
        back.teacher_forced_loss(&ex[0].context, &t).unwrap(),
        model.teacher_forced_loss(&ex[0].context, &t).unwrap()
    );
    buf[0] = b'X';
    assert!(checkpoint::read(buf.as_slice()).is_err());
}

#[test]
fn shape_mismatches_are_rejected() {
    let (model, ex) = toy_model(1, 1, 16, 4);
    let mut ctx = ex[0].context.clone();
    ctx.roadgraph.pop();
    assert!(model.encode_scene(&ctx).is_err());
    let mut t = Targets::from_example(&ex[0]);
    t.tokens[0][0] = 169;
    assert!(model.teacher_forced_loss(&ex[0].context, &t).is_err());
}
