use macformer::encoder::{EncodedContext, Fusion};
use macformer::generator::{generate_synthetic_scenario, GeneratorConfig};
use macformer::inputs::{prepare_inputs, SceneInputs};
use macformer::model::{output_values, Model, ModelConfig};
use macformer::mtos::{total_loss, LossToggles};
use macformer::nn::{Lstm, ParamBuilder, ParamStore, Tape, Tensor};
use macformer::nn::params::seeded_rng;
use macformer::scene::{MapPoint, MotionState, Scenario};
use proptest::prelude::*;

fn scene(seed: u64) -> Scenario {
    generate_synthetic_scenario(seed, &GeneratorConfig::default()).unwrap()
}

fn setup(config: ModelConfig, seed: u64) -> (Model, ParamStore, SceneInputs) {
    let (model, store) = Model::new(config.clone(), 7).unwrap();
    let x = prepare_inputs(&scene(seed), 1, &config.capacity(), true).unwrap();
    (model, store, x)
}

fn values(tape: &Tape, v: macformer::nn::Var) -> Vec<f64> {
    tape.value(v).data().to_vec()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn output_shapes_and_simplex() {
    let cfg = ModelConfig::default();
    let (model, store, x) = setup(cfg.clone(), 1);
    let tape = Tape::new();
    let out = model.forward(&tape, &store, &x).unwrap();
    let d = &out.decoded;
    let t = cfg.history + cfg.future;
    assert_eq!(tape.shape(d.trajectories), [cfg.modes, cfg.future, 5]);
    assert_eq!(tape.shape(d.probabilities), [cfg.modes]);
    assert_eq!(tape.shape(d.coupled_motion), [cfg.max_segments, cfg.future, 3]);
    assert_eq!(tape.shape(d.motion_prior), [cfg.future, 2]);
    assert_eq!(tape.shape(d.references), [cfg.modes, t, cfg.dim]);
    assert_eq!(tape.shape(out.context.agents), [cfg.max_agents + 1, t, cfg.dim]);
    assert_eq!(tape.shape(out.context.map), [cfg.max_segments, t, cfg.dim]);
    let p = values(&tape, d.probabilities);
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    assert!(p.iter().all(|&q| (0.0..=1.0).contains(&q)));
    for step in values(&tape, d.trajectories).chunks(5) {
        assert!((step[2].powi(2) + step[3].powi(2) - 1.0).abs() < 1e-3);
    }
    for (name, v) in output_values(&tape, &out) {
        assert!(v.iter().all(|x| x.is_finite()), "{name}");
    }
}

#[test]
fn padded_entities_stay_exactly_zero() {
    let cfg = ModelConfig::default();
    let (model, store, x) = setup(cfg.clone(), 2);
    assert!(x.agent_mask.iter().any(|m| !m));
    assert!(x.segment_mask.iter().any(|m| !m));
    let tape = Tape::new();
    let out = model.forward(&tape, &store, &x).unwrap();
    let t = cfg.history + cfg.future;
    let block = t * cfg.dim;
    let check = |v: Vec<f64>, mask: &[bool]| {
        for (i, &m) in mask.iter().enumerate() {
            let row = &v[i * block..(i + 1) * block];
            if m {
                assert!(row.iter().any(|&x| x != 0.0));
            } else {
                assert!(row.iter().all(|&x| x == 0.0));
            }
        }
    };
    check(values(&tape, out.context.agents), &x.agent_mask);
    check(values(&tape, out.context.map), &x.segment_mask);
    let r = values(&tape, out.decoded.coupled_motion);
    let per = cfg.future * 3;
    for (i, &m) in x.segment_mask.iter().enumerate() {
        if !m {
            assert!(r[i * per..(i + 1) * per].iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn future_states_do_not_reach_the_model() {
    let cfg = ModelConfig::default();
    let (model, store) = Model::new(cfg.clone(), 3).unwrap();
    let s = scene(5);
    let mut altered = s.clone();
    for a in &mut altered.agents {
        for st in &mut a.states[cfg.history..] {
            st.x += 37.0;
            st.speed = -4.0;
        }
    }
    let a = model.predict_scenario(&store, &s, 1).unwrap();
    let b = model.predict_scenario(&store, &altered, 1).unwrap();
    assert_eq!(a, b);
}

/// Reorders rows `perm` of a `[N, ...]` tensor.
fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let n = t.shape()[0];
    let per = t.numel() / n;
    let mut data = Vec::with_capacity(t.numel());
    for &p in perm {
        data.extend_from_slice(&t.data()[p * per..(p + 1) * per]);
    }
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

fn permute_segments(x: &SceneInputs, perm: &[usize]) -> SceneInputs {
    let pm = x.capacity.points_per_segment;
    let mut y = x.clone();
    y.points = permute_rows(&x.points, perm);
    y.relative = permute_rows(&x.relative, perm);
    y.segment_mask = perm.iter().map(|&p| x.segment_mask[p]).collect();
    y.point_mask = perm.iter().flat_map(|&p| x.point_mask[p * pm..(p + 1) * pm].to_vec()).collect();
    y
}

fn permute_agents(x: &SceneInputs, perm: &[usize]) -> SceneInputs {
    let mut y = x.clone();
    y.agents = permute_rows(&x.agents, perm);
    y.agent_mask = perm.iter().map(|&p| x.agent_mask[p]).collect();
    y.agent_ids = perm.iter().map(|&p| x.agent_ids[p]).collect();
    y
}

fn shuffled(n: usize, seed: u64, keep_first: bool) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut v: Vec<usize> = (0..n).collect();
    let start = usize::from(keep_first);
    v[start..].shuffle(&mut seeded_rng(seed));
    v
}

#[test]
fn segment_permutation_equivariance() {
    for fusion in [Fusion::Bilateral, Fusion::Stack] {
        let cfg = ModelConfig {
            fusion,
            ..ModelConfig::default()
        };
        let (model, store, x) = setup(cfg.clone(), 4);
        let perm = shuffled(cfg.max_segments, 11, false);
        let y = permute_segments(&x, &perm);
        let (ta, tb) = (Tape::new(), Tape::new());
        let a = model.forward(&ta, &store, &x).unwrap();
        let b = model.forward(&tb, &store, &y).unwrap();
        let tol = 1e-9;
        assert!(max_diff(&values(&ta, a.context.agents), &values(&tb, b.context.agents)) < tol);
        let ma = permute_rows(&ta.value(a.context.map), &perm);
        assert!(ma.max_abs_diff(&tb.value(b.context.map)) < tol);
        let ra = permute_rows(&ta.value(a.decoded.coupled_motion), &perm);
        assert!(ra.max_abs_diff(&tb.value(b.decoded.coupled_motion)) < tol);
        let d = max_diff(&values(&ta, a.decoded.trajectories), &values(&tb, b.decoded.trajectories));
        assert!(d < tol, "{fusion:?}: {d}");
        assert!(max_diff(&values(&ta, a.decoded.probabilities), &values(&tb, b.decoded.probabilities)) < tol);
    }
}

#[test]
fn surrounding_agent_permutation_equivariance() {
    let cfg = ModelConfig::default();
    let (model, store, x) = setup(cfg.clone(), 6);
    let perm = shuffled(cfg.max_agents + 1, 3, true);
    let y = permute_agents(&x, &perm);
    let (ta, tb) = (Tape::new(), Tape::new());
    let a = model.forward(&ta, &store, &x).unwrap();
    let b = model.forward(&tb, &store, &y).unwrap();
    let aa = permute_rows(&ta.value(a.context.agents), &perm);
    assert!(aa.max_abs_diff(&tb.value(b.context.agents)) < 1e-9);
    assert!(max_diff(&values(&ta, a.context.map), &values(&tb, b.context.map)) < 1e-9);
    assert!(max_diff(&values(&ta, a.decoded.trajectories), &values(&tb, b.decoded.trajectories)) < 1e-9);
}

#[test]
fn bilateral_affinity_is_shared_and_normalized() {
    let cfg = ModelConfig::default();
    let (model, store, x) = setup(cfg.clone(), 8);
    let tape = Tape::new();
    let out = model.forward(&tape, &store, &x).unwrap();
    let trace = out.context.trace.expect("bilateral trace");
    let t = cfg.history + cfg.future;
    let (a, m) = (cfg.max_agents + 1, cfg.max_segments);
    assert_eq!(trace.affinity_evaluations, t);
    assert_eq!(tape.shape(trace.affinity), [t * cfg.bq_heads, a, m]);
    let aw = values(&tape, trace.agent_weights.unwrap());
    for row in aw.chunks(m) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let mw = values(&tape, trace.map_weights.unwrap());
    for row in mw.chunks(a) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    for row in aw.chunks(m) {
        for (j, &w) in row.iter().enumerate() {
            if !x.segment_mask[j] {
                assert_eq!(w, 0.0);
            }
        }
    }
}

#[test]
fn one_shared_projection_parameter() {
    let (_, store) = Model::new(ModelConfig::default(), 0).unwrap();
    let shared: Vec<_> = store.iter().filter(|(_, p)| p.name.ends_with("w_bq")).collect();
    assert_eq!(shared.len(), 1);
    assert!(shared[0].1.name.starts_with("fusion."));
    assert_eq!(shared[0].1.value.shape(), [16, 16]);
}

#[test]
fn stack_fusion_has_more_parameters_at_equal_width() {
    for dim in [8, 16, 32] {
        let count = |fusion| {
            let cfg = ModelConfig {
                dim,
                fusion,
                ..ModelConfig::default()
            };
            Model::fusion_parameter_count(&Model::new(cfg, 0).unwrap().1)
        };
        assert!(count(Fusion::Bilateral) < count(Fusion::Stack), "dim {dim}");
    }
}

#[test]
fn ablation_switches_keep_output_shapes() {
    let base = ModelConfig::default();
    let variants = [
        ModelConfig { use_relative_motions: false, ..base.clone() },
        ModelConfig { use_bilateral_query: false, ..base.clone() },
        ModelConfig { use_reference_extractor: false, ..base.clone() },
        ModelConfig { fusion: Fusion::Stack, ..base.clone() },
    ];
    let t0 = Tape::new();
    let (m0, s0, x) = setup(base.clone(), 9);
    let reference = m0.forward(&t0, &s0, &x).unwrap();
    for cfg in variants {
        let (model, store) = Model::new(cfg.clone(), 1).unwrap();
        let tape = Tape::new();
        let out = model.forward(&tape, &store, &x).unwrap();
        assert_eq!(tape.shape(out.decoded.trajectories), t0.shape(reference.decoded.trajectories));
        assert_eq!(tape.shape(out.context.map), t0.shape(reference.context.map));
        assert!(values(&tape, out.decoded.trajectories).iter().all(|v| v.is_finite()), "{cfg:?}");
    }
}

fn with_map(ctx: &EncodedContext, map: macformer::nn::Var) -> EncodedContext {
    EncodedContext {
        map,
        ..ctx.clone()
    }
}

#[test]
fn motion_prior_ignores_map_features() {
    let (model, store, x) = setup(ModelConfig::default(), 10);
    let tape = Tape::new();
    let ctx = model.encoder.forward(&tape, &store, &x).unwrap();
    let noise = tape.constant(Tensor::full(&tape.shape(ctx.map), 0.37));
    let a = model.decoder.forward(&tape, &store, &ctx).unwrap();
    let b = model.decoder.forward(&tape, &store, &with_map(&ctx, tape.add(ctx.map, noise).unwrap())).unwrap();
    assert_eq!(values(&tape, a.motion_prior), values(&tape, b.motion_prior));
    assert_ne!(values(&tape, a.coupled_motion), values(&tape, b.coupled_motion));
}

#[test]
fn each_mode_reads_only_its_own_reference() {
    let cfg = ModelConfig::default();
    let (model, store, x) = setup(cfg.clone(), 12);
    let tape = Tape::new();
    let ctx = model.encoder.forward(&tape, &store, &x).unwrap();
    let d = model.decoder.forward(&tape, &store, &ctx).unwrap();
    let refs = tape.value(d.references).clone();
    let mut bumped = refs.clone();
    let per = refs.numel() / cfg.modes;
    bumped.data_mut()[per..2 * per].iter_mut().for_each(|v| *v += 0.5);
    let run = |r: Tensor| {
        let t = model
            .decoder
            .regression(&tape, &store, tape.constant(r), d.coupled_motion, d.motion_prior, &x.segment_mask)
            .unwrap();
        values(&tape, t)
    };
    let (a, b) = (run(refs), run(bumped));
    let per_mode = cfg.future * 5;
    for k in 0..cfg.modes {
        let (ra, rb) = (&a[k * per_mode..(k + 1) * per_mode], &b[k * per_mode..(k + 1) * per_mode]);
        if k == 1 {
            assert_ne!(ra, rb);
        } else {
            assert_eq!(ra, rb);
        }
    }
}

#[test]
fn modes_differ_at_initialization() {
    let cfg = ModelConfig::default();
    let (model, store, x) = setup(cfg.clone(), 13);
    let p = model.predict(&store, &x).unwrap();
    for i in 0..cfg.modes {
        for j in i + 1..cfg.modes {
            assert_ne!(p.modes[i].points, p.modes[j].points);
        }
    }
}

#[test]
fn identical_references_give_uniform_probabilities() {
    let cfg = ModelConfig::default();
    let (model, store) = Model::new(cfg.clone(), 0).unwrap();
    let tape = Tape::new();
    let row: Vec<f64> = (0..(cfg.history + cfg.future) * cfg.dim).map(|i| (i as f64 * 0.37).sin()).collect();
    let refs = Tensor::new(
        vec![cfg.modes, cfg.history + cfg.future, cfg.dim],
        row.iter().cycle().take(row.len() * cfg.modes).copied().collect(),
    )
    .unwrap();
    let (p, logits) = model.decoder.probability_head(&tape, &store, tape.constant(refs)).unwrap();
    for v in values(&tape, p) {
        assert!((v - 1.0 / cfg.modes as f64).abs() < 1e-12);
    }
    let shifted = tape.softmax(tape.reshape(tape.add_scalar(logits, 3.0), &[1, cfg.modes]).unwrap(), None).unwrap();
    assert!(max_diff(&values(&tape, shifted), &values(&tape, p)) < 1e-12);
}

#[test]
fn lstm_is_causal_over_steps() {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(1);
    let lstm = Lstm::new(&mut ParamBuilder::new(&mut store, &mut rng), 3, 4).unwrap();
    let x: Vec<f64> = (0..2 * 6 * 3).map(|i| (i as f64 * 0.71).cos()).collect();
    let mut y = x.clone();
    let t = 3;
    for b in 0..2 {
        y[(b * 6 + t) * 3 + 1] += 0.9;
    }
    let run = |d: Vec<f64>| {
        let tape = Tape::new();
        let out = lstm.forward(&tape, &store, tape.constant(Tensor::new(vec![2, 6, 3], d).unwrap()), None).unwrap();
        values(&tape, out.states)
    };
    let (a, b) = (run(x), run(y));
    for batch in 0..2 {
        for step in 0..6 {
            let at = (batch * 6 + step) * 4;
            let same = a[at..at + 4] == b[at..at + 4];
            assert_eq!(same, step < t, "batch {batch} step {step}");
        }
    }
}

fn grad_norms(model: &Model, store: &ParamStore, x: &SceneInputs, toggles: LossToggles) -> Vec<(String, f64)> {
    let tape = Tape::new();
    let out = model.forward(&tape, store, x).unwrap();
    let labels = x.labels.as_ref().unwrap();
    let (loss, _) = total_loss(&tape, &out.decoded, labels, &x.segment_mask, toggles, None).unwrap();
    let grads = tape.backward(loss).unwrap();
    grads
        .params()
        .map(|(id, g)| (store.get(id).name.clone(), g.iter().map(|v| v * v).sum::<f64>().sqrt()))
        .collect()
}

fn reaches(norms: &[(String, f64)], prefix: &str) -> bool {
    norms.iter().any(|(n, g)| n.starts_with(prefix) && *g > 0.0)
}

#[test]
fn gradients_reach_both_map_branches() {
    let (model, store, x) = setup(ModelConfig::default(), 14);
    let norms = grad_norms(&model, &store, &x, LossToggles::default());
    assert!(reaches(&norms, "encoder.topo."));
    assert!(reaches(&norms, "encoder.motion."));
    assert!(reaches(&norms, "encoder.agent."));
    assert!(reaches(&norms, "fusion."));
}

#[test]
fn auxiliary_losses_reach_their_branches() {
    let (model, store, x) = setup(ModelConfig::default(), 15);
    let tape = Tape::new();
    let out = model.forward(&tape, &store, &x).unwrap();
    let labels = x.labels.as_ref().unwrap();
    let gt = tape.constant(labels.relative.clone());
    let couple = macformer::mtos::loss_couple(&tape, out.decoded.coupled_motion, gt, &x.segment_mask).unwrap();
    let names = |loss| {
        tape.backward(loss)
            .unwrap()
            .params()
            .filter(|(_, g)| g.iter().any(|v| *v != 0.0))
            .map(|(id, _)| store.get(id).name.clone())
            .collect::<Vec<_>>()
    };
    let c = names(couple);
    assert!(c.iter().any(|n| n.starts_with("encoder.topo.") || n.starts_with("encoder.motion.")));
    let gt_xy = tape.constant(Tensor::new(vec![15, 2], labels.future.data().chunks(5).flat_map(|r| [r[0], r[1]]).collect()).unwrap());
    let capture = macformer::mtos::loss_capture(&tape, out.decoded.motion_prior, gt_xy).unwrap();
    assert!(names(capture).iter().any(|n| n.starts_with("encoder.agent.")));
}

fn sentinel_scene(seed: u64) -> Scenario {
    let cfg = GeneratorConfig {
        agents: 1 + (seed as usize % 3),
        lanes: 1,
        ..GeneratorConfig::default()
    };
    let mut s = generate_synthetic_scenario(seed, &cfg).unwrap();
    for (i, a) in s.agents.iter_mut().enumerate() {
        for t in 0..10 {
            if (i > 0 || t + 1 < 10) && (t + seed as usize + i) % 3 == 0 {
                a.states[t] = MotionState {
                    x: f64::NAN,
                    y: f64::NAN,
                    cos_heading: f64::NAN,
                    sin_heading: f64::NAN,
                    speed: f64::NAN,
                    valid: false,
                };
            }
        }
    }
    for seg in &mut s.map {
        seg.points.truncate(seg.point_count);
        seg.points.resize(9, MapPoint { attributes: [f64::NAN; 15] });
    }
    s
}

#[test]
fn nan_sentinels_in_padding_never_reach_outputs() {
    let cfg = ModelConfig::default();
    let (model, store) = Model::new(cfg.clone(), 5).unwrap();
    for seed in 0..100 {
        let s = sentinel_scene(seed);
        let x = prepare_inputs(&s, 1, &cfg.capacity(), false).unwrap();
        let tape = Tape::new();
        let out = model.forward(&tape, &store, &x).unwrap();
        for (name, v) in output_values(&tape, &out) {
            assert!(v.iter().all(|x| x.is_finite()), "seed {seed}: {name}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn predictions_are_finite_and_on_the_simplex(seed in 0u64..10_000) {
        let cfg = ModelConfig::default();
        let (model, store) = Model::new(cfg, seed).unwrap();
        let p = model.predict_scenario(&store, &scene(seed), 1).unwrap();
        let total: f64 = p.modes.iter().map(|m| m.prob).sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        prop_assert!(p.modes.iter().all(|m| m.points.iter().flatten().all(|v| v.is_finite())));
    }
}
