use std::collections::BTreeSet;

use gsap_autograd::{Mat, Tape};
use gsap_core::encoder::EncoderConfig;
use gsap_core::graph::NodeType;
use gsap_core::harness::dump_graphs;
use gsap_core::model::{Ablation, KgSource, Knowledge, Model, ModelConfig, Prepared};
use gsap_core::synth::{generate_synthetic, SynthConfig};
use gsap_core::trainer::{accuracy, instance_gradients, train, FreezeGuard, TrainConfig};
use gsap_core::GsapError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_cfg(ablation: Ablation) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig { hidden: 8, layers: 2, heads: 2, ffn: 16, max_len: 96, ln_eps: 1e-5 },
        graph_dim: 8,
        graph_layers: 2,
        prompt_length: 6,
        prompt_inner: 8,
        fuse_dim: 4,
        gru_hidden: 4,
        ablation,
        seed: 5,
        ..ModelConfig::default()
    }
}

fn synth() -> (Knowledge, Vec<gsap_core::dataset::QaInstance>, Vec<gsap_core::dataset::QaInstance>) {
    let d = generate_synthetic(&SynthConfig { seed: 1, n_train: 16, n_dev: 8, choices: 3, kg_size: 150, ..SynthConfig::default() });
    (Knowledge::new(d.store, d.paraphrases, Default::default()), d.train, d.dev)
}

fn build(ablation: Ablation) -> (Model, Vec<Prepared>, Vec<Prepared>) {
    let (kn, tr, dv) = synth();
    let model = Model::for_data(tiny_cfg(ablation.clone()), &kn, &[&tr, &dv]).unwrap();
    let kn = kn.restricted(&ablation);
    let (train_set, _) = model.prepare_all(&tr, &kn).unwrap();
    let (dev_set, _) = model.prepare_all(&dv, &kn).unwrap();
    (model, train_set, dev_set)
}

fn all_values(m: &Model) -> Vec<Mat> {
    let ids: Vec<_> = m.store.ids().collect();
    m.store.snapshot(&ids)
}

fn quick_train(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, warmup_steps: 5, ..TrainConfig::desk() }
}

#[test]
fn forward_scores_every_choice() {
    let (model, train_set, _) = build(Ablation::default());
    for p in train_set.iter().take(4) {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, p, true, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(tape.shape(out.logits), (1, 3));
        assert!(tape.value(out.logits).is_finite());
        assert_eq!(out.graphs.len(), 3);
        let (scores, pred) = model.predict(p).unwrap();
        assert!(scores.iter().all(|&s| s >= 0.0));
        assert!(pred < 3);
    }
}

#[test]
fn zero_epochs_leave_parameters_unchanged() {
    let (mut model, train_set, dev_set) = build(Ablation::default());
    let before = all_values(&model);
    let report = train(&mut model, &train_set, &dev_set, &quick_train(0)).unwrap();
    assert!(report.log.is_empty());
    assert_eq!(all_values(&model), before);
}

#[test]
fn one_small_step_reduces_the_instance_loss() {
    let (mut model, train_set, _) = build(Ablation::default());
    let one = vec![train_set[0].clone()];
    let loss = |m: &Model| instance_gradients(m, &one[0], &mut ChaCha8Rng::seed_from_u64(0)).unwrap().0;
    let before = loss(&model);
    let cfg = TrainConfig { epochs: 1, warmup_steps: 0, lr_lm_side: 1e-4, lr_graph: 1e-4, weight_decay: 0.0, ..TrainConfig::default() };
    train(&mut model, &one, &[], &cfg).unwrap();
    assert!(loss(&model) < before);
}

#[test]
fn encoder_stays_frozen_through_training() {
    let (mut model, train_set, dev_set) = build(Ablation::default());
    let guard = FreezeGuard::new(&model.store);
    let cfg = TrainConfig { max_steps: Some(50), ..quick_train(10) };
    let report = train(&mut model, &train_set, &dev_set, &cfg).unwrap();
    assert_eq!(report.steps, 50);
    assert!(guard.check(&model.store));
    let id = model.frozen_params()[0];
    model.store.get_mut(id).data_mut()[0] += 1e-12;
    assert!(!guard.check(&model.store));
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let (mut model, train_set, dev_set) = build(Ablation::default());
        let report = train(&mut model, &train_set, &dev_set, &quick_train(2)).unwrap();
        (report.log, all_values(&model))
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a.len(), 2);
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(pa, pb);
}

#[test]
fn non_finite_loss_aborts_with_context() {
    let (mut model, train_set, dev_set) = build(Ablation::default());
    let id = model.hmpr.w_h.w;
    model.store.get_mut(id).data_mut().fill(f64::NAN);
    match train(&mut model, &train_set, &dev_set, &quick_train(1)) {
        Err(GsapError::NonFiniteLoss { step, instance }) => {
            assert_eq!(step, 0);
            assert!(instance.starts_with("train-"));
        }
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
}

/// Names of parameters that receive a nonzero gradient on one instance.
fn touched(ablation: Ablation) -> BTreeSet<String> {
    let (model, train_set, _) = build(ablation);
    let mut names = BTreeSet::new();
    for p in train_set.iter().take(3) {
        let (_, grads, _) = instance_gradients(&model, p, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for (id, g) in grads {
            if g.norm() > 0.0 {
                names.insert(model.store.name(id).to_string());
            }
        }
    }
    names
}

fn any(names: &BTreeSet<String>, prefix: &str) -> bool {
    names.iter().any(|n| n.starts_with(prefix))
}

#[test]
fn ablations_switch_off_their_subsystems() {
    let full = touched(Ablation::default());
    for p in ["prompt.", "hmpr.", "gnn.", "relevance.", "node_init."] {
        assert!(any(&full, p), "full model leaves {p} untouched");
    }
    assert!(!any(&full, "plain_head."));
    assert!(!any(&full, "encoder."));

    let no_prompt = touched(Ablation { no_prompt: true, ..Ablation::default() });
    assert!(!any(&no_prompt, "prompt.") && any(&no_prompt, "hmpr."));

    let no_hmpr = touched(Ablation { no_hmpr: true, ..Ablation::default() });
    assert!(!any(&no_hmpr, "hmpr.") && any(&no_hmpr, "plain_head.") && any(&no_hmpr, "prompt."));

    let no_rel = touched(Ablation { no_relevance_score: true, ..Ablation::default() });
    assert!(!any(&no_rel, "relevance.") && any(&no_rel, "gnn."));

    let uniform = touched(Ablation { no_graph_attention: true, ..Ablation::default() });
    assert!(!uniform.iter().any(|n| n.contains(".query.") || n.contains(".key.")));

    let no_gru = touched(Ablation { no_bigru: true, ..Ablation::default() });
    assert!(!any(&no_gru, "hmpr.gru_") && !any(&no_gru, "hmpr.context"));

    let random = touched(Ablation { random_prompt: true, ..Ablation::default() });
    assert!(!any(&random, "prompt."));

    let no_sapl = touched(Ablation { no_sapl: true, ..Ablation::default() });
    assert!(!any(&no_sapl, "prompt.") && any(&no_sapl, "hmpr.text_proj"));

    let own = touched(Ablation { hmpr_own_gnn: true, ..Ablation::default() });
    assert!(any(&own, "hmpr_gnn.") && any(&own, "gnn."));
}

#[test]
fn random_prompts_are_redrawn_every_forward() {
    let (model, train_set, _) = build(Ablation { random_prompt: true, ..Ablation::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut logits = || {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &train_set[0], false, &mut rng).unwrap();
        tape.value(out.logits).clone()
    };
    assert_ne!(logits(), logits());
}

#[test]
fn conflicting_flags_fail_at_build() {
    let (kn, tr, _) = synth();
    let ab = Ablation { no_prompt: true, random_prompt: true, ..Ablation::default() };
    assert!(matches!(Model::for_data(tiny_cfg(ab), &kn, &[&tr]), Err(GsapError::ConflictingFlags(_))));
}

#[test]
fn knowledge_subsets_shape_the_graphs() {
    let only_dict = Ablation { kg_sources: Some(vec![KgSource::Dictionary]), ..Ablation::default() };
    let (_, train_set, _) = build(only_dict);
    for p in &train_set {
        for c in &p.choices {
            assert!(c.graph.nodes.iter().all(|n| n.node_type != NodeType::Other));
        }
    }
    let only_kg = Ablation { kg_sources: Some(vec![KgSource::Conceptnet]), ..Ablation::default() };
    let (_, train_set, _) = build(only_kg);
    assert!(train_set.iter().any(|p| p.choices.iter().any(|c| c.graph.nodes.iter().any(|n| n.node_type == NodeType::Other))));
    for p in &train_set {
        for c in &p.choices {
            assert!(c.graph.nodes.iter().all(|n| n.node_type != NodeType::Paraphrase));
        }
    }
}

#[test]
fn prompt_positions_fit_the_sequence_budget() {
    let (model, train_set, _) = build(Ablation::default());
    for p in &train_set {
        for c in &p.choices {
            assert!(c.text.len() + model.cfg.prompt_length <= model.cfg.encoder.max_len);
        }
    }
}

#[test]
fn graph_dumps_are_written() {
    let (model, _, dev_set) = build(Ablation::default());
    let dir = tempfile::tempdir().unwrap();
    dump_graphs(&model, &dev_set[..2], dir.path()).unwrap();
    let files = std::fs::read_dir(dir.path()).unwrap().count();
    assert_eq!(files, 2 * 3);
}

#[test]
fn random_scores_on_balanced_pairs_are_near_chance() {
    let d = generate_synthetic(&SynthConfig { seed: 9, n_train: 0, n_dev: 1000, choices: 2, kg_size: 400, ..SynthConfig::default() });
    let gold: Vec<usize> = d.dev.iter().map(|q| q.answer).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pred: Vec<usize> = gold
        .iter()
        .map(|_| {
            let s: [f64; 2] = [rng.random(), rng.random()];
            gsap_core::hmpr::argmax(&s)
        })
        .collect();
    assert!((accuracy(&pred, &gold) - 0.5).abs() <= 0.05);
}
