//! End-to-end training loop behavior on the synthetic cipher task.

use apt_core::data::{generate_synthetic, tokenize_pairs, Example, SyntheticTaskSpec, Tokenizer};
use apt_core::model::ModelConfig;
use apt_core::optim::AdamConfig;
use apt_core::params::{Initializer, ParamStore};
use apt_core::pretrain::{PretrainedModel, TeacherConfig, TeacherKind, TeacherNet};
use apt_core::strategy::{IntegrationPlan, LayerSelector, NamedLayers, PlanSide, Teachers};
use apt_core::tensor::Dtype;
use apt_core::trainer::{train, TrainerConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Task {
    train: Vec<Example>,
    valid: Vec<Example>,
    src_vocab: usize,
    tgt_vocab: usize,
}

fn task(reorder_window: usize) -> Task {
    let spec = SyntheticTaskSpec { reorder_window, mono_src: 0, mono_tgt: 0, ..SyntheticTaskSpec::default() };
    let (_, c) = generate_synthetic(&spec).unwrap();
    let srcs: Vec<&str> = c.train.iter().map(|p| p.0.as_str()).collect();
    let tgts: Vec<&str> = c.train.iter().map(|p| p.1.as_str()).collect();
    let st = Tokenizer::learn(&srcs, 1000, 1000).unwrap();
    let tt = Tokenizer::learn(&tgts, 1000, 1000).unwrap();
    Task {
        train: tokenize_pairs(&c.train, &st, &tt),
        valid: tokenize_pairs(&c.valid, &st, &tt),
        src_vocab: st.vocab_size(),
        tgt_vocab: tt.vocab_size(),
    }
}

fn model(t: &Task, dropout: f64) -> ModelConfig {
    ModelConfig {
        d_model: 32,
        n_heads: 2,
        d_ff: 64,
        src_vocab: t.src_vocab,
        tgt_vocab: t.tgt_vocab,
        dropout,
        max_len: 32,
        ..ModelConfig::default()
    }
}

fn random_teacher(kind: TeacherKind, vocab: usize, language: &str, seed: u64) -> PretrainedModel {
    let cfg = TeacherConfig { kind, vocab, d_model: 32, n_heads: 2, depth: 2, d_ff: 64, max_len: 32, dropout: 0.0, language: language.into() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new(Dtype::F32);
    TeacherNet::build(&mut Initializer { store: &mut store, rng: &mut rng }, &cfg).unwrap();
    PretrainedModel::new(store, &cfg).unwrap()
}

fn apt_plan() -> IntegrationPlan {
    IntegrationPlan { fusion_side: PlanSide::Encoder, distill_side: PlanSide::Decoder, ..IntegrationPlan::default() }
}

fn short(epochs: usize) -> TrainerConfig {
    TrainerConfig { epochs, adam: AdamConfig { warmup_steps: 50, ..AdamConfig::default() }, ..TrainerConfig::default() }
}

#[test]
fn baseline_learns_identity_reorder_cipher() {
    let t = task(1);
    let cfg = TrainerConfig { epochs: 10, adam: AdamConfig { warmup_steps: 200, ..AdamConfig::default() }, ..TrainerConfig::default() };
    let out = train(&model(&t, 0.0), &IntegrationPlan::baseline(), Teachers::default(), &t.train, &t.valid, &cfg, 1, &mut std::io::sink(), None)
        .unwrap();
    let acc = out.epochs.last().unwrap().1.accuracy;
    assert!(acc >= 0.95, "final validation accuracy {acc}");
}

#[test]
fn zero_weighted_distillation_matches_baseline_trajectory() {
    let t = task(2);
    let train_set = &t.train[..400];
    let valid = &t.valid[..40];
    let m = model(&t, 0.1);
    let dec = random_teacher(TeacherKind::Causal, t.tgt_vocab, "tgt", 5);
    let plan = IntegrationPlan { fusion_side: PlanSide::None, distill_side: PlanSide::Decoder, eta: 0.0, beta: 0.0, ..IntegrationPlan::default() };
    let teachers = Teachers { encoder: None, decoder: Some(&dec) };
    let base = train(&m, &IntegrationPlan::baseline(), Teachers::default(), train_set, valid, &short(2), 3, &mut std::io::sink(), None).unwrap();
    let apt = train(&m, &plan, teachers, train_set, valid, &short(2), 3, &mut std::io::sink(), None).unwrap();
    assert_eq!(base.steps.len(), apt.steps.len());
    for (a, b) in base.steps.iter().zip(&apt.steps) {
        assert_eq!(a.l_t, b.l_t, "step {}", a.step);
        assert_eq!(a.total, b.total, "step {}", a.step);
    }
    assert!(apt.steps.iter().any(|s| s.l_s > 0.0 && s.l_w > 0.0));
    for ((a, _), (b, _)) in base.epochs.iter().zip(&apt.epochs) {
        assert_eq!(a, b);
    }
}

#[test]
fn metrics_log_has_one_line_per_step_and_epoch() {
    let t = task(2);
    let mut log = Vec::new();
    let out = train(&model(&t, 0.1), &IntegrationPlan::baseline(), Teachers::default(), &t.train[..300], &t.valid[..30], &short(3), 2, &mut log, None)
        .unwrap();
    let text = String::from_utf8(log).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), out.steps.len() + 3);
    let steps = lines.iter().filter(|l| l.contains("\"step\"")).count();
    let epochs = lines.iter().filter(|l| l.contains("\"epoch\"")).count();
    assert_eq!((steps, epochs), (out.steps.len(), 3));
    for l in &lines {
        serde_json::from_str::<serde_json::Value>(l).unwrap();
    }
}

#[test]
fn single_threaded_runs_are_byte_identical_and_teachers_stay_frozen() {
    let t = task(2);
    let enc = random_teacher(TeacherKind::Masked, t.src_vocab, "src", 11);
    let dec = random_teacher(TeacherKind::Causal, t.tgt_vocab, "tgt", 12);
    let sums = (enc.checksum(), dec.checksum());
    let teachers = Teachers { encoder: Some(&enc), decoder: Some(&dec) };
    let run = || {
        let mut log = Vec::new();
        let out = train(&model(&t, 0.1), &apt_plan(), teachers, &t.train[..200], &t.valid[..20], &short(2), 4, &mut log, None).unwrap();
        (log, out)
    };
    let (a, out) = run();
    let (b, _) = run();
    assert!(!a.is_empty());
    assert_eq!(a, b);
    assert_eq!((enc.checksum(), dec.checksum()), sums);
    assert!(out.probes.alpha_rows > 0 && out.probes.attention_rows > 0);
}

#[test]
fn probability_rows_stay_normalized_through_an_epoch() {
    let t = task(2);
    let enc = random_teacher(TeacherKind::Masked, t.src_vocab, "src", 21);
    let dec = random_teacher(TeacherKind::Causal, t.tgt_vocab, "tgt", 22);
    let plan = IntegrationPlan {
        fusion_side: PlanSide::Both,
        distill_side: PlanSide::Both,
        fusion_layers: LayerSelector::Named(NamedLayers::All),
        ..IntegrationPlan::default()
    };
    let cfg = TrainerConfig { probe_every: 10, ..short(1) };
    let out = train(&model(&t, 0.1), &plan, Teachers { encoder: Some(&enc), decoder: Some(&dec) }, &t.train[..640], &t.valid[..20], &cfg, 6, &mut std::io::sink(), None)
        .unwrap();
    assert_eq!(out.probes.samples, out.steps.len().div_ceil(10));
    assert!(out.probes.max_alpha_error <= 1e-6, "{:?}", out.probes);
    assert!(out.probes.max_attention_error <= 1e-6, "{:?}", out.probes);
}
