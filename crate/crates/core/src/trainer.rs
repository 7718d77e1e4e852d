//! Student training loop, validation, checkpoints and the gradient check.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{make_batches, Batch, Example};
use crate::error::{AptError, Result};
use crate::eval::{bleu, Translator};
use crate::model::{translation_loss, ModelConfig, Session};
use crate::optim::{AdamConfig, OptimizerState};
use crate::params::{Initializer, ParamStore};
use crate::pretrain::{PretrainedModel, TeacherConfig, TeacherKind, TeacherNet};
use crate::strategy::{
    apply_finetune, build_training_step, check_plan, IntegrationPlan, Mode, Student, TeacherChoice, TeacherFeatures,
    Teachers,
};
use crate::tensor::{Dtype, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_steps: Option<usize>,
    pub adam: AdamConfig,
    /// Beam width for the per-epoch validation BLEU.
    pub valid_beam: usize,
    /// Normalization probe cadence in steps.
    pub probe_every: usize,
    /// Cap on teacher passes per batch for a masked decoder teacher.
    pub exact_cap: usize,
    pub dtype: Dtype,
    /// Translation workers during validation.
    pub threads: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            epochs: 10,
            batch_size: 32,
            max_steps: None,
            adam: AdamConfig::default(),
            valid_beam: 1,
            probe_every: 10,
            exact_cap: 64,
            dtype: Dtype::F32,
            threads: 1,
        }
    }
}

/// One metrics line per optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub l_t: f64,
    pub l_s: f64,
    pub l_w: f64,
    pub total: f64,
    pub lr: f64,
}

/// One metrics line per epoch. `valid_loss` is the unsmoothed token NLL.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub valid_bleu: f64,
    pub valid_loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Validation {
    pub loss: f64,
    /// Teacher-forced next-token accuracy.
    pub accuracy: f64,
    pub bleu: f64,
}

/// Largest deviation from 1 seen in sampled probability rows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeStats {
    pub samples: usize,
    pub alpha_rows: usize,
    pub attention_rows: usize,
    pub max_alpha_error: f64,
    pub max_attention_error: f64,
}

pub struct TrainOutcome {
    /// Parameters of the best epoch by validation BLEU.
    pub store: ParamStore,
    pub student: Student,
    pub plan: IntegrationPlan,
    pub best_epoch: usize,
    pub best_bleu: f64,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<(EpochLog, Validation)>,
    pub probes: ProbeStats,
    pub skipped_steps: usize,
    pub header: StudentHeader,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let meta = serde_json::json!({
            "best_epoch": self.best_epoch,
            "valid_bleu": self.best_bleu,
            "steps": self.steps.len(),
        });
        Ok(Checkpoint::from_store("student", serde_json::to_value(&self.header)?, &self.store, meta))
    }
}

/// Checkpoint header config of a student: everything needed to rebuild the
/// parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentHeader {
    pub model: ModelConfig,
    pub plan: IntegrationPlan,
    pub encoder_teacher: Option<TeacherConfig>,
    pub decoder_teacher: Option<TeacherConfig>,
}

/// Rebinds a student checkpoint. Teachers are required when the plan fuses.
pub fn load_student(ckpt: &Checkpoint, teachers: Teachers) -> Result<(ParamStore, Student, StudentHeader)> {
    if ckpt.header.kind != "student" {
        return Err(AptError::Checkpoint(format!("expected a student checkpoint, found `{}`", ckpt.header.kind)));
    }
    let header: StudentHeader = serde_json::from_value(ckpt.header.config.clone())?;
    for (want, got, side) in [
        (&header.encoder_teacher, teachers.encoder, "encoder"),
        (&header.decoder_teacher, teachers.decoder, "decoder"),
    ] {
        if let (Some(want), Some(got)) = (want, got) {
            if want != got.config() {
                return Err(AptError::Incompatible {
                    name: format!("{side} teacher"),
                    detail: "loaded teacher differs from the one used in training".into(),
                });
            }
        }
    }
    let store = ckpt.to_store()?;
    let student = Student::bind(&store, &header.model, &header.plan, teachers)?;
    Ok((store, student, header))
}

fn step_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn write_line<T: Serialize>(out: &mut dyn Write, record: &T) -> Result<()> {
    serde_json::to_writer(&mut *out, record)?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Teachers the plan actually consults, by side.
pub fn plan_teachers<'a>(plan: &IntegrationPlan, teachers: Teachers<'a>) -> Teachers<'a> {
    Teachers {
        encoder: teachers.encoder.filter(|_| plan.needs_encoder_teacher()),
        decoder: teachers.decoder.filter(|_| plan.needs_decoder_teacher()),
    }
}

/// Checks sampled attention rows and fusion layer weights for normalization.
fn probe(s: &Session, attention: &[crate::autograd::Var], alphas: &[crate::autograd::Var], stats: &mut ProbeStats) {
    stats.samples += 1;
    for &a in alphas {
        let t = s.graph.value(a);
        for r in 0..t.rows() {
            let sum: f64 = t.row(r).iter().sum();
            stats.max_alpha_error = stats.max_alpha_error.max((sum - 1.0).abs());
            stats.alpha_rows += 1;
        }
    }
    for &a in attention {
        let (Some(probs), Some(spec)) = (s.graph.attention_probs(a), s.graph.attention_spec(a)) else { continue };
        let (tq, tk, h) = (spec.query.len, spec.key.len, spec.heads);
        for b in 0..spec.query.batch {
            for hd in 0..h {
                for i in (0..tq).filter(|&i| spec.query.mask[b * tq + i]) {
                    let start = ((b * h + hd) * tq + i) * tk;
                    let sum: f64 = probs[start..start + tk].iter().sum();
                    stats.max_attention_error = stats.max_attention_error.max((sum - 1.0).abs());
                    stats.attention_rows += 1;
                }
            }
        }
    }
}

/// Teacher-forced loss and accuracy plus decoded BLEU over `examples`.
pub fn validate(
    student: &Student,
    store: &ParamStore,
    plan: &IntegrationPlan,
    teachers: Teachers,
    examples: &[Example],
    cfg: &TrainerConfig,
) -> Result<Validation> {
    let max_len = student.config().max_len;
    let batches = make_batches(examples, cfg.batch_size, max_len, 0);
    let fusion_only = IntegrationPlan { distill_side: crate::strategy::PlanSide::None, ..plan.clone() };
    let (mut nll, mut correct, mut tokens) = (0.0, 0usize, 0usize);
    let mut sources = Vec::new();
    let mut references = Vec::new();
    for batch in &batches.batches {
        let feats = if plan.mode == Mode::Baseline {
            TeacherFeatures::default()
        } else {
            TeacherFeatures::compute(&fusion_only, teachers, batch, cfg.exact_cap)?
        };
        let mut s = Session::inference(store);
        let (enc, _) = student.encode(&mut s, &batch.src, feats.encoder_layers.as_deref())?;
        let (logits, dec, _) = student.decode(&mut s, &batch.tgt_in, &enc, feats.decoder_layers.as_deref())?;
        let loss = translation_loss(&mut s.graph, logits, &batch.targets, &dec.layout, 0.0)?;
        let real = dec.layout.real_tokens();
        nll += s.graph.value(loss).item() * real as f64;
        tokens += real;
        let lv = s.graph.value(logits);
        for (r, (&t, &on)) in batch.targets.iter().zip(&dec.layout.mask).enumerate() {
            if on {
                let row = lv.row(r);
                let arg = (0..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best });
                correct += usize::from(arg == t);
            }
        }
        for &i in &batch.indices {
            sources.push(examples[i].src.clone());
            references.push(examples[i].tgt.clone());
        }
    }
    if tokens == 0 {
        return Err(AptError::EmptyCorpus);
    }
    let translator = Translator { student, store, teachers };
    let hyps = translator.translate_all(&sources, cfg.valid_beam, max_len, cfg.threads)?;
    Ok(Validation { loss: nll / tokens as f64, accuracy: correct as f64 / tokens as f64, bleu: bleu(&hyps, &references)? })
}

/// Trains a student under `plan`, writing one JSONL record per step and per
/// epoch to `log`. The store of the best epoch by validation BLEU is
/// returned and, when `best_path` is given, saved there each time it
/// improves. Single-threaded runs are bit-for-bit reproducible.
#[allow(clippy::too_many_arguments)]
pub fn train(
    model: &ModelConfig,
    plan: &IntegrationPlan,
    teachers: Teachers,
    train_set: &[Example],
    valid_set: &[Example],
    cfg: &TrainerConfig,
    seed: u64,
    log: &mut dyn Write,
    best_path: Option<&Path>,
) -> Result<TrainOutcome> {
    let teachers = plan_teachers(plan, teachers);
    check_plan(plan, model, teachers)?;
    if cfg.batch_size == 0 || cfg.probe_every == 0 {
        return Err(AptError::Config("batch_size and probe_every must be positive".into()));
    }
    let header = StudentHeader {
        model: model.clone(),
        plan: plan.clone(),
        encoder_teacher: teachers.encoder.map(|t| t.config().clone()),
        decoder_teacher: teachers.decoder.map(|t| t.config().clone()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new(cfg.dtype);
    let student = Student::init(&mut store, model, plan, teachers, &mut rng)?;
    if plan.mode == Mode::Finetune {
        let sides = Teachers {
            encoder: teachers.encoder.filter(|_| plan.encoder_teacher != TeacherChoice::None),
            decoder: teachers.decoder.filter(|_| plan.decoder_teacher != TeacherChoice::None),
        };
        apply_finetune(&mut store, model, sides)?;
    }
    let step_fn = build_training_step(plan, &student)?;
    let batches = make_batches(train_set, cfg.batch_size, model.max_len, seed).batches;
    if batches.is_empty() {
        return Err(AptError::EmptyCorpus);
    }
    let mut cache: Vec<Option<TeacherFeatures>> = vec![None; batches.len()];
    let mut opt = OptimizerState::new(&store, cfg.adam.clone());
    let mut outcome_steps = Vec::new();
    let mut epochs = Vec::new();
    let mut probes = ProbeStats::default();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut step = 0usize;
    let budget = cfg.max_steps.unwrap_or(usize::MAX);

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..batches.len()).collect();
        order.shuffle(&mut rng);
        for bi in order {
            if step >= budget {
                break;
            }
            let batch: &Batch = &batches[bi];
            if cache[bi].is_none() {
                cache[bi] = Some(TeacherFeatures::compute(plan, teachers, batch, cfg.exact_cap)?);
            }
            let feats = cache[bi].as_ref().expect("filled above");
            let mut grads = {
                let mut s = Session::training(&store, model.dropout, step_seed(seed, step));
                let out = step_fn.forward(&mut s, batch, feats)?;
                if step % cfg.probe_every == 0 {
                    probe(&s, &out.attention, &out.alphas, &mut probes);
                }
                let grads = s.graph.backward(out.total)?;
                outcome_steps.push(StepLog {
                    step: step + 1,
                    l_t: out.bundle.l_t,
                    l_s: out.bundle.l_s,
                    l_w: out.bundle.l_w,
                    total: out.bundle.total,
                    lr: 0.0,
                });
                grads
            };
            let report = opt.step(&mut store, &mut grads, model.d_model)?;
            let rec = outcome_steps.last_mut().expect("pushed above");
            rec.lr = report.lr;
            write_line(log, rec)?;
            step += 1;
        }
        let v = validate(&student, &store, plan, teachers, valid_set, cfg)?;
        let rec = EpochLog { epoch, valid_bleu: v.bleu, valid_loss: v.loss };
        write_line(log, &rec)?;
        epochs.push((rec, v));
        if best.as_ref().is_none_or(|(_, b, _)| v.bleu > *b) {
            best = Some((epoch, v.bleu, store.clone()));
            if let Some(path) = best_path {
                Checkpoint::from_store(
                    "student",
                    serde_json::to_value(&header)?,
                    &store,
                    serde_json::json!({"best_epoch": epoch, "valid_bleu": v.bleu, "steps": step}),
                )
                .save(path)?;
            }
        }
        if step >= budget {
            break;
        }
    }
    log.flush()?;
    let (best_epoch, best_bleu, store) = best.ok_or_else(|| AptError::Config("training ran no epoch".into()))?;
    Ok(TrainOutcome {
        store,
        student,
        plan: plan.clone(),
        best_epoch,
        best_bleu,
        steps: outcome_steps,
        epochs,
        probes,
        skipped_steps: opt.skipped,
        header,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub coordinates: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error. Central differences carry
    /// about `ε·|loss|/h ≈ 1e-10` of rounding noise, so gradients that are
    /// exactly zero need a floor well above that.
    pub floor: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig { coordinates: 200, step: 1e-5, tolerance: 1e-4, floor: 1e-5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordinateCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub checked: usize,
    /// Coordinates whose perturbation crossed a ReLU kink.
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    pub worst: Option<CoordinateCheck>,
    /// Checked coordinates per parameter group.
    pub groups: BTreeMap<String, usize>,
    pub failures: Vec<CoordinateCheck>,
    pub teacher_in_gradients: bool,
    pub active_losses: Vec<String>,
    pub passed: bool,
}

fn group_of(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    match parts.as_slice() {
        [a, b, ..] if b.parse::<usize>().is_ok() => format!("{a}.{b}"),
        ["fusion", side, ..] => format!("fusion.{side}"),
        [a, ..] => a.to_string(),
        [] => String::new(),
    }
}

fn tiny_teacher(kind: TeacherKind, vocab: usize, d: usize, language: &str, rng: &mut ChaCha8Rng) -> Result<PretrainedModel> {
    let cfg = TeacherConfig { kind, vocab, d_model: d, n_heads: 2, depth: 2, d_ff: 2 * d, max_len: 32, dropout: 0.0, language: language.into() };
    let mut store = ParamStore::new(Dtype::F64);
    TeacherNet::build(&mut Initializer { store: &mut store, rng }, &cfg)?;
    PretrainedModel::new(store, &cfg)
}

/// Central finite differences against backpropagation on a tiny student
/// in 64-bit precision, with randomly drawn teachers where the plan needs
/// them. Fusion adapters are randomized so every bank path carries signal.
pub fn gradcheck(plan: &IntegrationPlan, tiny: &ModelConfig, seed: u64, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = ModelConfig { dropout: 0.0, ..tiny.clone() };
    let enc_kind = match plan.encoder_teacher {
        TeacherChoice::Causal => TeacherKind::Causal,
        _ => TeacherKind::Masked,
    };
    let dec_kind = match plan.decoder_teacher {
        TeacherChoice::Masked => TeacherKind::Masked,
        _ => TeacherKind::Causal,
    };
    let enc_t = tiny_teacher(enc_kind, model.src_vocab, model.d_model, "src", &mut rng)?;
    let dec_t = tiny_teacher(dec_kind, model.tgt_vocab, model.d_model, "tgt", &mut rng)?;
    let teachers = plan_teachers(plan, Teachers { encoder: Some(&enc_t), decoder: Some(&dec_t) });
    check_plan(plan, &model, teachers)?;

    let mut store = ParamStore::new(Dtype::F64);
    let student = Student::init(&mut store, &model, plan, teachers, &mut rng)?;
    let ids: Vec<_> = store.ids().filter(|&id| store.name(id).starts_with("fusion.")).collect();
    for id in ids {
        let t = store.get(id);
        let r = Tensor::from_fn(t.shape(), Dtype::F64, |_| rng.gen_range(-0.3..0.3));
        store.set(id, r)?;
    }
    let examples: Vec<Example> = (0..3)
        .map(|_| {
            let n = rng.gen_range(2..6);
            let m = rng.gen_range(2..6);
            Example {
                src: (0..n).map(|_| rng.gen_range(5..model.src_vocab)).collect(),
                tgt: (0..m).map(|_| rng.gen_range(5..model.tgt_vocab)).collect(),
            }
        })
        .collect();
    let refs: Vec<&Example> = examples.iter().collect();
    let batch = Batch::from_examples(&refs, (0..examples.len()).collect());
    let feats = TeacherFeatures::compute(plan, teachers, &batch, 64)?;
    let step = build_training_step(plan, &student)?;

    let eval = |store: &ParamStore| -> Result<(f64, u64)> {
        let mut s = Session::inference(store);
        let out = step.forward(&mut s, &batch, &feats)?;
        Ok((s.graph.value(out.total).item(), s.graph.kink_signature()))
    };
    let (grads, base_sig) = {
        let mut s = Session::inference(&store);
        let out = step.forward(&mut s, &batch, &feats)?;
        (s.graph.backward(out.total)?, s.graph.kink_signature())
    };
    let teacher_in_gradients = grads.contains_store(enc_t.store()) || grads.contains_store(dec_t.store());

    // Every tensor once, then uniformly random tensors.
    let all: Vec<_> = store.ids().collect();
    let mut picks: Vec<(crate::params::ParamId, usize)> =
        all.iter().map(|&id| (id, rng.gen_range(0..store.get(id).len()))).collect();
    while picks.len() < cfg.coordinates {
        let id = all[rng.gen_range(0..all.len())];
        picks.push((id, rng.gen_range(0..store.get(id).len())));
    }

    let mut report = GradcheckReport {
        checked: 0,
        skipped_kinks: 0,
        max_rel_error: 0.0,
        worst: None,
        groups: BTreeMap::new(),
        failures: Vec::new(),
        teacher_in_gradients,
        active_losses: plan.active_losses().into_iter().map(String::from).collect(),
        passed: false,
    };
    for (id, index) in picks {
        let original = store.get(id).clone();
        let perturbed = |delta: f64| {
            let mut t = original.clone();
            t.data_mut()[index] += delta;
            t
        };
        store.set(id, perturbed(cfg.step))?;
        let (plus, sig_plus) = eval(&store)?;
        store.set(id, perturbed(-cfg.step))?;
        let (minus, sig_minus) = eval(&store)?;
        store.set(id, original)?;
        if sig_plus != base_sig || sig_minus != base_sig {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * cfg.step);
        let analytic = grads.get(&store, id).map(|g| g.data()[index]).unwrap_or(0.0);
        let rel_error = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(cfg.floor);
        let check = CoordinateCheck { param: store.name(id).to_string(), index, analytic, numeric, rel_error };
        report.checked += 1;
        *report.groups.entry(group_of(&check.param)).or_insert(0) += 1;
        if rel_error > cfg.tolerance {
            report.failures.push(check.clone());
        }
        if report.worst.as_ref().is_none_or(|w| rel_error > w.rel_error) {
            report.max_rel_error = rel_error;
            report.worst = Some(check);
        }
    }
    report.passed = report.failures.is_empty() && report.checked >= cfg.coordinates.min(200) && !teacher_in_gradients;
    Ok(report)
}
