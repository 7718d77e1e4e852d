//! Frozen teacher language models: a causal (left-to-right) stack and a
//! masked-token bidirectional stack, both built from encoder layers.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::checkpoint::Checkpoint;
use crate::error::{AptError, Result};
use crate::model::{embed_batch, teacher_forcing_pair, translation_loss, EncoderLayer, Linear, Session, TokenBatch, MASK};
use crate::optim::{AdamConfig, OptimizerState};
use crate::params::{Binder, Init, Initializer, ParamId, ParamSource, ParamStore};
use crate::tensor::{Dtype, Tensor};

/// First id that raw text can map to.
const FIRST_WORD_ID: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherKind {
    Causal,
    Masked,
}

impl TeacherKind {
    pub fn name(self) -> &'static str {
        match self {
            TeacherKind::Causal => "causal",
            TeacherKind::Masked => "masked",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub kind: TeacherKind,
    pub vocab: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub depth: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub language: String,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            kind: TeacherKind::Causal,
            vocab: 512,
            d_model: 64,
            n_heads: 4,
            depth: 2,
            d_ff: 128,
            max_len: 64,
            dropout: 0.1,
            language: "tgt".into(),
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            problems.push(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.depth == 0 {
            problems.push("teacher depth must be at least 1".to_string());
        }
        if self.vocab <= FIRST_WORD_ID {
            problems.push(format!("vocabulary of {} leaves no room beyond the reserved ids", self.vocab));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.max_len == 0 || self.d_ff == 0 {
            problems.push("max_len and d_ff must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(AptError::Config(problems.join("; ")))
        }
    }
}

/// Embedding, `depth` self-attention layers (causal for the causal kind)
/// and a language-model head.
#[derive(Clone, Debug)]
pub struct TeacherNet {
    pub config: TeacherConfig,
    pub embed: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub head: Linear,
}

pub struct TeacherOut {
    /// `R^P_1 … R^P_L`.
    pub layers: Vec<Var>,
    pub logits: Var,
    pub attention: Vec<Var>,
}

impl TeacherNet {
    pub fn build(src: &mut dyn ParamSource, config: &TeacherConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let embed = src.param("embed", &[config.vocab, d], Init::Normal((d as f64).powf(-0.5)))?;
        let layers = (0..config.depth)
            .map(|n| EncoderLayer::build(src, &format!("layers.{n}"), d, config.n_heads, config.d_ff))
            .collect::<Result<_>>()?;
        let head = Linear::build(src, "lm_head", d, config.vocab)?;
        Ok(TeacherNet { config: config.clone(), embed, layers, head })
    }

    pub fn forward(&self, s: &mut Session, tokens: &TokenBatch) -> Result<TeacherOut> {
        for len in tokens.layout.lengths() {
            if len > self.config.max_len {
                return Err(AptError::LengthOverflow { len, max: self.config.max_len });
            }
        }
        let causal = self.config.kind == TeacherKind::Causal;
        let x = embed_batch(s, self.embed, tokens, self.config.vocab, "teacher")?;
        let mut x = s.dropout(x)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let out = layer.forward(s, x, &tokens.layout, causal)?;
            x = out.output;
            layers.push(x);
            attention.push(out.attention);
        }
        let logits = self.head.forward(s, x)?;
        Ok(TeacherOut { layers, logits, attention })
    }
}

/// A trained teacher. Its store is frozen, so graphs built over it never
/// produce gradients for it.
#[derive(Debug)]
pub struct PretrainedModel {
    pub net: TeacherNet,
    store: ParamStore,
    passes: AtomicUsize,
}

impl Clone for PretrainedModel {
    fn clone(&self) -> Self {
        PretrainedModel { net: self.net.clone(), store: self.store.clone(), passes: AtomicUsize::new(self.passes()) }
    }
}

impl PretrainedModel {
    pub fn new(mut store: ParamStore, config: &TeacherConfig) -> Result<Self> {
        let net = TeacherNet::build(&mut Binder { store: &store }, config)?;
        store.freeze();
        Ok(PretrainedModel { net, store, passes: AtomicUsize::new(0) })
    }

    pub fn config(&self) -> &TeacherConfig {
        &self.net.config
    }

    pub fn kind(&self) -> TeacherKind {
        self.net.config.kind
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn checksum(&self) -> String {
        self.store.checksum()
    }

    /// Teacher forward passes executed so far.
    pub fn passes(&self) -> usize {
        self.passes.load(Ordering::Relaxed)
    }

    pub fn reset_passes(&self) {
        self.passes.store(0, Ordering::Relaxed);
    }

    /// Errors unless the teacher shares the given vocabulary size.
    pub fn ensure_vocab(&self, vocab: usize) -> Result<()> {
        if self.net.config.vocab != vocab {
            return Err(AptError::Incompatible {
                name: format!("{} teacher vocabulary", self.kind().name()),
                detail: format!("teacher has {} entries, student side has {vocab}", self.net.config.vocab),
            });
        }
        Ok(())
    }

    fn run(&self, tokens: &TokenBatch) -> Result<(Vec<Tensor>, Tensor)> {
        let mut s = Session::inference(&self.store);
        let out = self.net.forward(&mut s, tokens)?;
        self.passes.fetch_add(1, Ordering::Relaxed);
        let layers = out.layers.iter().map(|&v| s.graph.value(v).clone()).collect();
        Ok((layers, s.graph.value(out.logits).clone()))
    }

    pub fn to_checkpoint(&self, metadata: serde_json::Value) -> Result<Checkpoint> {
        Ok(Checkpoint::from_store(self.kind().name(), serde_json::to_value(&self.net.config)?, &self.store, metadata))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: TeacherConfig = serde_json::from_value(ckpt.header.config.clone())?;
        if ckpt.header.kind != config.kind.name() {
            return Err(AptError::Checkpoint(format!(
                "header kind `{}` disagrees with config kind `{}`",
                ckpt.header.kind,
                config.kind.name()
            )));
        }
        Self::new(ckpt.to_store()?, &config)
    }
}

/// Per-layer teacher states `R^P_1 … R^P_L`, each `[batch * len, d_P]`,
/// detached from any student graph.
pub fn teacher_representations(model: &PretrainedModel, tokens: &TokenBatch) -> Result<Vec<Tensor>> {
    Ok(model.run(tokens)?.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistributionMode {
    Exact,
    Fast,
}

#[derive(Clone, Debug)]
pub struct TeacherDistribution {
    /// `[batch * len, V]`; row `j` is the teacher's distribution for `y_j`.
    pub probs: Tensor,
    /// Set when position `j`'s own token was visible to the teacher.
    pub biased: bool,
    pub passes: usize,
}

fn softmax_rows(logits: &Tensor) -> Tensor {
    let cols = logits.cols();
    let mut data = logits.data().to_vec();
    for row in data.chunks_mut(cols) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    Tensor::from_raw(logits.shape().to_vec(), data, logits.dtype())
}

/// Teacher distribution for every position of the target sequences `y`
/// (laid out like the student's shifted targets).
///
/// A causal teacher reads `BOS y_1 … y_{J-1}` in one pass. A masked teacher
/// in exact mode runs one pass per position with that position masked; fast
/// mode runs a single unmasked pass and flags the result as biased.
pub fn teacher_distribution(
    model: &PretrainedModel,
    y: &TokenBatch,
    mode: DistributionMode,
    exact_cap: usize,
) -> Result<TeacherDistribution> {
    let start = model.passes();
    match (model.kind(), mode) {
        (TeacherKind::Causal, _) => {
            let shifted: Vec<Vec<usize>> = y
                .seqs()
                .iter()
                .map(|s| {
                    let (input, _) = teacher_forcing_pair(&s[..s.len().saturating_sub(1)]);
                    input
                })
                .collect();
            let input = TokenBatch::from_seqs(&shifted);
            if input.layout != y.layout {
                return Err(AptError::Misaligned("shifted teacher input does not match target layout".into()));
            }
            let (_, logits) = model.run(&input)?;
            Ok(TeacherDistribution { probs: softmax_rows(&logits), biased: false, passes: model.passes() - start })
        }
        (TeacherKind::Masked, DistributionMode::Fast) => {
            let (_, logits) = model.run(y)?;
            Ok(TeacherDistribution { probs: softmax_rows(&logits), biased: true, passes: model.passes() - start })
        }
        (TeacherKind::Masked, DistributionMode::Exact) => {
            let len = y.layout.len;
            if len > exact_cap {
                return Err(AptError::Budget(format!(
                    "exact masked distribution needs {len} teacher passes, cap is {exact_cap}"
                )));
            }
            let v = model.config().vocab;
            let mut probs = vec![0.0; y.ids.len() * v];
            for j in 0..len {
                let mut masked = y.clone();
                for b in 0..y.layout.batch {
                    if y.layout.mask[b * len + j] {
                        masked.ids[b * len + j] = MASK;
                    }
                }
                let (_, logits) = model.run(&masked)?;
                let p = softmax_rows(&logits);
                for b in 0..y.layout.batch {
                    let r = b * len + j;
                    probs[r * v..(r + 1) * v].copy_from_slice(p.row(r));
                }
            }
            // Padded rows get a uniform distribution so every row is normalized.
            for (r, &on) in y.layout.mask.iter().enumerate() {
                if !on {
                    probs[r * v..(r + 1) * v].iter_mut().for_each(|q| *q = 1.0 / v as f64);
                }
            }
            let probs = Tensor::from_raw(vec![y.ids.len(), v], probs, model.store().dtype());
            Ok(TeacherDistribution { probs, biased: false, passes: model.passes() - start })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPolicy {
    MaskToken,
    Random,
    Keep,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingConfig {
    pub rate: f64,
    pub mask_token_frac: f64,
    pub random_frac: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig { rate: 0.15, mask_token_frac: 0.8, random_frac: 0.1 }
    }
}

/// Which positions of a batch are predicted, and how each was corrupted.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskingPlan {
    /// Flat row indices into the batch.
    pub positions: Vec<usize>,
    pub policies: Vec<MaskPolicy>,
    pub corrupted: Vec<usize>,
}

impl MaskingPlan {
    /// Each sentence of length `n` gets `⌊rate·n + u⌋` masked positions
    /// (`u` uniform), at least one.
    pub fn sample(tokens: &TokenBatch, config: &MaskingConfig, vocab: usize, rng: &mut ChaCha8Rng) -> Self {
        let len = tokens.layout.len;
        let mut positions = Vec::new();
        let mut policies = Vec::new();
        let mut corrupted = tokens.ids.clone();
        for (b, n) in tokens.layout.lengths().into_iter().enumerate() {
            if n == 0 {
                continue;
            }
            let count = ((config.rate * n as f64 + rng.gen::<f64>()).floor() as usize).clamp(1, n);
            let mut chosen: Vec<usize> = rand::seq::index::sample(rng, n, count).into_vec();
            chosen.sort_unstable();
            for t in chosen {
                let r = b * len + t;
                let u: f64 = rng.gen();
                let policy = if u < config.mask_token_frac {
                    MaskPolicy::MaskToken
                } else if u < config.mask_token_frac + config.random_frac {
                    MaskPolicy::Random
                } else {
                    MaskPolicy::Keep
                };
                corrupted[r] = match policy {
                    MaskPolicy::MaskToken => MASK,
                    MaskPolicy::Random if vocab > FIRST_WORD_ID => rng.gen_range(FIRST_WORD_ID..vocab),
                    MaskPolicy::Random => MASK,
                    MaskPolicy::Keep => tokens.ids[r],
                };
                positions.push(r);
                policies.push(policy);
            }
        }
        MaskingPlan { positions, policies, corrupted }
    }

    pub fn row_mask(&self, rows: usize) -> Vec<bool> {
        let mut m = vec![false; rows];
        self.positions.iter().for_each(|&r| m[r] = true);
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Stops after this many updates even mid-epoch.
    pub max_steps: Option<usize>,
    pub adam: AdamConfig,
    pub masking: MaskingConfig,
    /// Sentences held out from the end of the corpus for perplexity.
    pub heldout: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 2,
            batch_size: 32,
            max_steps: None,
            adam: AdamConfig { lr_scale: 0.5, ..AdamConfig::default() },
            masking: MaskingConfig::default(),
            heldout: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub heldout_nll: f64,
    pub heldout_perplexity: f64,
    /// Next-token accuracy (causal) or masked-token accuracy (masked).
    pub heldout_accuracy: f64,
}

pub struct PretrainOutcome {
    pub model: PretrainedModel,
    pub epochs: Vec<PretrainEpoch>,
}

impl PretrainOutcome {
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        self.model.to_checkpoint(serde_json::json!({ "epochs": self.epochs }))
    }
}

/// Length-sorted mini-batches over sentence indices.
fn lm_batches(corpus: &[Vec<usize>], idx: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut sorted = idx.to_vec();
    sorted.sort_by_key(|&i| (corpus[i].len(), i));
    sorted.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Inputs and loss for one teacher mini-batch; returns `(loss, predictions, correct)`.
fn lm_loss(
    net: &TeacherNet,
    s: &mut Session,
    sents: &[&Vec<usize>],
    masking: &MaskingConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, usize, usize)> {
    let (out, targets, rows, layout) = match net.config.kind {
        TeacherKind::Causal => {
            let (inputs, targets): (Vec<_>, Vec<_>) = sents.iter().map(|z| teacher_forcing_pair(z)).unzip();
            let batch = TokenBatch::from_seqs(&inputs);
            let targets = crate::model::pad_targets(&targets, batch.layout.len);
            let out = net.forward(s, &batch)?;
            let rows = batch.layout.mask.clone();
            (out, targets, rows, batch.layout)
        }
        TeacherKind::Masked => {
            let seqs: Vec<Vec<usize>> = sents.iter().map(|z| crate::data::source_input(z)).collect();
            let batch = TokenBatch::from_seqs(&seqs);
            let plan = MaskingPlan::sample(&batch, masking, net.config.vocab, rng);
            let rows = plan.row_mask(batch.ids.len());
            let corrupted = TokenBatch { ids: plan.corrupted, layout: batch.layout.clone() };
            let out = net.forward(s, &corrupted)?;
            (out, batch.ids, rows, batch.layout)
        }
    };
    let logits = s.graph.value(out.logits);
    let v = logits.cols();
    let mut correct = 0;
    for (r, &on) in rows.iter().enumerate() {
        if on {
            let row = logits.row(r);
            let best = (0..v).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            correct += usize::from(best == targets[r]);
        }
    }
    let predictions = rows.iter().filter(|&&m| m).count();
    let layout = crate::autograd::SeqLayout { mask: rows, ..layout };
    let loss = translation_loss(&mut s.graph, out.logits, &targets, &layout, 0.0)?;
    Ok((loss, predictions, correct))
}

/// Held-out `(nll, accuracy)` with a fixed masking seed.
fn heldout_metrics(net: &TeacherNet, store: &ParamStore, corpus: &[Vec<usize>], idx: &[usize], config: &PretrainConfig) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let (mut nll, mut n, mut correct) = (0.0, 0usize, 0usize);
    for chunk in lm_batches(corpus, idx, config.batch_size) {
        let sents: Vec<&Vec<usize>> = chunk.iter().map(|&i| &corpus[i]).collect();
        let mut s = Session::inference(store);
        let (loss, k, c) = lm_loss(net, &mut s, &sents, &config.masking, &mut rng)?;
        nll += s.graph.value(loss).item() * k as f64;
        n += k;
        correct += c;
    }
    Ok((nll / n.max(1) as f64, correct as f64 / n.max(1) as f64))
}

/// Trains a teacher of `config.kind` on monolingual token sequences.
pub fn pretrain(corpus: &[Vec<usize>], config: &TeacherConfig, train: &PretrainConfig, seed: u64) -> Result<PretrainOutcome> {
    config.validate()?;
    let corpus: Vec<Vec<usize>> = corpus.iter().filter(|z| !z.is_empty() && z.len() < config.max_len).cloned().collect();
    if corpus.is_empty() {
        return Err(AptError::EmptyCorpus);
    }
    let heldout = train.heldout.min(corpus.len() / 10);
    let (train_idx, held_idx): (Vec<usize>, Vec<usize>) = if heldout == 0 {
        ((0..corpus.len()).collect(), (0..corpus.len()).collect())
    } else {
        ((0..corpus.len() - heldout).collect(), (corpus.len() - heldout..corpus.len()).collect())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new(Dtype::F32);
    let net = TeacherNet::build(&mut Initializer { store: &mut store, rng: &mut rng }, config)?;
    let mut opt = OptimizerState::new(&store, train.adam.clone());
    let mut batches = lm_batches(&corpus, &train_idx, train.batch_size);
    let mut epochs = Vec::new();
    let mut steps = 0usize;
    'outer: for epoch in 1..=train.epochs {
        batches.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in &batches {
            if train.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let sents: Vec<&Vec<usize>> = chunk.iter().map(|&i| &corpus[i]).collect();
            let step_seed: u64 = rng.gen();
            let mut grads = {
                let mut s = Session::training(&store, config.dropout, step_seed);
                let (loss, _, _) = lm_loss(&net, &mut s, &sents, &train.masking, &mut rng)?;
                total += s.graph.value(loss).item();
                count += 1;
                s.graph.backward(loss)?
            };
            opt.step(&mut store, &mut grads, config.d_model)?;
            steps += 1;
        }
        let (nll, acc) = heldout_metrics(&net, &store, &corpus, &held_idx, train)?;
        epochs.push(PretrainEpoch {
            epoch,
            steps,
            train_loss: total / count.max(1) as f64,
            heldout_nll: nll,
            heldout_perplexity: nll.exp(),
            heldout_accuracy: acc,
        });
        if train.max_steps.is_some_and(|m| steps >= m) {
            break 'outer;
        }
    }
    let model = PretrainedModel::new(store, config)?;
    Ok(PretrainOutcome { model, epochs })
}

pub fn pretrain_causal(corpus: &[Vec<usize>], config: &TeacherConfig, train: &PretrainConfig, seed: u64) -> Result<PretrainOutcome> {
    pretrain(corpus, &TeacherConfig { kind: TeacherKind::Causal, ..config.clone() }, train, seed)
}

pub fn pretrain_masked(corpus: &[Vec<usize>], config: &TeacherConfig, train: &PretrainConfig, seed: u64) -> Result<PretrainOutcome> {
    pretrain(corpus, &TeacherConfig { kind: TeacherKind::Masked, ..config.clone() }, train, seed)
}

/// Held-out `(nll, accuracy)` of a trained teacher on a corpus.
pub fn evaluate_teacher(model: &PretrainedModel, corpus: &[Vec<usize>], train: &PretrainConfig) -> Result<(f64, f64)> {
    let idx: Vec<usize> = (0..corpus.len()).collect();
    heldout_metrics(&model.net, model.store(), corpus, &idx, train)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(kind: TeacherKind) -> TeacherConfig {
        TeacherConfig { kind, vocab: 12, d_model: 8, n_heads: 2, depth: 2, d_ff: 16, max_len: 16, dropout: 0.0, language: "x".into() }
    }

    fn untrained(kind: TeacherKind) -> PretrainedModel {
        let mut store = ParamStore::new(Dtype::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        TeacherNet::build(&mut Initializer { store: &mut store, rng: &mut rng }, &tiny(kind)).unwrap();
        PretrainedModel::new(store, &tiny(kind)).unwrap()
    }

    #[test]
    fn masking_fraction_and_policy_split() {
        let seqs: Vec<Vec<usize>> = (0..500).map(|i| (0..20).map(|t| 5 + (i + t) % 7).collect()).collect();
        let batch = TokenBatch::from_seqs(&seqs);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let plan = MaskingPlan::sample(&batch, &MaskingConfig::default(), 12, &mut rng);
        let frac = plan.positions.len() as f64 / 10_000.0;
        assert!((frac - 0.15).abs() <= 0.02, "{frac}");
        let mut draws = Vec::new();
        while draws.len() < 10_000 {
            draws.extend(MaskingPlan::sample(&batch, &MaskingConfig::default(), 12, &mut rng).policies);
        }
        let share = |p| draws.iter().filter(|&&d| d == p).count() as f64 / draws.len() as f64;
        assert!((share(MaskPolicy::MaskToken) - 0.8).abs() <= 0.03);
        assert!((share(MaskPolicy::Random) - 0.1).abs() <= 0.03);
        assert!((share(MaskPolicy::Keep) - 0.1).abs() <= 0.03);
    }

    #[test]
    fn every_sentence_gets_a_masked_position() {
        let seqs: Vec<Vec<usize>> = (1..6).map(|n| vec![6; n]).collect();
        let batch = TokenBatch::from_seqs(&seqs);
        let plan = MaskingPlan::sample(&batch, &MaskingConfig::default(), 12, &mut ChaCha8Rng::seed_from_u64(1));
        for b in 0..5 {
            assert!(plan.positions.iter().any(|&r| r / batch.layout.len == b));
        }
        assert!(plan.positions.iter().all(|&r| batch.layout.mask[r]));
    }

    #[test]
    fn causal_representations_ignore_the_future() {
        let m = untrained(TeacherKind::Causal);
        let a = teacher_representations(&m, &TokenBatch::single(&[5, 6, 7, 8])).unwrap();
        let b = teacher_representations(&m, &TokenBatch::single(&[5, 6, 9, 10])).unwrap();
        assert_eq!(a.len(), 2);
        for (la, lb) in a.iter().zip(&b) {
            assert_eq!(la.shape(), &[4, 8]);
            assert_eq!(&la.data()[..16], &lb.data()[..16]);
            assert_ne!(&la.data()[16..], &lb.data()[16..]);
        }
    }

    #[test]
    fn masked_representations_see_both_directions() {
        let m = untrained(TeacherKind::Masked);
        let a = teacher_representations(&m, &TokenBatch::single(&[5, 6, 7, 8])).unwrap();
        let b = teacher_representations(&m, &TokenBatch::single(&[5, 6, 7, 9])).unwrap();
        assert_ne!(&a[1].data()[..24], &b[1].data()[..24]);
    }

    #[test]
    fn out_of_vocabulary_tokens_rejected() {
        let m = untrained(TeacherKind::Masked);
        assert!(matches!(teacher_representations(&m, &TokenBatch::single(&[5, 40])), Err(AptError::OutOfVocab { .. })));
        assert!(m.ensure_vocab(13).is_err());
        assert!(m.ensure_vocab(12).is_ok());
    }

    #[test]
    fn exact_mode_counts_passes_and_hides_the_token() {
        let m = untrained(TeacherKind::Masked);
        let y = TokenBatch::single(&[5, 6, 7]);
        let d = teacher_distribution(&m, &y, DistributionMode::Exact, 8).unwrap();
        assert_eq!(d.passes, 3);
        assert!(!d.biased);
        for r in 0..3 {
            assert!((d.probs.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
        let y2 = TokenBatch::single(&[5, 9, 7]);
        let d2 = teacher_distribution(&m, &y2, DistributionMode::Exact, 8).unwrap();
        assert_eq!(d.probs.row(1), d2.probs.row(1));
        assert!(matches!(teacher_distribution(&m, &y, DistributionMode::Exact, 2), Err(AptError::Budget(_))));
        let fast = teacher_distribution(&m, &y, DistributionMode::Fast, 2).unwrap();
        assert!(fast.biased);
        assert_eq!(fast.passes, 1);
    }

    #[test]
    fn causal_distribution_is_one_pass_and_causal() {
        let m = untrained(TeacherKind::Causal);
        let y = TokenBatch::from_seqs(&[vec![5, 6, 7, 2], vec![8, 2]]);
        let d = teacher_distribution(&m, &y, DistributionMode::Exact, 1).unwrap();
        assert_eq!(d.passes, 1);
        let y2 = TokenBatch::from_seqs(&[vec![5, 6, 9, 2], vec![8, 2]]);
        let d2 = teacher_distribution(&m, &y2, DistributionMode::Exact, 1).unwrap();
        // Row j depends only on y_<j.
        for r in 0..3 {
            assert_eq!(d.probs.row(r), d2.probs.row(r));
        }
        assert_ne!(d.probs.row(3), d2.probs.row(3));
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(
            pretrain_causal(&[], &tiny(TeacherKind::Causal), &PretrainConfig::default(), 0),
            Err(AptError::EmptyCorpus)
        ));
    }

    #[test]
    fn checkpoint_round_trip_preserves_teacher() {
        let m = untrained(TeacherKind::Causal);
        let ck = m.to_checkpoint(serde_json::json!({})).unwrap();
        let back = PretrainedModel::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.checksum(), m.checksum());
        assert!(back.store().is_frozen());
    }
}
