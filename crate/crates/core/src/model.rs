//! Post-norm Transformer encoder-decoder with every layer state retained.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttentionSpec, Graph, SeqLayout, Var};
use crate::error::{AptError, Result};
use crate::params::{Binder, Init, Initializer, ParamId, ParamSource, ParamStore};
use crate::tensor::{Dtype, Tensor};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const MASK: usize = 4;

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub enc_depth: usize,
    pub dec_depth: usize,
    pub d_ff: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            enc_depth: 2,
            dec_depth: 2,
            d_ff: 128,
            src_vocab: 512,
            tgt_vocab: 512,
            dropout: 0.1,
            label_smoothing: 0.1,
            max_len: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            problems.push(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.enc_depth == 0 || self.dec_depth == 0 {
            problems.push("encoder and decoder depth must be at least 1".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            problems.push(format!("label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if self.src_vocab <= MASK || self.tgt_vocab <= MASK {
            problems.push("vocabularies must include the reserved ids".to_string());
        }
        if self.d_ff == 0 || self.max_len == 0 {
            problems.push("d_ff and max_len must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(AptError::Config(problems.join("; ")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::Source => "source",
            Side::Target => "target",
        }
    }
}

/// Padded token ids laid out `[batch, len]`, with the matching row layout.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub layout: SeqLayout,
}

impl TokenBatch {
    pub fn from_seqs(seqs: &[Vec<usize>]) -> Self {
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut mask = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend_from_slice(s);
            mask.extend(std::iter::repeat(true).take(s.len()));
            ids.extend(std::iter::repeat(PAD).take(len - s.len()));
            mask.extend(std::iter::repeat(false).take(len - s.len()));
        }
        TokenBatch { ids, layout: SeqLayout { batch: seqs.len(), len, mask } }
    }

    pub fn single(seq: &[usize]) -> Self {
        Self::from_seqs(&[seq.to_vec()])
    }

    pub fn seqs(&self) -> Vec<Vec<usize>> {
        (0..self.layout.batch)
            .map(|b| {
                (0..self.layout.len)
                    .filter(|&t| self.layout.mask[b * self.layout.len + t])
                    .map(|t| self.ids[b * self.layout.len + t])
                    .collect()
            })
            .collect()
    }
}

/// One forward pass over a parameter store.
///
/// Dropout is active only when the session is created with
/// [`Session::training`].
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'a> Session<'a> {
    pub fn inference(store: &'a ParamStore) -> Self {
        Session { graph: Graph::new(store.dtype()), store, dropout: None }
    }

    pub fn training(store: &'a ParamStore, dropout: f64, seed: u64) -> Self {
        let dropout = (dropout > 0.0).then(|| (dropout, ChaCha8Rng::seed_from_u64(seed)));
        Session { graph: Graph::new(store.dtype()), store, dropout }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.graph.param(self.store, id)
    }

    pub fn is_training(&self) -> bool {
        self.dropout.is_some()
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some((rate, rng)) = self.dropout.as_mut() else { return Ok(x) };
        let keep = 1.0 - *rate;
        let rate = *rate;
        let shape = self.graph.shape(x).to_vec();
        let mask = Tensor::from_fn(&shape, self.graph.dtype(), |_| {
            if rng.gen::<f64>() < rate {
                0.0
            } else {
                1.0 / keep
            }
        });
        let m = self.graph.constant(mask);
        self.graph.mul(x, m)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn build(src: &mut dyn ParamSource, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Self::build_init(src, name, d_in, d_out, Init::Xavier)
    }

    /// Bias is always zero-initialized.
    pub fn build_init(src: &mut dyn ParamSource, name: &str, d_in: usize, d_out: usize, w_init: Init) -> Result<Self> {
        Ok(Linear {
            w: src.param(&format!("{name}.w"), &[d_in, d_out], w_init)?,
            b: src.param(&format!("{name}.b"), &[d_out], Init::Zeros)?,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (w, b) = (s.p(self.w), s.p(self.b));
        s.graph.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn build(src: &mut dyn ParamSource, name: &str, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: src.param(&format!("{name}.gain"), &[d], Init::Ones)?,
            bias: src.param(&format!("{name}.bias"), &[d], Init::Zeros)?,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (g, b) = (s.p(self.gain), s.p(self.bias));
        s.graph.layer_norm(x, g, b, LN_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

/// Output of an attention sublayer: the projected result plus the raw
/// attention node, whose saved probabilities can be inspected.
pub struct AttentionOut {
    pub output: Var,
    pub weights: Var,
}

impl MultiHeadAttention {
    pub fn build(src: &mut dyn ParamSource, name: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(MultiHeadAttention {
            query: Linear::build(src, &format!("{name}.query"), d, d)?,
            key: Linear::build(src, &format!("{name}.key"), d, d)?,
            value: Linear::build(src, &format!("{name}.value"), d, d)?,
            output: Linear::build(src, &format!("{name}.output"), d, d)?,
            heads,
        })
    }

    pub fn forward(
        &self,
        s: &mut Session,
        x: Var,
        x_layout: &SeqLayout,
        memory: Var,
        memory_layout: &SeqLayout,
        causal: bool,
    ) -> Result<AttentionOut> {
        let q = self.query.forward(s, x)?;
        let k = self.key.forward(s, memory)?;
        let v = self.value.forward(s, memory)?;
        let spec = AttentionSpec { heads: self.heads, causal, query: x_layout.clone(), key: memory_layout.clone() };
        let weights = s.graph.attention(q, k, v, spec)?;
        let output = self.output.forward(s, weights)?;
        Ok(AttentionOut { output, weights })
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn build(src: &mut dyn ParamSource, name: &str, d: usize, d_ff: usize) -> Result<Self> {
        Ok(FeedForward {
            inner: Linear::build(src, &format!("{name}.inner"), d, d_ff)?,
            outer: Linear::build(src, &format!("{name}.outer"), d_ff, d)?,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.inner.forward(s, x)?;
        let h = s.graph.relu(h)?;
        self.outer.forward(s, h)
    }
}

/// Self-attention and feed-forward sublayers, each followed by residual
/// addition and layer normalization. Shared by the student encoder and
/// both teacher kinds.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub self_attn: MultiHeadAttention,
    pub attn_norm: LayerNorm,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

pub struct EncoderLayerOut {
    pub output: Var,
    pub attention: Var,
}

impl EncoderLayer {
    pub fn build(src: &mut dyn ParamSource, name: &str, d: usize, heads: usize, d_ff: usize) -> Result<Self> {
        Ok(EncoderLayer {
            self_attn: MultiHeadAttention::build(src, &format!("{name}.self_attn"), d, heads)?,
            attn_norm: LayerNorm::build(src, &format!("{name}.attn_norm"), d)?,
            ffn: FeedForward::build(src, &format!("{name}.ffn"), d, d_ff)?,
            ffn_norm: LayerNorm::build(src, &format!("{name}.ffn_norm"), d)?,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var, layout: &SeqLayout, causal: bool) -> Result<EncoderLayerOut> {
        let att = self.self_attn.forward(s, x, layout, x, layout, causal)?;
        let a = s.dropout(att.output)?;
        let h = s.graph.add(x, a)?;
        let h = self.attn_norm.forward(s, h)?;
        let f = self.ffn.forward(s, h)?;
        let f = s.dropout(f)?;
        let r = s.graph.add(h, f)?;
        let output = self.ffn_norm.forward(s, r)?;
        Ok(EncoderLayerOut { output, attention: att.weights })
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub self_norm: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

pub struct DecoderLayerOut {
    pub output: Var,
    pub self_state: Var,
    pub cross_state: Var,
    pub self_attention: Var,
    pub cross_attention: Var,
}

impl DecoderLayer {
    pub fn build(src: &mut dyn ParamSource, name: &str, d: usize, heads: usize, d_ff: usize) -> Result<Self> {
        Ok(DecoderLayer {
            self_attn: MultiHeadAttention::build(src, &format!("{name}.self_attn"), d, heads)?,
            self_norm: LayerNorm::build(src, &format!("{name}.attn_norm"), d)?,
            cross_attn: MultiHeadAttention::build(src, &format!("{name}.cross_attn"), d, heads)?,
            cross_norm: LayerNorm::build(src, &format!("{name}.cross_norm"), d)?,
            ffn: FeedForward::build(src, &format!("{name}.ffn"), d, d_ff)?,
            ffn_norm: LayerNorm::build(src, &format!("{name}.ffn_norm"), d)?,
        })
    }

    pub fn forward(
        &self,
        s: &mut Session,
        x: Var,
        layout: &SeqLayout,
        memory: Var,
        memory_layout: &SeqLayout,
    ) -> Result<DecoderLayerOut> {
        let sa = self.self_attn.forward(s, x, layout, x, layout, true)?;
        let a = s.dropout(sa.output)?;
        let h = s.graph.add(x, a)?;
        let self_state = self.self_norm.forward(s, h)?;
        let ca = self.cross_attn.forward(s, self_state, layout, memory, memory_layout, false)?;
        let c = s.dropout(ca.output)?;
        let h = s.graph.add(self_state, c)?;
        let cross_state = self.cross_norm.forward(s, h)?;
        let f = self.ffn.forward(s, cross_state)?;
        let f = s.dropout(f)?;
        let h = s.graph.add(cross_state, f)?;
        let output = self.ffn_norm.forward(s, h)?;
        Ok(DecoderLayerOut {
            output,
            self_state,
            cross_state,
            self_attention: sa.weights,
            cross_attention: ca.weights,
        })
    }
}

/// Fixed sinusoidal position table `[len, d]`.
pub fn positional_encoding(len: usize, d: usize, dtype: Dtype) -> Tensor {
    Tensor::from_fn(&[len, d], dtype, |idx| {
        let (pos, c) = (idx / d, idx % d);
        let pair = (c / 2) * 2;
        let angle = pos as f64 / 10000f64.powf(pair as f64 / d as f64);
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// `table[id] · √d + PE(position)` for every token of a padded batch.
pub fn embed_batch(
    s: &mut Session,
    table: ParamId,
    tokens: &TokenBatch,
    vocab: usize,
    side: &'static str,
) -> Result<Var> {
    for (&id, _) in tokens.ids.iter().zip(&tokens.layout.mask).filter(|(_, &m)| m) {
        if id >= vocab {
            return Err(AptError::OutOfVocab { side, id, size: vocab });
        }
    }
    let t = s.p(table);
    let d = s.graph.shape(t)[1];
    let rows = s.graph.gather(t, &tokens.ids)?;
    let scaled = s.graph.scale(rows, (d as f64).sqrt())?;
    let pe = positional_encoding(tokens.layout.len, d, s.graph.dtype());
    let mut tiled = Vec::with_capacity(tokens.ids.len() * d);
    for _ in 0..tokens.layout.batch {
        tiled.extend_from_slice(pe.data());
    }
    let pe = s.graph.constant(Tensor::from_raw(vec![tokens.ids.len(), d], tiled, s.graph.dtype()));
    s.graph.add(scaled, pe)
}

/// Per-layer encoder representations `R^E_0 … R^E_N`.
pub struct EncoderState {
    pub layers: Vec<Var>,
    pub layout: SeqLayout,
    pub attention: Vec<Var>,
}

impl EncoderState {
    pub fn output(&self) -> Var {
        *self.layers.last().expect("encoder state always has the embedding layer")
    }
}

/// Per-layer decoder representations `R^D_0 … R^D_M` plus the sublayer
/// states of every layer.
pub struct DecoderState {
    pub layers: Vec<Var>,
    pub self_states: Vec<Var>,
    pub cross_states: Vec<Var>,
    pub self_attention: Vec<Var>,
    pub cross_attention: Vec<Var>,
    pub layout: SeqLayout,
}

impl DecoderState {
    pub fn output(&self) -> Var {
        *self.layers.last().expect("decoder state always has the embedding layer")
    }
}

/// Called with `(session, layer index, layer state, layout)` after each
/// layer; the returned value replaces the state.
pub type LayerHook<'h> = dyn FnMut(&mut Session, usize, Var, &SeqLayout) -> Result<Var> + 'h;

#[derive(Clone, Debug)]
pub struct Transformer {
    pub config: ModelConfig,
    pub src_embed: ParamId,
    pub tgt_embed: ParamId,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub output: Linear,
}

impl Transformer {
    pub fn build(src: &mut dyn ParamSource, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let emb_std = (d as f64).powf(-0.5);
        let src_embed = src.param("src_embed", &[config.src_vocab, d], Init::Normal(emb_std))?;
        let tgt_embed = src.param("tgt_embed", &[config.tgt_vocab, d], Init::Normal(emb_std))?;
        let encoder = (0..config.enc_depth)
            .map(|n| EncoderLayer::build(src, &format!("encoder.{n}"), d, config.n_heads, config.d_ff))
            .collect::<Result<_>>()?;
        let decoder = (0..config.dec_depth)
            .map(|n| DecoderLayer::build(src, &format!("decoder.{n}"), d, config.n_heads, config.d_ff))
            .collect::<Result<_>>()?;
        let output = Linear::build(src, "output", d, config.tgt_vocab)?;
        Ok(Transformer { config: config.clone(), src_embed, tgt_embed, encoder, decoder, output })
    }

    pub fn init(store: &mut ParamStore, config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::build(&mut Initializer { store, rng }, config)
    }

    pub fn bind(store: &ParamStore, config: &ModelConfig) -> Result<Self> {
        Self::build(&mut Binder { store }, config)
    }

    fn check_lengths(&self, tokens: &TokenBatch) -> Result<()> {
        for len in tokens.layout.lengths() {
            if len == 0 {
                return Err(AptError::LengthMismatch("empty sequence".into()));
            }
            if len > self.config.max_len {
                return Err(AptError::LengthOverflow { len, max: self.config.max_len });
            }
        }
        Ok(())
    }

    pub fn embed(&self, s: &mut Session, tokens: &TokenBatch, side: Side) -> Result<Var> {
        let (table, vocab) = match side {
            Side::Source => (self.src_embed, self.config.src_vocab),
            Side::Target => (self.tgt_embed, self.config.tgt_vocab),
        };
        embed_batch(s, table, tokens, vocab, side.name())
    }

    pub fn encode(&self, s: &mut Session, src: &TokenBatch) -> Result<EncoderState> {
        self.encode_with(s, src, &mut |_, _, x, _| Ok(x))
    }

    pub fn encode_with(&self, s: &mut Session, src: &TokenBatch, hook: &mut LayerHook) -> Result<EncoderState> {
        self.check_lengths(src)?;
        let layout = &src.layout;
        let x = self.embed(s, src, Side::Source)?;
        let x = s.dropout(x)?;
        let mut x = hook(s, 0, x, layout)?;
        let mut layers = vec![x];
        let mut attention = Vec::with_capacity(self.encoder.len());
        for (n, layer) in self.encoder.iter().enumerate() {
            let out = layer.forward(s, x, layout, false)?;
            x = hook(s, n + 1, out.output, layout)?;
            layers.push(x);
            attention.push(out.attention);
        }
        Ok(EncoderState { layers, layout: layout.clone(), attention })
    }

    /// Decoder over `tgt_in` (which starts with BOS); returns next-token
    /// logits `[batch * len, V_t]`.
    pub fn decode(&self, s: &mut Session, tgt_in: &TokenBatch, enc: &EncoderState) -> Result<(Var, DecoderState)> {
        self.decode_with(s, tgt_in, enc, &mut |_, _, x, _| Ok(x))
    }

    pub fn decode_with(
        &self,
        s: &mut Session,
        tgt_in: &TokenBatch,
        enc: &EncoderState,
        hook: &mut LayerHook,
    ) -> Result<(Var, DecoderState)> {
        self.check_lengths(tgt_in)?;
        if tgt_in.layout.batch != enc.layout.batch {
            return Err(AptError::LengthMismatch(format!(
                "decoder batch {} vs encoder batch {}",
                tgt_in.layout.batch, enc.layout.batch
            )));
        }
        let layout = &tgt_in.layout;
        let memory = enc.output();
        let x = self.embed(s, tgt_in, Side::Target)?;
        let x = s.dropout(x)?;
        let mut x = hook(s, 0, x, layout)?;
        let mut state = DecoderState {
            layers: vec![x],
            self_states: Vec::new(),
            cross_states: Vec::new(),
            self_attention: Vec::new(),
            cross_attention: Vec::new(),
            layout: layout.clone(),
        };
        for (n, layer) in self.decoder.iter().enumerate() {
            let out = layer.forward(s, x, layout, memory, &enc.layout)?;
            x = hook(s, n + 1, out.output, layout)?;
            state.layers.push(x);
            state.self_states.push(out.self_state);
            state.cross_states.push(out.cross_state);
            state.self_attention.push(out.self_attention);
            state.cross_attention.push(out.cross_attention);
        }
        let logits = self.output.forward(s, x)?;
        Ok((logits, state))
    }
}

/// Label-smoothed target matrix: `(1 − ε)` on the reference plus `ε / V`
/// spread uniformly. Rows for padded positions are zero.
pub fn smoothed_targets(targets: &[usize], mask: &[bool], vocab: usize, eps: f64, dtype: Dtype) -> Result<Tensor> {
    let mut data = vec![0.0; targets.len() * vocab];
    for (r, (&t, &on)) in targets.iter().zip(mask).enumerate() {
        if !on {
            continue;
        }
        if t >= vocab {
            return Err(AptError::OutOfVocab { side: "target", id: t, size: vocab });
        }
        let row = &mut data[r * vocab..(r + 1) * vocab];
        row.iter_mut().for_each(|q| *q = eps / vocab as f64);
        row[t] += 1.0 - eps;
    }
    Ok(Tensor::from_raw(vec![targets.len(), vocab], data, dtype))
}

/// Token-mean label-smoothed negative log-likelihood over real positions.
pub fn translation_loss(
    graph: &mut Graph,
    logits: Var,
    targets: &[usize],
    layout: &SeqLayout,
    label_smoothing: f64,
) -> Result<Var> {
    let shape = graph.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() || targets.len() != layout.rows() {
        return Err(AptError::LengthMismatch(format!(
            "logits {shape:?} vs {} targets for {} positions",
            targets.len(),
            layout.rows()
        )));
    }
    let q = smoothed_targets(targets, &layout.mask, shape[1], label_smoothing, graph.dtype())?;
    graph.soft_cross_entropy(logits, &q, &layout.mask)
}

/// Decoder input (`BOS y_1 … y_n`) and shifted targets (`y_1 … y_n EOS`).
pub fn teacher_forcing_pair(y: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut input = Vec::with_capacity(y.len() + 1);
    input.push(BOS);
    input.extend_from_slice(y);
    let mut target = y.to_vec();
    target.push(EOS);
    (input, target)
}

/// Flattens per-sentence targets into the padded `[batch * len]` layout.
pub fn pad_targets(targets: &[Vec<usize>], len: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(targets.len() * len);
    for t in targets {
        out.extend_from_slice(t);
        out.extend(std::iter::repeat(PAD).take(len - t.len()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            enc_depth: 2,
            dec_depth: 2,
            d_ff: 16,
            src_vocab: 12,
            tgt_vocab: 11,
            dropout: 0.0,
            label_smoothing: 0.0,
            max_len: 10,
        }
    }

    fn model(config: &ModelConfig, seed: u64) -> (ParamStore, Transformer) {
        let mut store = ParamStore::new(Dtype::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Transformer::init(&mut store, config, &mut rng).unwrap();
        (store, m)
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig { n_heads: 3, ..ModelConfig::default() };
        assert!(matches!(bad.validate(), Err(AptError::Config(_))));
        let bad = ModelConfig { dropout: 1.0, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { enc_depth: 0, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn embed_empty_and_positional_distinctness() {
        let config = tiny_config();
        let (store, m) = model(&config, 1);
        let mut s = Session::inference(&store);
        let e = m.embed(&mut s, &TokenBatch::single(&[]), Side::Source).unwrap();
        assert_eq!(s.graph.shape(e), &[0, 8]);

        let e = m.embed(&mut s, &TokenBatch::single(&[7, 7]), Side::Source).unwrap();
        let v = s.graph.value(e);
        assert_ne!(v.row(0), v.row(1));
    }

    #[test]
    fn embed_matches_closed_form() {
        let config = tiny_config();
        let (store, m) = model(&config, 2);
        let mut s = Session::inference(&store);
        let tokens = [5, 9, 3];
        let e = m.embed(&mut s, &TokenBatch::single(&tokens), Side::Target).unwrap();
        let table = store.by_name("tgt_embed").unwrap();
        let d = 8;
        for (pos, &tok) in tokens.iter().enumerate() {
            for i in 0..d / 2 {
                let angle = pos as f64 / 10000f64.powf((2 * i) as f64 / d as f64);
                let even = table.at(tok, 2 * i) * (d as f64).sqrt() + angle.sin();
                let odd = table.at(tok, 2 * i + 1) * (d as f64).sqrt() + angle.cos();
                assert!((s.graph.value(e).at(pos, 2 * i) - even).abs() <= 1e-6);
                assert!((s.graph.value(e).at(pos, 2 * i + 1) - odd).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn embed_rejects_out_of_vocab() {
        let config = tiny_config();
        let (store, m) = model(&config, 3);
        let mut s = Session::inference(&store);
        let err = m.embed(&mut s, &TokenBatch::single(&[12]), Side::Source).unwrap_err();
        assert!(matches!(err, AptError::OutOfVocab { id: 12, size: 12, .. }));
    }

    #[test]
    fn encode_single_token_attends_to_itself() {
        let config = tiny_config();
        let (store, m) = model(&config, 4);
        let mut s = Session::inference(&store);
        let enc = m.encode(&mut s, &TokenBatch::single(&[6])).unwrap();
        assert_eq!(enc.layers.len(), config.enc_depth + 1);
        for &a in &enc.attention {
            assert!(s.graph.attention_probs(a).unwrap().iter().all(|&p| p == 1.0));
        }
    }

    #[test]
    fn encode_masks_padding_and_rejects_overflow() {
        let config = tiny_config();
        let (store, m) = model(&config, 5);
        let mut s = Session::inference(&store);
        let batch = TokenBatch::from_seqs(&[vec![5, 6, 7], vec![8]]);
        let enc = m.encode(&mut s, &batch).unwrap();
        for &a in &enc.attention {
            let p = s.graph.attention_probs(a).unwrap();
            let (h, t) = (2, 3);
            for hd in 0..h {
                for i in 0..t {
                    for j in 1..t {
                        assert!(p[((h + hd) * t + i) * t + j] <= 1e-9);
                    }
                }
            }
            for row in p.chunks(t) {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() <= 1e-6);
            }
        }
        let long = vec![5; 11];
        assert!(matches!(
            m.encode(&mut s, &TokenBatch::single(&long)),
            Err(AptError::LengthOverflow { len: 11, max: 10 })
        ));
    }

    #[test]
    fn decode_is_causal() {
        let config = tiny_config();
        let (store, m) = model(&config, 6);
        let run = |y: &[usize]| {
            let mut s = Session::inference(&store);
            let enc = m.encode(&mut s, &TokenBatch::single(&[5, 6, 7, 8])).unwrap();
            let (logits, _) = m.decode(&mut s, &TokenBatch::single(y), &enc).unwrap();
            s.graph.value(logits).clone()
        };
        let a = run(&[BOS, 5, 6, 7, 8]);
        let b = run(&[BOS, 5, 6, 9, 10]);
        for pos in 0..3 {
            assert_eq!(a.row(pos), b.row(pos));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn decode_ignores_source_when_cross_values_are_zero() {
        let config = tiny_config();
        let (mut store, m) = model(&config, 7);
        for layer in &m.decoder {
            for id in [layer.cross_attn.value.w, layer.cross_attn.value.b] {
                let shape = store.get(id).shape().to_vec();
                store.set(id, Tensor::zeros(&shape, Dtype::F64)).unwrap();
            }
        }
        let run = |x: &[usize]| {
            let mut s = Session::inference(&store);
            let enc = m.encode(&mut s, &TokenBatch::single(x)).unwrap();
            let (logits, _) = m.decode(&mut s, &TokenBatch::single(&[BOS, 6, 7]), &enc).unwrap();
            s.graph.value(logits).clone()
        };
        assert_eq!(run(&[5, 6, 7]), run(&[9, 9, 10, 11, 5]));
    }

    #[test]
    fn translation_loss_reference_cases() {
        let mut g = Graph::new(Dtype::F64);
        // Probability one on every reference token.
        let mut logits = Tensor::from_fn(&[2, 4], Dtype::F64, |_| -800.0);
        logits.data_mut()[1] = 800.0;
        logits.data_mut()[4 + 3] = 800.0;
        let lv = g.constant(logits);
        let layout = SeqLayout::dense(1, 2);
        let loss = translation_loss(&mut g, lv, &[1, 3], &layout, 0.0).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);

        let uniform = g.constant(Tensor::zeros(&[3, 8], Dtype::F64));
        let layout = SeqLayout::dense(1, 3);
        let loss = translation_loss(&mut g, uniform, &[0, 5, 7], &layout, 0.0).unwrap();
        assert!((g.value(loss).item() - 8f64.ln()).abs() <= 1e-12);

        let bad = translation_loss(&mut g, uniform, &[0, 5], &layout, 0.0);
        assert!(matches!(bad, Err(AptError::LengthMismatch(_))));
    }

    #[test]
    fn smoothed_loss_matches_direct_summation() {
        let v = 8;
        let rows = [
            [0.3, -1.2, 2.0, 0.0, 0.7, -0.4, 1.1, 0.2],
            [-0.5, 0.9, 0.1, 1.6, -2.2, 0.3, 0.0, 0.8],
        ];
        let targets = [2usize, 3];
        let eps = 0.1;
        let mut expected = 0.0;
        for (row, &t) in rows.iter().zip(&targets) {
            let z: f64 = row.iter().map(|x: &f64| x.exp()).sum();
            for k in 0..v {
                let q = if k == t { 1.0 - eps + eps / v as f64 } else { eps / v as f64 };
                expected -= q * (row[k].exp() / z).ln();
            }
        }
        expected /= 2.0;
        let mut g = Graph::new(Dtype::F64);
        let logits = g.constant(Tensor::matrix(&rows.map(|r| r.to_vec()), Dtype::F64).unwrap());
        let loss = translation_loss(&mut g, logits, &targets, &SeqLayout::dense(1, 2), eps).unwrap();
        assert!((g.value(loss).item() - expected).abs() <= 1e-7);
    }

    #[test]
    fn attention_rows_normalized_for_batches() {
        let config = tiny_config();
        let (store, m) = model(&config, 8);
        let mut s = Session::inference(&store);
        let src = TokenBatch::from_seqs(&[vec![5, 6, 7, 8], vec![9, 10]]);
        let tgt = TokenBatch::from_seqs(&[vec![BOS, 5], vec![BOS, 6, 7]]);
        let enc = m.encode(&mut s, &src).unwrap();
        let (_, dec) = m.decode(&mut s, &tgt, &enc).unwrap();
        let all: Vec<Var> = enc.attention.iter().chain(&dec.self_attention).chain(&dec.cross_attention).copied().collect();
        for a in all {
            let spec = s.graph.attention_spec(a).unwrap().clone();
            let p = s.graph.attention_probs(a).unwrap();
            for (r, row) in p.chunks(spec.key.len).enumerate() {
                let b = r / (spec.heads * spec.query.len);
                let i = r % spec.query.len;
                if !spec.query.mask[b * spec.query.len + i] {
                    continue;
                }
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let config = ModelConfig { dropout: 0.3, ..tiny_config() };
        let (store, m) = model(&config, 9);
        let run = |seed| {
            let mut s = Session::training(&store, 0.3, seed);
            let enc = m.encode(&mut s, &TokenBatch::single(&[5, 6, 7])).unwrap();
            s.graph.value(enc.output()).clone()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }
}
