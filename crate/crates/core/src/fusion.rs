//! Dynamic fusion of frozen teacher layers into student layers: per-layer
//! adapters, attention over the adapted layers, and a per-position gate.

use serde::{Deserialize, Serialize};

use crate::autograd::{SeqLayout, Var};
use crate::error::{AptError, Result};
use crate::model::{DecoderState, EncoderState, Linear, Session, TokenBatch, Transformer};
use crate::params::{Init, ParamSource};
use crate::tensor::Tensor;

/// How the gate value is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    Learned,
    /// Every position uses this gate value; 1 is the "no gating" ablation.
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionOptions {
    /// Replace the learned layer weights with a uniform mean.
    pub no_layer_attention: bool,
    pub gate: GateMode,
}

impl Default for FusionOptions {
    fn default() -> Self {
        FusionOptions { no_layer_attention: false, gate: GateMode::Learned }
    }
}

/// Two-layer ReLU MLP from teacher width to student width.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub inner: Linear,
    pub outer: Linear,
}

impl Adapter {
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.inner.forward(s, x)?;
        let h = s.graph.relu(h)?;
        self.outer.forward(s, h)
    }
}

#[derive(Clone, Debug)]
pub struct FusionBank {
    pub adapters: Vec<Adapter>,
    pub layer_scorer: Linear,
    pub gate_scorer: Linear,
    /// Student layer indices (0 = embedding) where fusion applies.
    pub attachment: Vec<usize>,
    pub d_teacher: usize,
    pub d_model: usize,
}

/// Values recorded at one attached student layer.
#[derive(Clone, Copy, Debug)]
pub struct FusionStep {
    pub layer: usize,
    /// `[batch, L]`.
    pub alpha: Var,
    pub composite: Var,
    /// `[batch * len, 1]`.
    pub gates: Var,
    pub fused: Var,
}

#[derive(Clone, Debug, Default)]
pub struct FusionTrace {
    pub steps: Vec<FusionStep>,
}

impl FusionBank {
    /// Adapter output layers start at zero, so a fresh bank adds nothing.
    pub fn build(
        src: &mut dyn ParamSource,
        prefix: &str,
        teacher_layers: usize,
        d_teacher: usize,
        d_model: usize,
        attachment: &[usize],
    ) -> Result<Self> {
        let adapters = (0..teacher_layers)
            .map(|l| {
                Ok(Adapter {
                    inner: Linear::build(src, &format!("{prefix}.adapters.{l}.inner"), d_teacher, d_model)?,
                    outer: Linear::build_init(src, &format!("{prefix}.adapters.{l}.outer"), d_model, d_model, Init::Zeros)?,
                })
            })
            .collect::<Result<_>>()?;
        let mut attachment = attachment.to_vec();
        attachment.sort_unstable();
        attachment.dedup();
        Ok(FusionBank {
            adapters,
            layer_scorer: Linear::build(src, &format!("{prefix}.layer_scorer"), d_model, 1)?,
            gate_scorer: Linear::build(src, &format!("{prefix}.gate_scorer"), d_model, 1)?,
            attachment,
            d_teacher,
            d_model,
        })
    }

    pub fn attached(&self, layer: usize) -> bool {
        self.attachment.binary_search(&layer).is_ok()
    }

    /// `R^T_l = G_l(R^P_l)` for every teacher layer.
    pub fn adapt(&self, s: &mut Session, teacher: &[Var]) -> Result<Vec<Var>> {
        if teacher.len() != self.adapters.len() {
            return Err(AptError::LayerCount { expected: self.adapters.len(), found: teacher.len() });
        }
        teacher.iter().zip(&self.adapters).map(|(&r, g)| g.forward(s, r)).collect()
    }

    /// Weights the adapted layers by a softmax over scores of
    /// `mean(R^T_l) ⊙ mean(R^E_n)`; returns `(C^T_n, α)`.
    pub fn layer_attention(
        &self,
        s: &mut Session,
        adapted: &[Var],
        student: Var,
        layout: &SeqLayout,
        uniform: bool,
    ) -> Result<(Var, Var)> {
        if adapted.is_empty() {
            return Err(AptError::LayerCount { expected: self.adapters.len(), found: 0 });
        }
        let shape = s.graph.shape(student).to_vec();
        for &a in adapted {
            if s.graph.shape(a) != shape.as_slice() {
                return Err(AptError::shape("layer_attention", format!("{:?} vs student {shape:?}", s.graph.shape(a))));
            }
        }
        let l = adapted.len();
        let alpha = if uniform {
            let t = Tensor::from_fn(&[layout.batch, l], s.graph.dtype(), |_| 1.0 / l as f64);
            s.graph.constant(t)
        } else {
            let student_mean = s.graph.masked_mean_rows(student, layout)?;
            let mut scores = Vec::with_capacity(l);
            for &a in adapted {
                let m = s.graph.masked_mean_rows(a, layout)?;
                let prod = s.graph.mul(m, student_mean)?;
                scores.push(self.layer_scorer.forward(s, prod)?);
            }
            let e = s.graph.concat_cols(&scores)?;
            s.graph.softmax(e, 1)?
        };
        let composite = s.graph.layer_mix(alpha, adapted, layout.len)?;
        Ok((composite, alpha))
    }

    /// `r̄ = r + γ·c` with `γ = σ(gate_scorer(r ⊙ c))` per position;
    /// returns `(r̄, γ)`.
    pub fn gate_fuse(&self, s: &mut Session, student: Var, composite: Var, gate: GateMode) -> Result<(Var, Var)> {
        if s.graph.shape(student) != s.graph.shape(composite) {
            return Err(AptError::shape(
                "gate_fuse",
                format!("{:?} vs {:?}", s.graph.shape(student), s.graph.shape(composite)),
            ));
        }
        let rows = s.graph.shape(student)[0];
        let gamma = match gate {
            GateMode::Learned => {
                let prod = s.graph.mul(student, composite)?;
                let score = self.gate_scorer.forward(s, prod)?;
                s.graph.sigmoid(score)?
            }
            GateMode::Fixed(g) => {
                let t = Tensor::from_fn(&[rows, 1], s.graph.dtype(), |_| g);
                s.graph.constant(t)
            }
        };
        let scaled = s.graph.mul_col(composite, gamma)?;
        let fused = s.graph.add(student, scaled)?;
        Ok((fused, gamma))
    }

    fn fuse_layer(
        &self,
        s: &mut Session,
        layer: usize,
        adapted: &[Var],
        student: Var,
        layout: &SeqLayout,
        opts: FusionOptions,
        trace: &mut FusionTrace,
    ) -> Result<Var> {
        let (composite, alpha) = self.layer_attention(s, adapted, student, layout, opts.no_layer_attention)?;
        let (fused, gates) = self.gate_fuse(s, student, composite, opts.gate)?;
        trace.steps.push(FusionStep { layer, alpha, composite, gates, fused });
        Ok(fused)
    }

    fn check_attachment(&self, depth: usize) -> Result<()> {
        match self.attachment.iter().find(|&&l| l > depth) {
            Some(l) => Err(AptError::Config(format!("fusion attached to layer {l} of a {depth}-layer stack"))),
            None => Ok(()),
        }
    }
}

/// Places frozen teacher layers into the graph as constants, checking that
/// they line up row-for-row with the student tokens.
pub fn teacher_constants(s: &mut Session, teacher: &[Tensor], layout: &SeqLayout) -> Result<Vec<Var>> {
    teacher
        .iter()
        .map(|t| {
            if t.shape().len() != 2 || t.shape()[0] != layout.rows() {
                return Err(AptError::Misaligned(format!(
                    "teacher layer {:?} for {} student positions",
                    t.shape(),
                    layout.rows()
                )));
            }
            Ok(s.graph.constant(t.clone()))
        })
        .collect()
}

/// Encoder pass where every attached layer's output is replaced by its
/// fusion with the adapted teacher layers.
pub fn fused_encode(
    model: &Transformer,
    s: &mut Session,
    src: &TokenBatch,
    teacher: &[Tensor],
    bank: &FusionBank,
    opts: FusionOptions,
) -> Result<(EncoderState, FusionTrace)> {
    bank.check_attachment(model.config.enc_depth)?;
    let mut trace = FusionTrace::default();
    if bank.attachment.is_empty() {
        return Ok((model.encode(s, src)?, trace));
    }
    let consts = teacher_constants(s, teacher, &src.layout)?;
    let adapted = bank.adapt(s, &consts)?;
    let enc = model.encode_with(s, src, &mut |s, n, x, layout| {
        if bank.attached(n) {
            bank.fuse_layer(s, n, &adapted, x, layout, opts, &mut trace)
        } else {
            Ok(x)
        }
    })?;
    Ok((enc, trace))
}

/// Decoder counterpart of [`fused_encode`]. Sequence means run over the
/// whole target input, so in training a position's fusion weights see
/// later gold tokens.
pub fn fused_decode(
    model: &Transformer,
    s: &mut Session,
    tgt_in: &TokenBatch,
    enc: &EncoderState,
    teacher: &[Tensor],
    bank: &FusionBank,
    opts: FusionOptions,
) -> Result<(Var, DecoderState, FusionTrace)> {
    bank.check_attachment(model.config.dec_depth)?;
    let mut trace = FusionTrace::default();
    if bank.attachment.is_empty() {
        let (logits, dec) = model.decode(s, tgt_in, enc)?;
        return Ok((logits, dec, trace));
    }
    let consts = teacher_constants(s, teacher, &tgt_in.layout)?;
    let adapted = bank.adapt(s, &consts)?;
    let (logits, dec) = model.decode_with(s, tgt_in, enc, &mut |s, n, x, layout| {
        if bank.attached(n) {
            bank.fuse_layer(s, n, &adapted, x, layout, opts, &mut trace)
        } else {
            Ok(x)
        }
    })?;
    Ok((logits, dec, trace))
}
