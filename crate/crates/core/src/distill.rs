//! Word- and sentence-level distillation losses and the joint objective.
//! Every term is a minimized quantity.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{AptError, Result};
use crate::model::EncoderState;
use crate::tensor::Tensor;

const ROW_SUM_TOLERANCE: f64 = 1e-4;

/// Cross-entropy `H(teacher, student)` averaged over active rows.
pub fn word_distill_loss(graph: &mut Graph, student_logits: Var, teacher: &Tensor, rows: &[bool]) -> Result<Var> {
    let shape = graph.shape(student_logits).to_vec();
    if teacher.shape() != shape.as_slice() || rows.len() != shape.first().copied().unwrap_or(0) {
        return Err(AptError::shape(
            "word_distill_loss",
            format!("student {shape:?}, teacher {:?}, {} row flags", teacher.shape(), rows.len()),
        ));
    }
    for (r, _) in rows.iter().enumerate().filter(|(_, &on)| on) {
        let row = teacher.row(r);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE || row.iter().any(|&p| p < 0.0) {
            return Err(AptError::NotNormalized { row: r, sum });
        }
    }
    graph.soft_cross_entropy(student_logits, teacher, rows)
}

/// Mean over active rows of `‖student_j − teacher_j‖²`; the teacher side is
/// a constant.
pub fn sent_distill_loss(graph: &mut Graph, student: Var, teacher: &Tensor, rows: &[bool]) -> Result<Var> {
    let shape = graph.shape(student).to_vec();
    if shape.len() != 2 || teacher.shape().len() != 2 {
        return Err(AptError::shape("sent_distill_loss", format!("student {shape:?}, teacher {:?}", teacher.shape())));
    }
    if shape[1] != teacher.shape()[1] {
        return Err(AptError::DimensionMismatch { student: shape[1], teacher: teacher.shape()[1] });
    }
    if shape[0] != teacher.shape()[0] || rows.len() != shape[0] {
        return Err(AptError::Misaligned(format!(
            "{} student rows, {} teacher rows, {} row flags",
            shape[0],
            teacher.shape()[0],
            rows.len()
        )));
    }
    graph.row_sq_dist(student, teacher, rows)
}

/// Sentence-level distillation averaged over several student layers, each
/// matched to the teacher's top layer.
pub fn layered_sent_distill(graph: &mut Graph, layers: &[Var], teacher_top: &Tensor, rows: &[bool]) -> Result<Var> {
    if layers.is_empty() {
        return Err(AptError::Config("sentence distillation needs at least one student layer".into()));
    }
    let mut total: Option<Var> = None;
    for &l in layers {
        let term = sent_distill_loss(graph, l, teacher_top, rows)?;
        total = Some(match total {
            None => term,
            Some(t) => graph.add(t, term)?,
        });
    }
    let total = total.expect("non-empty");
    graph.scale(total, 1.0 / layers.len() as f64)
}

/// Sentence-level distillation between the encoder output and the
/// source-side teacher's top layer.
pub fn encoder_sent_distill(graph: &mut Graph, enc: &EncoderState, teacher_top: &Tensor) -> Result<Var> {
    sent_distill_loss(graph, enc.output(), teacher_top, &enc.layout.mask)
}

/// Scalar loss components of one step. Inactive terms are zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_t: f64,
    pub l_s: f64,
    pub l_w: f64,
    pub eta: f64,
    pub beta: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn new(l_t: f64, l_s: f64, l_w: f64, eta: f64, beta: f64) -> Result<Self> {
        for (name, v) in [("l_t", l_t), ("l_s", l_s), ("l_w", l_w), ("eta", eta), ("beta", beta)] {
            if !v.is_finite() {
                return Err(AptError::NonFinite { op: name });
            }
        }
        if eta < 0.0 || beta < 0.0 {
            return Err(AptError::Config(format!("loss weights must be non-negative (eta {eta}, beta {beta})")));
        }
        Ok(LossBundle { l_t, l_s, l_w, eta, beta, total: l_t + eta * l_s + beta * l_w })
    }
}

/// `total = l_t + η·l_s + β·l_w` as a graph node, with the scalar bundle.
pub fn joint_loss(
    graph: &mut Graph,
    l_t: Var,
    l_s: Option<Var>,
    l_w: Option<Var>,
    eta: f64,
    beta: f64,
) -> Result<(Var, LossBundle)> {
    let value = |g: &Graph, v: Option<Var>| v.map(|v| g.value(v).item()).unwrap_or(0.0);
    let bundle = LossBundle::new(graph.value(l_t).item(), value(graph, l_s), value(graph, l_w), eta, beta)?;
    let mut total = l_t;
    for (term, weight) in [(l_s, eta), (l_w, beta)] {
        if let Some(t) = term {
            let scaled = graph.scale(t, weight)?;
            total = graph.add(total, scaled)?;
        }
    }
    Ok((total, bundle))
}
