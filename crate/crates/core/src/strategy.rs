//! Integration plans: which APT components attach to which side of the
//! student, against which teachers, and the per-batch loss they produce.

use std::fmt;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::data::Batch;
use crate::distill::{encoder_sent_distill, joint_loss, layered_sent_distill, word_distill_loss, LossBundle};
use crate::error::{AptError, Result};
use crate::fusion::{fused_decode, fused_encode, FusionBank, FusionOptions, FusionTrace, GateMode};
use crate::model::{translation_loss, DecoderState, EncoderState, ModelConfig, Session, TokenBatch, Transformer};
use crate::params::{Binder, Initializer, ParamSource, ParamStore};
use crate::pretrain::{teacher_distribution, teacher_representations, DistributionMode, PretrainedModel, TeacherKind};
use crate::tensor::Tensor;

/// Marker carried by the warning attached to decoder-side fusion plans.
pub const DECODER_FUSION_CAVEAT: &str = "decoder-fusion-caveat";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Baseline,
    Finetune,
    Apt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanSide {
    None,
    Encoder,
    Decoder,
    Both,
}

impl PlanSide {
    pub fn encoder(self) -> bool {
        matches!(self, PlanSide::Encoder | PlanSide::Both)
    }

    pub fn decoder(self) -> bool {
        matches!(self, PlanSide::Decoder | PlanSide::Both)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherChoice {
    Causal,
    Masked,
    None,
}

impl TeacherChoice {
    fn kind(self) -> Option<TeacherKind> {
        match self {
            TeacherChoice::Causal => Some(TeacherKind::Causal),
            TeacherChoice::Masked => Some(TeacherKind::Masked),
            TeacherChoice::None => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NamedLayers {
    Embedding,
    /// Every layer except the embedding and the output.
    Middle,
    Output,
    All,
}

/// Student layer set; 0 is the embedding and `depth` the output layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayerSelector {
    Named(NamedLayers),
    Explicit(Vec<usize>),
}

impl LayerSelector {
    pub fn resolve(&self, depth: usize) -> Vec<usize> {
        match self {
            LayerSelector::Named(NamedLayers::Embedding) => vec![0],
            LayerSelector::Named(NamedLayers::Middle) => (1..depth).collect(),
            LayerSelector::Named(NamedLayers::Output) => vec![depth],
            LayerSelector::Named(NamedLayers::All) => (0..=depth).collect(),
            LayerSelector::Explicit(v) => {
                let mut v = v.clone();
                v.sort_unstable();
                v.dedup();
                v
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    pub no_gating: bool,
    pub no_layer_attention: bool,
    pub no_word_distill: bool,
    pub no_sent_distill: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegrationPlan {
    pub mode: Mode,
    pub fusion_side: PlanSide,
    pub distill_side: PlanSide,
    pub fusion_layers: LayerSelector,
    pub distill_layers: LayerSelector,
    pub encoder_teacher: TeacherChoice,
    pub decoder_teacher: TeacherChoice,
    pub ablations: Ablations,
    pub eta: f64,
    pub beta: f64,
}

/// Fusion into the encoder from a masked source teacher, distillation into
/// the decoder from a causal target teacher.
impl Default for IntegrationPlan {
    fn default() -> Self {
        IntegrationPlan {
            mode: Mode::Apt,
            fusion_side: PlanSide::Encoder,
            distill_side: PlanSide::Decoder,
            fusion_layers: LayerSelector::Named(NamedLayers::All),
            distill_layers: LayerSelector::Named(NamedLayers::Output),
            encoder_teacher: TeacherChoice::Masked,
            decoder_teacher: TeacherChoice::Causal,
            ablations: Ablations::default(),
            eta: 0.5,
            beta: 0.5,
        }
    }
}

impl IntegrationPlan {
    pub fn baseline() -> Self {
        IntegrationPlan {
            mode: Mode::Baseline,
            fusion_side: PlanSide::None,
            distill_side: PlanSide::None,
            encoder_teacher: TeacherChoice::None,
            decoder_teacher: TeacherChoice::None,
            ..Self::default()
        }
    }

    pub fn finetune(encoder: TeacherChoice, decoder: TeacherChoice) -> Self {
        IntegrationPlan {
            mode: Mode::Finetune,
            fusion_side: PlanSide::None,
            distill_side: PlanSide::None,
            encoder_teacher: encoder,
            decoder_teacher: decoder,
            ..Self::default()
        }
    }

    fn fusion(&self, encoder: bool) -> bool {
        self.mode != Mode::Baseline && if encoder { self.fusion_side.encoder() } else { self.fusion_side.decoder() }
    }

    fn distill(&self, encoder: bool) -> bool {
        self.mode != Mode::Baseline && if encoder { self.distill_side.encoder() } else { self.distill_side.decoder() }
    }

    fn encoder_sent(&self) -> bool {
        self.distill(true) && !self.ablations.no_sent_distill
    }

    fn decoder_sent(&self) -> bool {
        self.distill(false) && !self.ablations.no_sent_distill
    }

    fn decoder_word(&self) -> bool {
        self.distill(false) && !self.ablations.no_word_distill
    }

    pub fn needs_encoder_teacher(&self) -> bool {
        self.fusion(true) || self.distill(true) || (self.mode == Mode::Finetune && self.encoder_teacher != TeacherChoice::None)
    }

    pub fn needs_decoder_teacher(&self) -> bool {
        self.fusion(false) || self.distill(false) || (self.mode == Mode::Finetune && self.decoder_teacher != TeacherChoice::None)
    }

    /// Names of the loss terms this plan produces.
    pub fn active_losses(&self) -> Vec<&'static str> {
        let mut out = vec!["l_t"];
        if self.encoder_sent() || self.decoder_sent() {
            out.push("l_s");
        }
        if self.decoder_word() {
            out.push("l_w");
        }
        out
    }

    pub fn fusion_options(&self) -> FusionOptions {
        FusionOptions {
            no_layer_attention: self.ablations.no_layer_attention,
            gate: if self.ablations.no_gating { GateMode::Fixed(1.0) } else { GateMode::Learned },
        }
    }
}

/// Frozen teachers available to a run; position decides the side.
#[derive(Clone, Copy, Debug, Default)]
pub struct Teachers<'a> {
    pub encoder: Option<&'a PretrainedModel>,
    pub decoder: Option<&'a PretrainedModel>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanViolation {
    pub field: String,
    pub message: String,
}

impl fmt::Display for PlanViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attachment {
    /// `fusion`, `sent_distill`, `word_distill` or `finetune`.
    pub component: String,
    pub side: String,
    pub layers: Vec<usize>,
    pub teacher: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    pub mode: Mode,
    pub attachments: Vec<Attachment>,
    pub added_parameters: usize,
    pub active_losses: Vec<String>,
    pub warnings: Vec<String>,
}

fn fusion_bank_scalars(teacher_layers: usize, d_teacher: usize, d: usize) -> usize {
    teacher_layers * (d_teacher * d + d + d * d + d) + 2 * (d + 1)
}

struct Checker<'p> {
    plan: &'p IntegrationPlan,
    config: &'p ModelConfig,
    violations: Vec<PlanViolation>,
}

impl Checker<'_> {
    fn violate(&mut self, field: &str, message: impl Into<String>) {
        self.violations.push(PlanViolation { field: field.into(), message: message.into() });
    }

    /// Checks the teacher for one side and returns it when usable.
    fn teacher<'t>(&mut self, encoder: bool, provided: Option<&'t PretrainedModel>) -> Option<&'t PretrainedModel> {
        let (field, choice, vocab, language) = if encoder {
            ("encoder_teacher", self.plan.encoder_teacher, self.config.src_vocab, "src")
        } else {
            ("decoder_teacher", self.plan.decoder_teacher, self.config.tgt_vocab, "tgt")
        };
        let Some(kind) = choice.kind() else {
            self.violate(field, "plan uses this side's teacher but names none");
            return None;
        };
        let Some(t) = provided else {
            self.violate(field, format!("{} teacher required but not loaded", kind.name()));
            return None;
        };
        let before = self.violations.len();
        if t.kind() != kind {
            self.violate(field, format!("plan names a {} teacher, loaded one is {}", kind.name(), t.kind().name()));
        }
        if t.config().vocab != vocab {
            self.violate(field, format!("teacher vocabulary {} does not match the side vocabulary {vocab}", t.config().vocab));
        }
        if t.config().language != language {
            self.violate(field, format!("teacher language `{}` does not match side language `{language}`", t.config().language));
        }
        if t.config().max_len < self.config.max_len {
            self.violate(field, format!("teacher max_len {} is below the student max_len {}", t.config().max_len, self.config.max_len));
        }
        (self.violations.len() == before).then_some(t)
    }

    fn selector(&mut self, field: &str, sel: &LayerSelector, depth: usize) {
        if let LayerSelector::Explicit(v) = sel {
            if v.is_empty() {
                self.violate(field, "explicit layer list is empty");
            }
            if let Some(l) = v.iter().find(|&&l| l > depth) {
                self.violate(field, format!("layer {l} does not exist in a {depth}-layer stack"));
            }
        }
    }

    fn width(&mut self, field: &str, t: &PretrainedModel) {
        if t.config().d_model != self.config.d_model {
            let e = AptError::DimensionMismatch { student: self.config.d_model, teacher: t.config().d_model };
            self.violate(field, e.to_string());
        }
    }
}

/// Checks a plan against the student configuration and the loaded teachers.
/// Returns either a report or every violation found.
pub fn validate_plan(
    plan: &IntegrationPlan,
    config: &ModelConfig,
    teachers: Teachers,
) -> std::result::Result<PlanReport, Vec<PlanViolation>> {
    let mut c = Checker { plan, config, violations: Vec::new() };
    let mut warnings = Vec::new();
    let mut attachments = Vec::new();
    let mut added = 0;

    if !(plan.eta.is_finite() && plan.eta >= 0.0) {
        c.violate("eta", format!("must be finite and non-negative, got {}", plan.eta));
    }
    if !(plan.beta.is_finite() && plan.beta >= 0.0) {
        c.violate("beta", format!("must be finite and non-negative, got {}", plan.beta));
    }
    let attaches = plan.fusion_side != PlanSide::None || plan.distill_side != PlanSide::None;
    match plan.mode {
        Mode::Baseline => {
            if attaches {
                c.violate("mode", "baseline plan attaches fusion or distillation");
            }
        }
        Mode::Apt => {
            if !attaches {
                c.violate("mode", "empty APT plan: fusion_side and distill_side are both none");
            }
        }
        Mode::Finetune => {
            if plan.encoder_teacher == TeacherChoice::None && plan.decoder_teacher == TeacherChoice::None {
                c.violate("mode", "finetune plan names no teacher");
            }
            if attaches {
                warnings.push("experimental: fine-tuning combined with APT components".to_string());
            }
        }
    }

    let enc = if plan.needs_encoder_teacher() { c.teacher(true, teachers.encoder) } else { None };
    let dec = if plan.needs_decoder_teacher() { c.teacher(false, teachers.decoder) } else { None };

    if plan.mode == Mode::Finetune {
        for (side, t, depth) in [("encoder", enc, config.enc_depth), ("decoder", dec, config.dec_depth)] {
            let Some(t) = t else { continue };
            if let Err(e) = finetune_pairs(side, t, config, depth) {
                c.violate(&format!("{side}_teacher"), e.to_string());
                continue;
            }
            attachments.push(Attachment {
                component: "finetune".into(),
                side: side.into(),
                layers: (0..=depth).collect(),
                teacher: t.kind().name().into(),
            });
        }
    }

    for (encoder, side, depth, teacher) in [(true, "encoder", config.enc_depth, enc), (false, "decoder", config.dec_depth, dec)] {
        if plan.fusion(encoder) {
            c.selector("fusion_layers", &plan.fusion_layers, depth);
            let layers = plan.fusion_layers.resolve(depth);
            if layers.is_empty() {
                warnings.push(format!("fusion_layers selects no {side} layer at depth {depth}"));
            }
            if let Some(t) = teacher {
                added += fusion_bank_scalars(t.config().depth, t.config().d_model, config.d_model);
                attachments.push(Attachment {
                    component: "fusion".into(),
                    side: side.into(),
                    layers,
                    teacher: t.kind().name().into(),
                });
            }
            if !encoder {
                warnings.push(format!(
                    "{DECODER_FUSION_CAVEAT}: at inference the target-side teacher only sees the generated prefix, \
                     so the fused representation is incomplete and noisy"
                ));
            }
        }
        if plan.distill(encoder) {
            let sent = !plan.ablations.no_sent_distill;
            let word = !encoder && !plan.ablations.no_word_distill;
            if !sent && !word {
                let msg = if encoder {
                    "encoder distillation is sentence-level only, and no_sent_distill removes it"
                } else {
                    "no_word_distill and no_sent_distill leave decoder distillation empty"
                };
                c.violate("ablations", msg);
            }
            let field = if encoder { "encoder_teacher" } else { "decoder_teacher" };
            let name = teacher.map(|t| t.kind().name().to_string()).unwrap_or_default();
            if sent {
                c.selector("distill_layers", &plan.distill_layers, depth);
                let layers = plan.distill_layers.resolve(depth);
                if layers.is_empty() {
                    warnings.push(format!("distill_layers selects no {side} layer at depth {depth}"));
                    c.violate("distill_layers", format!("sentence distillation on the {side} has no layer"));
                }
                if let Some(t) = teacher {
                    c.width(field, t);
                }
                attachments.push(Attachment { component: "sent_distill".into(), side: side.into(), layers, teacher: name.clone() });
            }
            if word {
                if teacher.is_some_and(|t| t.kind() == TeacherKind::Masked) {
                    warnings.push("masked decoder teacher: word distillation runs one teacher pass per target position".into());
                }
                attachments.push(Attachment {
                    component: "word_distill".into(),
                    side: side.into(),
                    layers: vec![depth],
                    teacher: name,
                });
            }
        }
    }

    let fusion_any = plan.fusion(true) || plan.fusion(false);
    if !fusion_any && (plan.ablations.no_gating || plan.ablations.no_layer_attention) {
        warnings.push("fusion ablations have no effect without fusion".into());
    }

    if c.violations.is_empty() {
        Ok(PlanReport {
            mode: plan.mode,
            attachments,
            added_parameters: added,
            active_losses: plan.active_losses().into_iter().map(String::from).collect(),
            warnings,
        })
    } else {
        Err(c.violations)
    }
}

/// [`validate_plan`] as a `Result` over [`AptError::Plan`].
pub fn check_plan(plan: &IntegrationPlan, config: &ModelConfig, teachers: Teachers) -> Result<PlanReport> {
    validate_plan(plan, config, teachers).map_err(|v| AptError::Plan(v.iter().map(ToString::to_string).collect()))
}

/// `(student name, teacher tensor)` for every parameter a side receives.
fn finetune_pairs<'t>(
    side: &str,
    teacher: &'t PretrainedModel,
    config: &ModelConfig,
    depth: usize,
) -> Result<Vec<(String, &'t Tensor)>> {
    let tc = teacher.config();
    if tc.depth != depth {
        return Err(AptError::Incompatible {
            name: format!("{side} layers"),
            detail: format!("teacher has {} layers, student {side} has {depth}", tc.depth),
        });
    }
    let expected_heads = config.n_heads;
    if tc.n_heads != expected_heads {
        return Err(AptError::Incompatible {
            name: format!("{side} attention heads"),
            detail: format!("teacher uses {} heads, student {expected_heads}", tc.n_heads),
        });
    }
    let embed = if side == "encoder" { "src_embed" } else { "tgt_embed" };
    let mut out = Vec::new();
    for (_, name, t) in teacher.store().iter() {
        if name == "embed" {
            out.push((embed.to_string(), t));
        } else if let Some(rest) = name.strip_prefix("layers.") {
            out.push((format!("{side}.{rest}"), t));
        }
    }
    Ok(out)
}

/// Names of the student parameters overwritten by [`apply_finetune`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FinetuneReport {
    pub copied: Vec<String>,
}

/// Copies teacher embeddings and layers into the matching student side.
/// Every tensor is checked before any is written, so a failure leaves the
/// store untouched.
pub fn apply_finetune(store: &mut ParamStore, config: &ModelConfig, teachers: Teachers) -> Result<FinetuneReport> {
    let mut pairs = Vec::new();
    if let Some(t) = teachers.encoder {
        pairs.extend(finetune_pairs("encoder", t, config, config.enc_depth)?);
    }
    if let Some(t) = teachers.decoder {
        pairs.extend(finetune_pairs("decoder", t, config, config.dec_depth)?);
    }
    let mut writes = Vec::with_capacity(pairs.len());
    for (name, t) in &pairs {
        let id = store.id(name).ok_or_else(|| AptError::Incompatible {
            name: name.clone(),
            detail: "student has no such parameter".into(),
        })?;
        if store.get(id).shape() != t.shape() {
            return Err(AptError::Incompatible {
                name: name.clone(),
                detail: format!("teacher shape {:?}, student shape {:?}", t.shape(), store.get(id).shape()),
            });
        }
        writes.push((id, t.to_dtype(store.dtype())));
    }
    for (id, t) in writes {
        store.set(id, t)?;
    }
    Ok(FinetuneReport { copied: pairs.into_iter().map(|(n, _)| n).collect() })
}

/// Student network: the Transformer plus any fusion banks the plan adds.
#[derive(Clone, Debug)]
pub struct Student {
    pub model: Transformer,
    pub encoder_bank: Option<FusionBank>,
    pub decoder_bank: Option<FusionBank>,
    pub fusion: FusionOptions,
}

impl Student {
    fn build(src: &mut dyn ParamSource, config: &ModelConfig, plan: &IntegrationPlan, teachers: Teachers) -> Result<Self> {
        let model = Transformer::build(src, config)?;
        let mut bank = |encoder: bool, prefix: &str, depth: usize| -> Result<Option<FusionBank>> {
            if !plan.fusion(encoder) {
                return Ok(None);
            }
            let t = if encoder { teachers.encoder } else { teachers.decoder };
            let t = t.ok_or_else(|| AptError::Plan(vec![format!("{prefix} needs a teacher")]))?;
            let layers = plan.fusion_layers.resolve(depth);
            FusionBank::build(src, prefix, t.config().depth, t.config().d_model, config.d_model, &layers).map(Some)
        };
        let encoder_bank = bank(true, "fusion.encoder", config.enc_depth)?;
        let decoder_bank = bank(false, "fusion.decoder", config.dec_depth)?;
        Ok(Student { model, encoder_bank, decoder_bank, fusion: plan.fusion_options() })
    }

    /// Fresh parameters. The Transformer is drawn first, so its values do
    /// not depend on the plan.
    pub fn init(
        store: &mut ParamStore,
        config: &ModelConfig,
        plan: &IntegrationPlan,
        teachers: Teachers,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Self::build(&mut Initializer { store, rng }, config, plan, teachers)
    }

    pub fn bind(store: &ParamStore, config: &ModelConfig, plan: &IntegrationPlan, teachers: Teachers) -> Result<Self> {
        Self::build(&mut Binder { store }, config, plan, teachers)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    pub fn encode(&self, s: &mut Session, src: &TokenBatch, teacher: Option<&[Tensor]>) -> Result<(EncoderState, FusionTrace)> {
        match (&self.encoder_bank, teacher) {
            (Some(bank), Some(t)) => fused_encode(&self.model, s, src, t, bank, self.fusion),
            (Some(_), None) => Err(AptError::Plan(vec!["encoder fusion needs teacher representations".into()])),
            (None, _) => Ok((self.model.encode(s, src)?, FusionTrace::default())),
        }
    }

    pub fn decode(
        &self,
        s: &mut Session,
        tgt_in: &TokenBatch,
        enc: &EncoderState,
        teacher: Option<&[Tensor]>,
    ) -> Result<(Var, DecoderState, FusionTrace)> {
        match (&self.decoder_bank, teacher) {
            (Some(bank), Some(t)) => fused_decode(&self.model, s, tgt_in, enc, t, bank, self.fusion),
            (Some(_), None) => Err(AptError::Plan(vec!["decoder fusion needs teacher representations".into()])),
            (None, _) => {
                let (logits, dec) = self.model.decode(s, tgt_in, enc)?;
                Ok((logits, dec, FusionTrace::default()))
            }
        }
    }
}

/// Frozen teacher outputs for one batch. They depend only on the batch, so
/// a trainer may compute them once and reuse them every epoch.
#[derive(Clone, Debug, Default)]
pub struct TeacherFeatures {
    /// Source-side teacher layers over the encoder input.
    pub encoder_layers: Option<Vec<Tensor>>,
    /// Target-side teacher layers over the decoder input.
    pub decoder_layers: Option<Vec<Tensor>>,
    /// Target-side teacher distribution for every decoder target.
    pub word_dist: Option<Tensor>,
}

fn need<'t>(t: Option<&'t PretrainedModel>, side: &str) -> Result<&'t PretrainedModel> {
    t.ok_or_else(|| AptError::Plan(vec![format!("{side} teacher required but not loaded")]))
}

impl TeacherFeatures {
    pub fn compute(plan: &IntegrationPlan, teachers: Teachers, batch: &Batch, exact_cap: usize) -> Result<Self> {
        let mut out = TeacherFeatures::default();
        if plan.fusion(true) || plan.encoder_sent() {
            out.encoder_layers = Some(teacher_representations(need(teachers.encoder, "encoder")?, &batch.src)?);
        }
        if plan.fusion(false) || plan.decoder_sent() {
            out.decoder_layers = Some(teacher_representations(need(teachers.decoder, "decoder")?, &batch.tgt_in)?);
        }
        if plan.decoder_word() {
            let t = need(teachers.decoder, "decoder")?;
            let y = TokenBatch { ids: batch.targets.clone(), layout: batch.tgt_in.layout.clone() };
            out.word_dist = Some(teacher_distribution(t, &y, DistributionMode::Exact, exact_cap)?.probs);
        }
        Ok(out)
    }
}

/// Graph handles produced by one training forward pass.
pub struct StepOutput {
    pub total: Var,
    pub bundle: LossBundle,
    pub logits: Var,
    /// Every attention node of the student.
    pub attention: Vec<Var>,
    /// Layer weights `[batch, L]` of every fused layer.
    pub alphas: Vec<Var>,
}

/// The per-batch loss of a plan.
#[derive(Clone, Debug)]
pub struct TrainingStep<'a> {
    pub plan: IntegrationPlan,
    pub student: &'a Student,
}

pub fn build_training_step<'a>(plan: &IntegrationPlan, student: &'a Student) -> Result<TrainingStep<'a>> {
    if plan.fusion(true) != student.encoder_bank.is_some() || plan.fusion(false) != student.decoder_bank.is_some() {
        return Err(AptError::Plan(vec!["student fusion banks do not match the plan".into()]));
    }
    Ok(TrainingStep { plan: plan.clone(), student })
}

impl TrainingStep<'_> {
    pub fn forward(&self, s: &mut Session, batch: &Batch, feats: &TeacherFeatures) -> Result<StepOutput> {
        let plan = &self.plan;
        let student = self.student;
        let cfg = student.config();
        let (enc, enc_trace) = student.encode(s, &batch.src, feats.encoder_layers.as_deref())?;
        let (logits, dec, dec_trace) = student.decode(s, &batch.tgt_in, &enc, feats.decoder_layers.as_deref())?;
        let l_t = translation_loss(&mut s.graph, logits, &batch.targets, &dec.layout, cfg.label_smoothing)?;

        let missing = |what: &str| AptError::Plan(vec![format!("teacher features lack {what}")]);
        let mut sent_terms = Vec::new();
        if plan.encoder_sent() {
            let layers = feats.encoder_layers.as_ref().ok_or_else(|| missing("encoder layers"))?;
            let top = layers.last().ok_or_else(|| missing("encoder layers"))?;
            let sel = plan.distill_layers.resolve(cfg.enc_depth);
            let term = if sel == [cfg.enc_depth] {
                encoder_sent_distill(&mut s.graph, &enc, top)?
            } else {
                let student_layers: Vec<Var> = sel.iter().map(|&n| enc.layers[n]).collect();
                layered_sent_distill(&mut s.graph, &student_layers, top, &enc.layout.mask)?
            };
            sent_terms.push(term);
        }
        if plan.decoder_sent() {
            let layers = feats.decoder_layers.as_ref().ok_or_else(|| missing("decoder layers"))?;
            let top = layers.last().ok_or_else(|| missing("decoder layers"))?;
            let student_layers: Vec<Var> = plan.distill_layers.resolve(cfg.dec_depth).iter().map(|&n| dec.layers[n]).collect();
            sent_terms.push(layered_sent_distill(&mut s.graph, &student_layers, top, &dec.layout.mask)?);
        }
        let l_s = match sent_terms.as_slice() {
            [] => None,
            [a] => Some(*a),
            [a, b] => Some(s.graph.add(*a, *b)?),
            _ => unreachable!("at most one term per side"),
        };
        let l_w = if plan.decoder_word() {
            let dist = feats.word_dist.as_ref().ok_or_else(|| missing("the word distribution"))?;
            Some(word_distill_loss(&mut s.graph, logits, dist, &dec.layout.mask)?)
        } else {
            None
        };
        let (total, bundle) = joint_loss(&mut s.graph, l_t, l_s, l_w, plan.eta, plan.beta)?;

        let mut attention = enc.attention.clone();
        attention.extend(dec.self_attention.iter().chain(&dec.cross_attention));
        let alphas = enc_trace.steps.iter().chain(&dec_trace.steps).map(|st| st.alpha).collect();
        Ok(StepOutput { total, bundle, logits, attention, alphas })
    }
}

/// Ablation and strategy matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Table3,
    Table5,
    Table6,
}

impl Suite {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "table3" => Ok(Suite::Table3),
            "table5" => Ok(Suite::Table5),
            "table6" => Ok(Suite::Table6),
            other => Err(AptError::Config(format!("unknown suite `{other}` (table3, table5, table6)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteCell {
    pub name: String,
    pub plan: IntegrationPlan,
}

/// The cells of a suite, baseline first. `base` supplies η, β and the
/// teacher choices shared by every cell.
pub fn suite_cells(suite: Suite, base: &IntegrationPlan) -> Vec<SuiteCell> {
    let apt = IntegrationPlan {
        mode: Mode::Apt,
        ablations: Ablations::default(),
        fusion_layers: LayerSelector::Named(NamedLayers::All),
        distill_layers: LayerSelector::Named(NamedLayers::Output),
        ..base.clone()
    };
    let with = |fusion: PlanSide, distill: PlanSide, ab: Ablations| IntegrationPlan {
        fusion_side: fusion,
        distill_side: distill,
        ablations: ab,
        ..apt.clone()
    };
    let cell = |name: &str, plan: IntegrationPlan| SuiteCell { name: name.to_string(), plan };
    let mut cells = vec![cell("Transformer", IntegrationPlan::baseline())];
    let none = Ablations::default();
    match suite {
        Suite::Table3 => {
            let gating = Ablations { no_gating: true, ..none };
            let attention = Ablations { no_layer_attention: true, ..none };
            let both = Ablations { no_gating: true, no_layer_attention: true, ..none };
            for (prefix, distill) in [("w/o Knowledge Distillation", PlanSide::None), ("w/ Knowledge Distillation", PlanSide::Decoder)] {
                cells.push(cell(prefix, with(PlanSide::Encoder, distill, none)));
                cells.push(cell(&format!("{prefix}, w/o Contextual Gating"), with(PlanSide::Encoder, distill, gating)));
                cells.push(cell(&format!("{prefix}, w/o Layer-aware Attention"), with(PlanSide::Encoder, distill, attention)));
                cells.push(cell(
                    &format!("{prefix}, w/o Contextual Gating w/o Layer-aware Attention"),
                    with(PlanSide::Encoder, distill, both),
                ));
            }
            let word = Ablations { no_word_distill: true, ..none };
            let sent = Ablations { no_sent_distill: true, ..none };
            for (prefix, fusion) in [("w/o Dynamic Fusion", PlanSide::None), ("w/ Dynamic Fusion", PlanSide::Encoder)] {
                cells.push(cell(prefix, with(fusion, PlanSide::Decoder, none)));
                cells.push(cell(&format!("{prefix}, w/o Word Distillation"), with(fusion, PlanSide::Decoder, word)));
                cells.push(cell(&format!("{prefix}, w/o Sent Distillation"), with(fusion, PlanSide::Decoder, sent)));
            }
        }
        Suite::Table5 => {
            for (side_name, side) in [("Encoder", PlanSide::Encoder), ("Decoder", PlanSide::Decoder)] {
                cells.push(cell(&format!("{side_name} w/ Dynamic Fusion"), with(side, PlanSide::None, none)));
                cells.push(cell(&format!("{side_name} w/ Knowledge Distillation"), with(PlanSide::None, side, none)));
                cells.push(cell(&format!("{side_name} w/ Dynamic Fusion + Knowledge Distillation"), with(side, side, none)));
            }
        }
        Suite::Table6 => {
            let selectors = [
                ("Embedding", NamedLayers::Embedding),
                ("Middle", NamedLayers::Middle),
                ("Output", NamedLayers::Output),
                ("All", NamedLayers::All),
            ];
            for (label, sel) in selectors {
                let plan = IntegrationPlan { fusion_layers: LayerSelector::Named(sel), ..with(PlanSide::Encoder, PlanSide::None, none) };
                cells.push(cell(&format!("w/ Dynamic Fusion ({label})"), plan));
            }
            for (label, sel) in selectors {
                let plan = IntegrationPlan { distill_layers: LayerSelector::Named(sel), ..with(PlanSide::None, PlanSide::Decoder, none) };
                cells.push(cell(&format!("w/ Knowledge Distillation ({label})"), plan));
            }
        }
    }
    cells
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Batch, Example};
    use crate::pretrain::{TeacherConfig, TeacherNet};
    use crate::tensor::Dtype;
    use rand::{Rng, SeedableRng};

    fn config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            enc_depth: 2,
            dec_depth: 2,
            d_ff: 16,
            src_vocab: 14,
            tgt_vocab: 14,
            dropout: 0.0,
            label_smoothing: 0.1,
            max_len: 12,
        }
    }

    fn teacher(kind: TeacherKind, language: &str, seed: u64) -> PretrainedModel {
        let cfg = TeacherConfig {
            kind,
            vocab: 14,
            d_model: 8,
            n_heads: 2,
            depth: 2,
            d_ff: 16,
            max_len: 16,
            dropout: 0.0,
            language: language.into(),
        };
        let mut store = ParamStore::new(Dtype::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TeacherNet::build(&mut Initializer { store: &mut store, rng: &mut rng }, &cfg).unwrap();
        PretrainedModel::new(store, &cfg).unwrap()
    }

    fn pair() -> (PretrainedModel, PretrainedModel) {
        (teacher(TeacherKind::Masked, "src", 1), teacher(TeacherKind::Causal, "tgt", 2))
    }

    fn batch(seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let examples: Vec<Example> = (0..3)
            .map(|_| {
                let n = rng.gen_range(2..7);
                let src = (0..n).map(|_| rng.gen_range(5..14)).collect();
                let m = rng.gen_range(2..7);
                let tgt = (0..m).map(|_| rng.gen_range(5..14)).collect();
                Example { src, tgt }
            })
            .collect();
        let refs: Vec<&Example> = examples.iter().collect();
        Batch::from_examples(&refs, vec![0, 1, 2])
    }

    fn violations(plan: &IntegrationPlan, t: Teachers) -> Vec<String> {
        validate_plan(plan, &config(), t).err().unwrap_or_default().iter().map(ToString::to_string).collect()
    }

    #[test]
    fn recommended_plan_validates_cleanly() {
        let (e, d) = pair();
        let report = validate_plan(&IntegrationPlan::default(), &config(), Teachers { encoder: Some(&e), decoder: Some(&d) }).unwrap();
        assert!(report.warnings.is_empty(), "{:?}", report.warnings);
        assert_eq!(report.active_losses, ["l_t", "l_s", "l_w"]);
        assert_eq!(report.added_parameters, 2 * (8 * 8 + 8 + 8 * 8 + 8) + 2 * 9);
        assert_eq!(report.attachments[0].layers, vec![0, 1, 2]);
    }

    #[test]
    fn empty_apt_plan_is_a_violation() {
        let plan = IntegrationPlan { fusion_side: PlanSide::None, distill_side: PlanSide::None, ..IntegrationPlan::default() };
        let v = violations(&plan, Teachers::default());
        assert!(v.iter().any(|m| m.contains("empty APT plan")), "{v:?}");
    }

    #[test]
    fn decoder_fusion_is_valid_with_caveat() {
        let (e, d) = pair();
        let plan = IntegrationPlan { fusion_side: PlanSide::Decoder, distill_side: PlanSide::None, ..IntegrationPlan::default() };
        let report = validate_plan(&plan, &config(), Teachers { encoder: Some(&e), decoder: Some(&d) }).unwrap();
        assert!(report.warnings.iter().any(|w| w.starts_with(DECODER_FUSION_CAVEAT)));
    }

    #[test]
    fn teacher_mismatches_are_reported_together() {
        let (e, d) = pair();
        // Swapped sides: wrong kind and wrong language on both.
        let v = violations(&IntegrationPlan::default(), Teachers { encoder: Some(&d), decoder: Some(&e) });
        assert!(v.len() >= 4, "{v:?}");
        let v = violations(&IntegrationPlan::default(), Teachers { encoder: Some(&e), decoder: None });
        assert!(v.iter().any(|m| m.starts_with("decoder_teacher")), "{v:?}");
        let plan = IntegrationPlan::finetune(TeacherChoice::None, TeacherChoice::None);
        assert!(violations(&plan, Teachers::default()).iter().any(|m| m.contains("no teacher")));
    }

    #[test]
    fn width_mismatch_for_sentence_distillation() {
        let cfg = TeacherConfig {
            kind: TeacherKind::Causal,
            vocab: 14,
            d_model: 4,
            n_heads: 2,
            depth: 2,
            d_ff: 8,
            max_len: 16,
            dropout: 0.0,
            language: "tgt".into(),
        };
        let mut store = ParamStore::new(Dtype::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        TeacherNet::build(&mut Initializer { store: &mut store, rng: &mut rng }, &cfg).unwrap();
        let narrow = PretrainedModel::new(store, &cfg).unwrap();
        let plan = IntegrationPlan { fusion_side: PlanSide::None, ..IntegrationPlan::default() };
        let v = violations(&plan, Teachers { encoder: None, decoder: Some(&narrow) });
        assert!(v.iter().any(|m| m.contains("configure the teacher hidden size")), "{v:?}");
        // Word-level only does not need matching widths.
        let plan = IntegrationPlan { ablations: Ablations { no_sent_distill: true, ..Ablations::default() }, ..plan };
        assert!(violations(&plan, Teachers { encoder: None, decoder: Some(&narrow) }).is_empty());
    }

    #[test]
    fn middle_selector_warns_when_empty() {
        let (e, d) = pair();
        let cfg = ModelConfig { enc_depth: 1, dec_depth: 1, ..config() };
        let teachers = Teachers { encoder: Some(&e), decoder: Some(&d) };
        let plan = IntegrationPlan {
            fusion_layers: LayerSelector::Named(NamedLayers::Middle),
            distill_side: PlanSide::None,
            ..IntegrationPlan::default()
        };
        let report = validate_plan(&plan, &cfg, teachers).unwrap();
        assert!(report.warnings.iter().any(|w| w.contains("selects no encoder layer")));
        assert_eq!(LayerSelector::Named(NamedLayers::Middle).resolve(6), vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn plan_json_uses_the_documented_field_names() {
        let json = serde_json::to_value(IntegrationPlan::default()).unwrap();
        let keys: Vec<&str> = json.as_object().unwrap().keys().map(String::as_str).collect();
        for k in [
            "mode",
            "fusion_side",
            "distill_side",
            "fusion_layers",
            "distill_layers",
            "encoder_teacher",
            "decoder_teacher",
            "ablations",
            "eta",
            "beta",
        ] {
            assert!(keys.contains(&k), "{k}");
        }
        assert_eq!(json["fusion_layers"], "all");
        let explicit: IntegrationPlan = serde_json::from_str(r#"{"fusion_layers": [2, 0]}"#).unwrap();
        assert_eq!(explicit.fusion_layers.resolve(2), vec![0, 2]);
        assert!(serde_json::from_str::<IntegrationPlan>(r#"{"fusion": "encoder"}"#).is_err());
    }

    fn student(plan: &IntegrationPlan, t: Teachers, seed: u64) -> (ParamStore, Student) {
        let mut store = ParamStore::new(Dtype::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Student::init(&mut store, &config(), plan, t, &mut rng).unwrap();
        (store, s)
    }

    #[test]
    fn reloaded_plan_builds_the_same_graph() {
        let (e, d) = pair();
        let t = Teachers { encoder: Some(&e), decoder: Some(&d) };
        let plan = IntegrationPlan::default();
        let reloaded: IntegrationPlan = serde_json::from_str(&serde_json::to_string(&plan).unwrap()).unwrap();
        assert_eq!(plan, reloaded);
        let (s1, _) = student(&plan, t, 5);
        let (s2, _) = student(&reloaded, t, 5);
        assert_eq!(s1.num_scalars(), s2.num_scalars());
        assert_eq!(s1.checksum(), s2.checksum());
        assert_eq!(plan.active_losses(), reloaded.active_losses());
    }

    #[test]
    fn transformer_parameters_do_not_depend_on_the_plan() {
        let (e, d) = pair();
        let t = Teachers { encoder: Some(&e), decoder: Some(&d) };
        let (base, _) = student(&IntegrationPlan::baseline(), t, 9);
        let (apt, _) = student(&IntegrationPlan::default(), t, 9);
        for (_, name, v) in base.iter() {
            assert_eq!(apt.by_name(name).unwrap(), v, "{name}");
        }
        let report = validate_plan(&IntegrationPlan::default(), &config(), t).unwrap();
        assert_eq!(apt.num_scalars() - base.num_scalars(), report.added_parameters);
    }

    fn run_step(plan: &IntegrationPlan, t: Teachers) -> LossBundle {
        let (store, st) = student(plan, t, 11);
        let b = batch(4);
        let feats = TeacherFeatures::compute(plan, t, &b, 32).unwrap();
        let step = build_training_step(plan, &st).unwrap();
        let mut s = Session::inference(&store);
        step.forward(&mut s, &b, &feats).unwrap().bundle
    }

    #[test]
    fn loss_terms_follow_the_plan() {
        let (e, d) = pair();
        let t = Teachers { encoder: Some(&e), decoder: Some(&d) };
        let base = run_step(&IntegrationPlan::baseline(), t);
        assert_eq!((base.l_s, base.l_w), (0.0, 0.0));
        assert_eq!(base.total, base.l_t);
        let full = run_step(&IntegrationPlan::default(), t);
        assert!(full.l_s > 0.0 && full.l_w > 0.0);
        assert!((full.total - (full.l_t + 0.5 * full.l_s + 0.5 * full.l_w)).abs() < 1e-12);
        let enc_only = IntegrationPlan { fusion_side: PlanSide::None, distill_side: PlanSide::Encoder, ..IntegrationPlan::default() };
        assert_eq!(enc_only.active_losses(), ["l_t", "l_s"]);
        let b = run_step(&enc_only, t);
        assert!(b.l_s > 0.0);
        assert_eq!(b.l_w, 0.0);
    }

    #[test]
    fn encoder_distillation_delegates_to_encoder_sent_distill() {
        let (e, d) = pair();
        let t = Teachers { encoder: Some(&e), decoder: Some(&d) };
        let plan = IntegrationPlan { fusion_side: PlanSide::None, distill_side: PlanSide::Encoder, ..IntegrationPlan::default() };
        let (store, st) = student(&plan, t, 11);
        let b = batch(4);
        let reps = teacher_representations(&e, &b.src).unwrap();
        let mut s = Session::inference(&store);
        let enc = st.model.encode(&mut s, &b.src).unwrap();
        let direct = encoder_sent_distill(&mut s.graph, &enc, reps.last().unwrap()).unwrap();
        let direct = s.graph.value(direct).item();
        assert_eq!(run_step(&plan, t).l_s, direct);
    }

    #[test]
    fn finetune_copies_the_encoder_exactly() {
        let (e, d) = pair();
        let plan = IntegrationPlan::finetune(TeacherChoice::Masked, TeacherChoice::Causal);
        let t = Teachers { encoder: Some(&e), decoder: Some(&d) };
        let (mut store, st) = student(&plan, t, 3);
        let before_cross = store.by_name("decoder.0.cross_attn.query.w").unwrap().clone();
        let report = apply_finetune(&mut store, &config(), t).unwrap();
        assert!(report.copied.contains(&"encoder.1.ffn.outer.w".to_string()));
        assert_eq!(store.by_name("decoder.0.cross_attn.query.w").unwrap(), &before_cross);
        assert_eq!(store.by_name("decoder.1.self_attn.key.w").unwrap(), d.store().by_name("layers.1.self_attn.key.w").unwrap());
        let b = batch(6);
        let mut s = Session::inference(&store);
        let enc = st.model.encode(&mut s, &b.src).unwrap();
        let teacher_top = teacher_representations(&e, &b.src).unwrap().pop().unwrap();
        let diff = s.graph.value(enc.output()).max_abs_diff(&teacher_top);
        assert!(diff <= 1e-6, "{diff}");
        assert!(validate_plan(&plan, &config(), t).is_ok());
    }

    #[test]
    fn finetune_mismatch_copies_nothing() {
        let (e, d) = pair();
        let cfg = ModelConfig { d_model: 12, n_heads: 2, ..config() };
        let mut store = ParamStore::new(Dtype::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        Transformer::init(&mut store, &cfg, &mut rng).unwrap();
        let before = store.checksum();
        let err = apply_finetune(&mut store, &cfg, Teachers { encoder: Some(&e), decoder: Some(&d) }).unwrap_err();
        assert!(matches!(&err, AptError::Incompatible { name, .. } if name == "src_embed"), "{err}");
        assert_eq!(store.checksum(), before);
    }

    #[test]
    fn suites_enumerate_the_tables() {
        let (e, d) = pair();
        let t = Teachers { encoder: Some(&e), decoder: Some(&d) };
        let base = IntegrationPlan::default();
        let t5 = suite_cells(Suite::Table5, &base);
        assert_eq!(t5.len(), 7);
        let t6 = suite_cells(Suite::Table6, &base);
        assert_eq!(t6.len(), 9);
        let t3 = suite_cells(Suite::Table3, &base);
        assert_eq!(t3.len(), 15);
        assert!(t3.iter().any(|c| c.name.ends_with("w/o Contextual Gating w/o Layer-aware Attention")));
        for cells in [&t5, &t6] {
            for (i, a) in cells.iter().enumerate() {
                assert!(cells[i + 1..].iter().all(|b| b.plan != a.plan), "{} repeats a plan", a.name);
            }
        }
        for c in t3.iter().chain(&t5).chain(&t6) {
            validate_plan(&c.plan, &config(), t).unwrap_or_else(|v| panic!("{}: {v:?}", c.name));
        }
        assert_eq!(t5[0].plan, IntegrationPlan::baseline());
    }
}
