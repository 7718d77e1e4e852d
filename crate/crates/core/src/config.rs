//! Run configuration documents and the on-disk dataset layout.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::Checkpoint;
use crate::data::{generate_synthetic, read_lines, write_lines, Example, SyntheticTaskSpec, Tokenizer};
use crate::error::{AptError, Result};
use crate::model::ModelConfig;
use crate::pretrain::{PretrainConfig, PretrainedModel, TeacherConfig, TeacherKind};
use crate::strategy::{IntegrationPlan, Mode, TeacherChoice};
use crate::trainer::{GradcheckConfig, TrainerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Src,
    Tgt,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::Src => "src",
            Side::Tgt => "tgt",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// Input of `datagen`: the synthetic task plus tokenizer settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatagenSpec {
    pub task: SyntheticTaskSpec,
    pub bpe_merges: usize,
    pub max_vocab: usize,
}

impl Default for DatagenSpec {
    fn default() -> Self {
        DatagenSpec { task: SyntheticTaskSpec::default(), bpe_merges: 1000, max_vocab: 1000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub mono_src: usize,
    pub mono_tgt: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
}

/// Generates the synthetic corpora and writes them under `dir`:
/// `{train,valid,test}.{src,tgt}`, `mono.{src,tgt}`, and per language a
/// BPE merge file `*.bpe` and vocabulary `*.vocab` learned on the parallel
/// plus monolingual text of that language.
pub fn write_dataset(spec: &DatagenSpec, dir: &Path) -> Result<DatasetSummary> {
    let (_, c) = generate_synthetic(&spec.task)?;
    fs::create_dir_all(dir)?;
    for (split, pairs) in [(Split::Train, &c.train), (Split::Valid, &c.valid), (Split::Test, &c.test)] {
        let (src, tgt): (Vec<&str>, Vec<&str>) = pairs.iter().map(|(s, t)| (s.as_str(), t.as_str())).unzip();
        write_lines(&dir.join(format!("{}.src", split.name())), &src)?;
        write_lines(&dir.join(format!("{}.tgt", split.name())), &tgt)?;
    }
    write_lines(&dir.join("mono.src"), &c.mono_src)?;
    write_lines(&dir.join("mono.tgt"), &c.mono_tgt)?;
    let mut vocab = [0usize; 2];
    for (i, side) in [Side::Src, Side::Tgt].into_iter().enumerate() {
        let mono = if side == Side::Src { &c.mono_src } else { &c.mono_tgt };
        let corpus: Vec<&str> = c
            .train
            .iter()
            .map(|(s, t)| if side == Side::Src { s.as_str() } else { t.as_str() })
            .chain(mono.iter().map(String::as_str))
            .collect();
        let tok = Tokenizer::learn(&corpus, spec.bpe_merges, spec.max_vocab)?;
        tok.save(&dir.join(format!("{}.bpe", side.name())), &dir.join(format!("{}.vocab", side.name())))?;
        vocab[i] = tok.vocab_size();
    }
    fs::write(dir.join("datagen.json"), serde_json::to_string_pretty(spec)?)?;
    Ok(DatasetSummary {
        train: c.train.len(),
        valid: c.valid.len(),
        test: c.test.len(),
        mono_src: c.mono_src.len(),
        mono_tgt: c.mono_tgt.len(),
        src_vocab: vocab[0],
        tgt_vocab: vocab[1],
    })
}

/// A dataset directory as written by [`write_dataset`].
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub src: Tokenizer,
    pub tgt: Tokenizer,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let tok = |side: Side| Tokenizer::load(&dir.join(format!("{}.bpe", side.name())), &dir.join(format!("{}.vocab", side.name())));
        Ok(Dataset { dir: dir.to_path_buf(), src: tok(Side::Src)?, tgt: tok(Side::Tgt)? })
    }

    pub fn tokenizer(&self, side: Side) -> &Tokenizer {
        match side {
            Side::Src => &self.src,
            Side::Tgt => &self.tgt,
        }
    }

    pub fn lines(&self, split: Split, side: Side) -> Result<Vec<String>> {
        read_lines(&self.dir.join(format!("{}.{}", split.name(), side.name())))
    }

    pub fn examples(&self, split: Split) -> Result<Vec<Example>> {
        let src = self.lines(split, Side::Src)?;
        let tgt = self.lines(split, Side::Tgt)?;
        if src.len() != tgt.len() {
            return Err(AptError::LengthMismatch(format!("{} split has {} source and {} target lines", split.name(), src.len(), tgt.len())));
        }
        Ok(src.iter().zip(&tgt).map(|(s, t)| Example { src: self.src.encode(s), tgt: self.tgt.encode(t) }).collect())
    }

    /// Tokenized monolingual corpus of one language.
    pub fn mono(&self, side: Side) -> Result<Vec<Vec<usize>>> {
        let tok = self.tokenizer(side);
        Ok(read_lines(&self.dir.join(format!("mono.{}", side.name())))?.iter().map(|l| tok.encode(l)).collect())
    }
}

/// Teacher architecture; unset fields follow the student so that fusion,
/// distillation and finetune initialization line up by default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherArch {
    pub d_model: Option<usize>,
    pub n_heads: Option<usize>,
    pub depth: Option<usize>,
    pub d_ff: Option<usize>,
    pub max_len: Option<usize>,
    pub dropout: Option<f64>,
}

impl TeacherArch {
    pub fn config(&self, student: &ModelConfig, kind: TeacherKind, side: Side, vocab: usize) -> TeacherConfig {
        let depth = match side {
            Side::Src => student.enc_depth,
            Side::Tgt => student.dec_depth,
        };
        TeacherConfig {
            kind,
            vocab,
            d_model: self.d_model.unwrap_or(student.d_model),
            n_heads: self.n_heads.unwrap_or(student.n_heads),
            depth: self.depth.unwrap_or(depth),
            d_ff: self.d_ff.unwrap_or(student.d_ff),
            max_len: self.max_len.unwrap_or(student.max_len),
            dropout: self.dropout.unwrap_or(student.dropout),
            language: side.name().into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherPaths {
    pub encoder: Option<PathBuf>,
    pub decoder: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSettings {
    pub model: ModelConfig,
    pub check: GradcheckConfig,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        GradcheckSettings {
            model: ModelConfig {
                d_model: 8,
                n_heads: 2,
                enc_depth: 2,
                dec_depth: 2,
                d_ff: 16,
                src_vocab: 12,
                tgt_vocab: 12,
                dropout: 0.0,
                label_smoothing: 0.1,
                max_len: 16,
            },
            check: GradcheckConfig::default(),
        }
    }
}

/// Everything a command needs besides its flags. Relative paths are taken
/// from the directory holding the configuration file. The student
/// vocabulary sizes come from the dataset tokenizers unless pinned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub plan: IntegrationPlan,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub teacher: TeacherArch,
    #[serde(default)]
    pub gradcheck: GradcheckSettings,
    pub data: PathBuf,
    #[serde(default)]
    pub teachers: TeacherPaths,
    #[serde(default)]
    pub seed: u64,
    #[serde(skip)]
    base: PathBuf,
    #[serde(skip)]
    pinned_vocab: (bool, bool),
}

impl RunConfig {
    pub fn from_json(text: &str, base: &Path) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        let pinned = |key: &str| value.get("model").and_then(|m| m.get(key)).is_some();
        let pinned_vocab = (pinned("src_vocab"), pinned("tgt_vocab"));
        let mut cfg: RunConfig = serde_json::from_value(value)?;
        cfg.base = base.to_path_buf();
        cfg.pinned_vocab = pinned_vocab;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn check(&self) -> Result<()> {
        let mut probe = self.model.clone();
        probe.src_vocab = probe.src_vocab.max(8);
        probe.tgt_vocab = probe.tgt_vocab.max(8);
        probe.validate()?;
        self.gradcheck.model.validate()?;
        if self.trainer.batch_size == 0 || self.trainer.probe_every == 0 || self.trainer.valid_beam == 0 {
            return Err(AptError::Config("trainer batch_size, probe_every and valid_beam must be positive".into()));
        }
        if self.pretrain.batch_size == 0 {
            return Err(AptError::Config("pretrain batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base.join(path)
        }
    }

    pub fn dataset(&self) -> Result<Dataset> {
        Dataset::open(&self.resolve(&self.data))
    }

    /// The student configuration with vocabulary sizes taken from `data`.
    pub fn student_model(&self, data: &Dataset) -> Result<ModelConfig> {
        let mut m = self.model.clone();
        for (pinned, size, found, side) in [
            (self.pinned_vocab.0, &mut m.src_vocab, data.src.vocab_size(), "src"),
            (self.pinned_vocab.1, &mut m.tgt_vocab, data.tgt.vocab_size(), "tgt"),
        ] {
            if pinned && *size != found {
                return Err(AptError::Config(format!("model.{side}_vocab is {size} but the dataset tokenizer has {found} entries")));
            }
            *size = found;
        }
        m.validate()?;
        Ok(m)
    }

    pub fn teacher_config(&self, data: &Dataset, kind: TeacherKind, side: Side) -> Result<TeacherConfig> {
        let student = self.student_model(data)?;
        let cfg = self.teacher.config(&student, kind, side, data.tokenizer(side).vocab_size());
        cfg.validate()?;
        Ok(cfg)
    }

    /// The configured plan, replaced by the canonical plan of `mode` when
    /// a mode is forced. Finetune keeps the configured teacher choices.
    pub fn plan_for(&self, mode: Option<Mode>) -> IntegrationPlan {
        match mode {
            None => self.plan.clone(),
            Some(Mode::Baseline) => IntegrationPlan::baseline(),
            Some(Mode::Finetune) => IntegrationPlan::finetune(self.plan.encoder_teacher, self.plan.decoder_teacher),
            Some(Mode::Apt) => IntegrationPlan { mode: Mode::Apt, ..self.plan.clone() },
        }
    }

    /// Loads the teacher checkpoints `plan` needs.
    pub fn load_teachers(&self, plan: &IntegrationPlan) -> Result<LoadedTeachers> {
        let load = |needed: bool, choice: TeacherChoice, path: &Option<PathBuf>, which: &str| -> Result<Option<PretrainedModel>> {
            if !needed || choice == TeacherChoice::None {
                return Ok(None);
            }
            let path = path
                .as_ref()
                .ok_or_else(|| AptError::Config(format!("the plan needs a {which} teacher but teachers.{which} is not set")))?;
            Ok(Some(PretrainedModel::from_checkpoint(&Checkpoint::load(&self.resolve(path))?)?))
        };
        Ok(LoadedTeachers {
            encoder: load(plan.needs_encoder_teacher(), plan.encoder_teacher, &self.teachers.encoder, "encoder")?,
            decoder: load(plan.needs_decoder_teacher(), plan.decoder_teacher, &self.teachers.decoder, "decoder")?,
        })
    }
}

#[derive(Debug, Default)]
pub struct LoadedTeachers {
    pub encoder: Option<PretrainedModel>,
    pub decoder: Option<PretrainedModel>,
}

impl LoadedTeachers {
    pub fn view(&self) -> crate::strategy::Teachers<'_> {
        crate::strategy::Teachers { encoder: self.encoder.as_ref(), decoder: self.decoder.as_ref() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> DatagenSpec {
        DatagenSpec {
            task: SyntheticTaskSpec {
                src_vocab: 12,
                tgt_vocab: 12,
                train_pairs: 40,
                valid_pairs: 10,
                test_pairs: 10,
                mono_src: 50,
                mono_tgt: 50,
                ..SyntheticTaskSpec::default()
            },
            bpe_merges: 50,
            max_vocab: 200,
        }
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        let base = Path::new(".");
        assert!(RunConfig::from_json(r#"{"data": "d"}"#, base).is_ok());
        assert!(RunConfig::from_json(r#"{"data": "d", "extra": 1}"#, base).is_err());
        assert!(RunConfig::from_json(r#"{"data": "d", "model": {"depth": 2}}"#, base).is_err());
        assert!(RunConfig::from_json(r#"{"data": "d", "plan": {"gating": false}}"#, base).is_err());
        assert!(RunConfig::from_json(r#"{"data": "d", "trainer": {"adam": {"lr": 1}}}"#, base).is_err());
        assert!(RunConfig::from_json(r#"{"model": {}}"#, base).is_err());
    }

    #[test]
    fn invalid_values_fail_before_any_work() {
        let err = RunConfig::from_json(r#"{"data": "d", "model": {"d_model": 10, "n_heads": 4}}"#, Path::new(".")).unwrap_err();
        assert_eq!(err.code(), "E_CONFIG");
    }

    #[test]
    fn dataset_round_trip_and_vocab_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let summary = write_dataset(&tiny_spec(), &dir.path().join("data")).unwrap();
        assert_eq!((summary.train, summary.valid, summary.test), (40, 10, 10));
        let cfg = RunConfig::from_json(r#"{"data": "data"}"#, dir.path()).unwrap();
        let ds = cfg.dataset().unwrap();
        let ex = ds.examples(Split::Train).unwrap();
        assert_eq!(ex.len(), 40);
        assert_eq!(ds.tgt.decode(&ex[0].tgt), ds.lines(Split::Train, Side::Tgt).unwrap()[0]);
        assert_eq!(ds.mono(Side::Src).unwrap().len(), 50);
        let m = cfg.student_model(&ds).unwrap();
        assert_eq!((m.src_vocab, m.tgt_vocab), (summary.src_vocab, summary.tgt_vocab));

        let pinned = format!(r#"{{"data": "data", "model": {{"src_vocab": {}}}}}"#, summary.src_vocab + 1);
        let cfg = RunConfig::from_json(&pinned, dir.path()).unwrap();
        assert_eq!(cfg.student_model(&ds).unwrap_err().code(), "E_CONFIG");
    }

    #[test]
    fn teacher_architecture_follows_the_student() {
        let m = ModelConfig { enc_depth: 3, dec_depth: 2, ..ModelConfig::default() };
        let t = TeacherArch::default().config(&m, TeacherKind::Masked, Side::Src, 40);
        assert_eq!((t.d_model, t.depth, t.vocab, t.language.as_str()), (m.d_model, 3, 40, "src"));
        let t = TeacherArch { depth: Some(4), ..TeacherArch::default() }.config(&m, TeacherKind::Causal, Side::Tgt, 40);
        assert_eq!(t.depth, 4);
    }

    #[test]
    fn forced_modes() {
        let cfg = RunConfig::from_json(r#"{"data": "d"}"#, Path::new(".")).unwrap();
        assert_eq!(cfg.plan_for(Some(Mode::Baseline)), IntegrationPlan::baseline());
        let ft = cfg.plan_for(Some(Mode::Finetune));
        assert_eq!((ft.mode, ft.encoder_teacher, ft.decoder_teacher), (Mode::Finetune, TeacherChoice::Masked, TeacherChoice::Causal));
        assert_eq!(cfg.plan_for(None), IntegrationPlan::default());
        let plan = cfg.plan_for(Some(Mode::Baseline));
        let t = cfg.load_teachers(&plan).unwrap();
        assert!(t.encoder.is_none() && t.decoder.is_none());
        assert_eq!(cfg.load_teachers(&IntegrationPlan::default()).unwrap_err().code(), "E_CONFIG");
    }
}
