use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde_json::json;

use apt_core::checkpoint::Checkpoint;
use apt_core::config::{write_dataset, DatagenSpec, RunConfig, Side, Split};
use apt_core::data::{read_lines, write_lines};
use apt_core::eval::{bleu_line_stats, Translator};
use apt_core::pretrain::{pretrain_causal, pretrain_masked};
use apt_core::strategy::{suite_cells, IntegrationPlan, Mode, PlanSide, Suite};
use apt_core::trainer::{self, load_student, StudentHeader};
use apt_core::AptError;

use crate::{Language, Objective, SuiteArg};

#[derive(Debug)]
pub struct CliError {
    pub code: &'static str,
    pub message: String,
}

impl From<AptError> for CliError {
    fn from(e: AptError) -> Self {
        CliError { code: e.code(), message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        AptError::from(e).into()
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        AptError::from(e).into()
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError { code: "E_IO", message: e.to_string() }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Worker count from `APT_THREADS`, if set.
fn env_threads() -> Result<Option<usize>> {
    match std::env::var("APT_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(CliError { code: "E_CONFIG", message: format!("APT_THREADS must be a positive integer, got `{v}`") }),
        },
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(n) = env_threads()? {
        cfg.trainer.threads = n;
    }
    Ok(cfg)
}

pub fn datagen(spec: &Path, out: &Path) -> Result<()> {
    let spec: DatagenSpec = serde_json::from_str(&fs::read_to_string(spec)?)?;
    let summary = write_dataset(&spec, out)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

pub fn pretrain(config: &Path, corpus: Option<&Path>, objective: Objective, language: Option<Language>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let ds = cfg.dataset()?;
    let side = match (language, objective) {
        (Some(Language::Src), _) | (None, Objective::Masked) => Side::Src,
        (Some(Language::Tgt), _) | (None, Objective::Causal) => Side::Tgt,
    };
    let kind = match objective {
        Objective::Causal => apt_core::pretrain::TeacherKind::Causal,
        Objective::Masked => apt_core::pretrain::TeacherKind::Masked,
    };
    let teacher = cfg.teacher_config(&ds, kind, side)?;
    let sentences = match corpus {
        Some(p) => {
            let tok = ds.tokenizer(side);
            read_lines(p)?.iter().map(|l| tok.encode(l)).collect()
        }
        None => ds.mono(side)?,
    };
    let start = Instant::now();
    let outcome = match objective {
        Objective::Causal => pretrain_causal(&sentences, &teacher, &cfg.pretrain, cfg.seed)?,
        Objective::Masked => pretrain_masked(&sentences, &teacher, &cfg.pretrain, cfg.seed)?,
    };
    outcome.checkpoint()?.save(out)?;
    println!(
        "{}",
        json!({
            "kind": kind.name(),
            "language": side.name(),
            "epochs": outcome.epochs,
            "checksum": outcome.model.checksum(),
            "seconds": start.elapsed().as_secs_f64(),
        })
    );
    Ok(())
}

pub fn train(config: &Path, mode: Option<Mode>, out: &Path, metrics: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config)?;
    let seed = seed.unwrap_or(cfg.seed);
    let ds = cfg.dataset()?;
    let model = cfg.student_model(&ds)?;
    let plan = cfg.plan_for(mode);
    let teachers = cfg.load_teachers(&plan)?;
    let train_set = ds.examples(Split::Train)?;
    let valid_set = ds.examples(Split::Valid)?;
    let mut log = BufWriter::new(File::create(metrics)?);
    let start = Instant::now();
    let outcome = trainer::train(&model, &plan, teachers.view(), &train_set, &valid_set, &cfg.trainer, seed, &mut log, Some(out))?;
    log.flush()?;
    println!(
        "{}",
        json!({
            "best_epoch": outcome.best_epoch,
            "best_bleu": outcome.best_bleu,
            "steps": outcome.steps.len(),
            "skipped_steps": outcome.skipped_steps,
            "probes": outcome.probes,
            "seconds": start.elapsed().as_secs_f64(),
        })
    );
    Ok(())
}

/// The part of a training plan that matters at inference: only fused
/// teachers are consulted while decoding.
fn inference_plan(plan: &IntegrationPlan) -> IntegrationPlan {
    if plan.fusion_side == PlanSide::None {
        return IntegrationPlan::baseline();
    }
    IntegrationPlan { mode: Mode::Apt, distill_side: PlanSide::None, ..plan.clone() }
}

pub fn translate(ckpt: &Path, config: &Path, input: &Path, beam: usize, out: &Path, max_len: Option<usize>) -> Result<()> {
    if beam == 0 {
        return Err(CliError { code: "E_CONFIG", message: "--beam must be at least 1".into() });
    }
    let cfg = load_config(config)?;
    let ds = cfg.dataset()?;
    let ckpt = Checkpoint::load(ckpt)?;
    let header: StudentHeader = serde_json::from_value(ckpt.header.config.clone())?;
    let teachers = cfg.load_teachers(&inference_plan(&header.plan))?;
    let (store, student, header) = load_student(&ckpt, teachers.view())?;
    let sources: Vec<Vec<usize>> = read_lines(input)?.iter().map(|l| ds.src.encode(l)).collect();
    let translator = Translator { student: &student, store: &store, teachers: teachers.view() };
    let hyps = translator.translate_all(&sources, beam, max_len.unwrap_or(header.model.max_len), cfg.trainer.threads)?;
    let lines: Vec<String> = hyps.iter().map(|h| ds.tgt.decode(h)).collect();
    write_lines(out, &lines)?;
    Ok(())
}

pub fn evaluate(hyp: &Path, reference: &Path) -> Result<()> {
    let stats = bleu_line_stats(&read_lines(hyp)?, &read_lines(reference)?)?;
    let score = stats.score();
    println!("BLEU = {score:.2}");
    println!(
        "{}",
        json!({
            "bleu": score,
            "precisions": (1..=4).map(|n| stats.precision(n)).collect::<Vec<_>>(),
            "brevity_penalty": stats.brevity_penalty(),
            "hyp_len": stats.hyp_len,
            "ref_len": stats.ref_len,
        })
    );
    Ok(())
}

pub fn gradcheck(config: &Path, out: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let full = IntegrationPlan { fusion_side: PlanSide::Both, distill_side: PlanSide::Both, ..IntegrationPlan::default() };
    let mut plans = vec![("baseline", IntegrationPlan::baseline()), ("full", full)];
    if plans.iter().all(|(_, p)| *p != cfg.plan) {
        plans.push(("config", cfg.plan.clone()));
    }
    let mut reports = Vec::new();
    let mut failed = Vec::new();
    for (name, plan) in &plans {
        let start = Instant::now();
        let r = trainer::gradcheck(plan, &cfg.gradcheck.model, cfg.seed, &cfg.gradcheck.check)?;
        println!(
            "{}",
            json!({
                "plan": name,
                "passed": r.passed,
                "checked": r.checked,
                "skipped_kinks": r.skipped_kinks,
                "max_rel_error": r.max_rel_error,
                "teacher_in_gradients": r.teacher_in_gradients,
                "seconds": start.elapsed().as_secs_f64(),
            })
        );
        if !r.passed {
            failed.push(*name);
        }
        reports.push(json!({ "plan": name, "report": r }));
    }
    if let Some(path) = out {
        fs::write(path, serde_json::to_string_pretty(&reports)?)?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError { code: "E_GRADCHECK", message: format!("gradient check failed for {}", failed.join(", ")) })
    }
}

fn slug(name: &str) -> String {
    let mut s = String::new();
    for c in name.chars() {
        if c.is_ascii_alphanumeric() {
            s.push(c.to_ascii_lowercase());
        } else if !s.ends_with('_') {
            s.push('_');
        }
    }
    s.trim_matches('_').to_string()
}

pub fn ablate(config: &Path, suite: SuiteArg, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let suite = match suite {
        SuiteArg::Table3 => Suite::Table3,
        SuiteArg::Table5 => Suite::Table5,
        SuiteArg::Table6 => Suite::Table6,
    };
    let ds = cfg.dataset()?;
    let model = cfg.student_model(&ds)?;
    let train_set = ds.examples(Split::Train)?;
    let valid_set = ds.examples(Split::Valid)?;
    fs::create_dir_all(out)?;
    let mut summary = csv::Writer::from_path(out.join("summary.csv"))?;
    summary.write_record(["cell_name", "bleu", "delta_vs_baseline"])?;
    let cells = suite_cells(suite, &cfg.plan_for(Some(Mode::Apt)));
    let mut baseline: Option<f64> = None;
    let mut failed = 0usize;
    for (i, cell) in cells.iter().enumerate() {
        let stem = format!("{i:02}_{}", slug(&cell.name));
        let start = Instant::now();
        let run = || -> Result<f64> {
            let teachers = cfg.load_teachers(&cell.plan)?;
            let mut log = BufWriter::new(File::create(out.join(format!("{stem}.jsonl")))?);
            let o = trainer::train(&model, &cell.plan, teachers.view(), &train_set, &valid_set, &cfg.trainer, cfg.seed, &mut log, None)?;
            log.flush()?;
            Ok(o.best_bleu)
        };
        match run() {
            Ok(bleu) => {
                if i == 0 {
                    baseline = Some(bleu);
                }
                let delta = baseline.map(|b| bleu - b);
                summary.write_record([cell.name.clone(), bleu.to_string(), delta.map(|d| d.to_string()).unwrap_or_default()])?;
                println!("{}", json!({"cell": cell.name, "bleu": bleu, "delta_vs_baseline": delta, "seconds": start.elapsed().as_secs_f64()}));
            }
            Err(e) => {
                failed += 1;
                let line = format!("{}: {}", e.code, e.message);
                eprintln!("cell `{}` failed: {line}", cell.name);
                fs::write(out.join(format!("{stem}.error")), format!("{line}\n"))?;
                summary.write_record([cell.name.as_str(), "", ""])?;
            }
        }
        summary.flush()?;
    }
    if failed > 0 {
        return Err(CliError { code: "E_ABLATE", message: format!("{failed} of {} cells failed", cells.len()) });
    }
    Ok(())
}
