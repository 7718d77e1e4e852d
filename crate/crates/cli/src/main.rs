//! `apt`: data generation, teacher pre-training, student training,
//! translation, evaluation, gradient checks and ablation suites.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use apt_core::strategy::Mode;

#[derive(Parser)]
#[command(name = "apt", version, about = "Desk-scale NMT with knowledge from pre-trained teachers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Objective {
    Causal,
    Masked,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Language {
    Src,
    Tgt,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Baseline,
    Finetune,
    Apt,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Baseline => Mode::Baseline,
            ModeArg::Finetune => Mode::Finetune,
            ModeArg::Apt => Mode::Apt,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum SuiteArg {
    Table3,
    Table5,
    Table6,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpora and tokenizers.
    Datagen {
        /// JSON task specification.
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train a teacher language model on monolingual text.
    Pretrain {
        config: PathBuf,
        /// Monolingual corpus; defaults to the dataset's mono file for the language.
        corpus: Option<PathBuf>,
        #[arg(long, value_enum)]
        objective: Objective,
        /// Defaults to src for masked and tgt for causal teachers.
        #[arg(long, value_enum)]
        language: Option<Language>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a student translation model.
    Train {
        config: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Translate a file of source sentences.
    Translate {
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 4)]
        beam: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Corpus BLEU of a hypothesis file against a reference file.
    Evaluate {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Finite-difference gradient check of the baseline and full plans.
    Gradcheck {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every cell of an ablation suite under one seed and budget.
    Ablate {
        config: PathBuf,
        #[arg(long, value_enum)]
        suite: SuiteArg,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Datagen { spec, out } => commands::datagen(&spec, &out),
        Command::Pretrain { config, corpus, objective, language, out } => {
            commands::pretrain(&config, corpus.as_deref(), objective, language, &out)
        }
        Command::Train { config, mode, out, metrics, seed } => {
            commands::train(&config, mode.map(Mode::from), &out, &metrics, seed)
        }
        Command::Translate { ckpt, config, input, beam, out, max_len } => {
            commands::translate(&ckpt, &config, &input, beam, &out, max_len)
        }
        Command::Evaluate { hyp, reference } => commands::evaluate(&hyp, &reference),
        Command::Gradcheck { config, out } => commands::gradcheck(&config, out.as_deref()),
        Command::Ablate { config, suite, out } => commands::ablate(&config, suite, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}: {}", e.code, e.message.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
