use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "advseq", version, about = "Robust translation training with adversarial inputs")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Configuration overrides, `key.path=value`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain the source and target language models.
    PretrainLm,
    /// Train the translation model; robust or clean per `train.switches`.
    Train {
        /// Start from these models (usually the pretrain-lm output).
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Perturb one source sentence against a trained model.
    Attack {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sentence: String,
        /// Reference translation; the model's own output when omitted.
        #[arg(long)]
        reference: Option<String>,
    },
    /// Write a noisy copy of a source file.
    Noise {
        #[arg(long)]
        input: PathBuf,
        /// Models providing embeddings and the scoring LM.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// BLEU of two files, or the robustness curve of a checkpoint.
    Eval {
        #[arg(long, requires = "reference")]
        hyp: Option<PathBuf>,
        #[arg(long = "ref", id = "reference")]
        reference: Option<PathBuf>,
        #[arg(long, conflicts_with = "hyp")]
        checkpoint: Option<PathBuf>,
        /// Models used to build the noisy test sets; defaults to `--checkpoint`.
        #[arg(long)]
        noise_checkpoint: Option<PathBuf>,
    },
    /// Train several configurations and compare validation BLEU.
    Ablate {
        #[arg(long, value_enum)]
        grid: Grid,
        #[arg(long)]
        init: Option<PathBuf>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum Grid {
    /// The six loss-component rows.
    Components,
    /// Every pair of `eval.gamma_values`.
    Gamma,
}

fn exit_code(e: &advseq_core::Error) -> u8 {
    use advseq_core::Error::*;
    match e {
        Io { .. } => 3,
        Config(_) => 4,
        Format(_) | Shape { .. } | Vocabulary { .. } => 5,
        Data(_) | Length { .. } | DegenerateInput(_) => 6,
        Diverged { .. } => 7,
        Contract(_) => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::PretrainLm => commands::pretrain_lm(&cli.common),
        Command::Train { init } => commands::train(&cli.common, init.as_deref()),
        Command::Attack {
            checkpoint,
            sentence,
            reference,
        } => commands::attack(&cli.common, &checkpoint, &sentence, reference.as_deref()),
        Command::Noise { input, checkpoint } => commands::noise(&cli.common, &input, &checkpoint),
        Command::Eval {
            hyp,
            reference,
            checkpoint,
            noise_checkpoint,
        } => match (hyp, reference, checkpoint) {
            (Some(h), Some(r), None) => commands::eval_files(&h, &r),
            (None, None, Some(c)) => commands::eval_checkpoint(&cli.common, &c, noise_checkpoint.as_deref()),
            _ => Err(advseq_core::Error::Config(
                "eval needs either --hyp and --ref, or --checkpoint".into(),
            )),
        },
        Command::Ablate { grid, init } => commands::ablate(&cli.common, grid, init.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={} msg={:?}", e.kind(), msg);
            ExitCode::from(exit_code(&e))
        }
    }
}
