use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;
use sslspk_cli::stages::{self, Ctx};
use sslspk_cli::store::Store;
use sslspk_cli::{CliError, PipelineConfig};

/// Self-supervised speaker verification pipeline.
#[derive(Parser)]
#[command(name = "sslspk", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run seed; overrides the config's top-level `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `paths.out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Select {
    #[command(flatten)]
    common: Common,
    /// Model name, e.g. `untrained`, `dino`, `iter2`, `lm-3s`. Defaults to
    /// the latest.
    #[arg(long)]
    model: Option<String>,
    /// Trial list name. Defaults to the first in the config.
    #[arg(long)]
    trials: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the corpus and its trial lists.
    GenCorpus(Common),
    /// Self-distillation on unlabeled speech.
    TrainDino(Common),
    /// Cluster DINO embeddings into pseudo-labels.
    Cluster(Common),
    /// Train one AAM-softmax model on the cluster labels.
    TrainSupervised(Common),
    /// Alternate clustering and supervised training.
    Iterate(Common),
    /// Large-margin fine-tuning over the chunk length sweep.
    FinetuneLm(Common),
    /// Write cosine scores for a trial list.
    Score(Select),
    /// Score a trial list and report the EER.
    Eval(Select),
    /// EER of every stored model on every trial list.
    Report(Common),
}

fn threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("SSL_SPK_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config { key: "SSL_SPK_THREADS".into(), message: format!("expected a positive integer, got {v:?}") })?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Config { key: "SSL_SPK_THREADS".into(), message: e.to_string() })
}

fn context(c: &Common) -> Result<Ctx, CliError> {
    let mut cfg = PipelineConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.paths.out_dir = o.clone();
    }
    let store = Store::open(&cfg.paths.out_dir)?;
    Ok(Ctx { cfg, store })
}

fn run(cmd: Command) -> Result<Value, CliError> {
    threads()?;
    match cmd {
        Command::GenCorpus(c) => stages::gen_corpus(&context(&c)?),
        Command::TrainDino(c) => stages::train_dino(&context(&c)?),
        Command::Cluster(c) => stages::cluster(&context(&c)?),
        Command::TrainSupervised(c) => stages::train_supervised_stage(&context(&c)?),
        Command::Iterate(c) => stages::iterate(&context(&c)?),
        Command::FinetuneLm(c) => stages::finetune_lm(&context(&c)?),
        Command::Score(s) => stages::score(&context(&s.common)?, s.model.as_deref(), s.trials.as_deref()),
        Command::Eval(s) => stages::eval(&context(&s.common)?, s.model.as_deref(), s.trials.as_deref()),
        Command::Report(c) => stages::report(&context(&c)?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            println!("{}", e.to_json());
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
