//! `captalign`: drives the experiment pipeline one stage at a time or end to
//! end. Exit codes: 0 success, 1 runtime failure, 2 missing prerequisite
//! artifact, 3 configuration or usage error.

use std::path::PathBuf;
use std::process::ExitCode;

use captalign::error::Error;
use captalign::pipeline::{run, Command, RunConfig};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "captalign", version, about = "Cross-lingual alignment through multilingual caption contrastive training, at toy scale")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate every corpus: pretraining text, alignment items, eval and NLI sets.
    GenData(Flags),
    /// Masked-LM pretraining of the text encoder.
    Pretrain(Flags),
    /// Contrastive alignment of one variant (or the untuned baseline).
    Align(Flags),
    /// Bitext retrieval of one encoder; also dumps its eval embeddings.
    EvalRetrieval(Flags),
    /// English-trained NLI probe tested in every language.
    EvalNli(Flags),
    /// t-SNE scatter plot and clique compactness of one encoder.
    Tsne(Flags),
    /// Merge per-encoder reports into the summary tables.
    Report(Flags),
    /// Every stage for every configured variant.
    RunAll(Flags),
}

#[derive(Args)]
struct Flags {
    /// `key = value` config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Encoder for single-variant stages: untuned, eng_only, eng_pivot,
    /// multilingual or multilingual_plus_unseen.
    #[arg(long)]
    variant: Option<String>,
    /// Output directory holding every artifact.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Use only the text-to-image direction of the contrastive loss.
    #[arg(long)]
    asymmetric: bool,
    /// fixed_total or fixed_per_language.
    #[arg(long)]
    budget: Option<String>,
}

impl Cmd {
    fn split(self) -> (Command, Flags) {
        match self {
            Cmd::GenData(f) => (Command::GenData, f),
            Cmd::Pretrain(f) => (Command::Pretrain, f),
            Cmd::Align(f) => (Command::Align, f),
            Cmd::EvalRetrieval(f) => (Command::EvalRetrieval, f),
            Cmd::EvalNli(f) => (Command::EvalNli, f),
            Cmd::Tsne(f) => (Command::Tsne, f),
            Cmd::Report(f) => (Command::Report, f),
            Cmd::RunAll(f) => (Command::RunAll, f),
        }
    }
}

fn resolve(flags: &Flags) -> Result<RunConfig, Error> {
    let mut cfg = match &flags.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = flags.seed {
        cfg.seed = s;
    }
    if let Some(v) = &flags.variant {
        cfg.set("variant", v)?;
    }
    if let Some(b) = &flags.budget {
        cfg.set("budget", b)?;
    }
    if flags.asymmetric {
        cfg.symmetric = false;
    }
    Ok(cfg)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::MissingArtifact(_) => 2,
        Error::Config(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(3),
            };
        }
    };
    let (command, flags) = cli.command.split();
    let result = resolve(&flags).and_then(|cfg| run(command, &cfg, &flags.out));
    match result {
        Ok(()) => {
            eprintln!("{}: done, artifacts in {}", command.name(), flags.out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("captalign {}: {e}", command.name());
            ExitCode::from(exit_code(&e))
        }
    }
}
