use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use nsbc::cli::{self, EvalInputs, SpecSource};
use nsbc::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "nsbc",
    about = "Extract rule-set surrogates from small CNNs and retrain away concept-level biases"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with segmentation masks.
    Gen {
        /// Scene spec TOML file.
        #[arg(long, conflicts_with = "builtin")]
        spec: Option<PathBuf>,
        /// Built-in scene: `bias-suite`.
        #[arg(long)]
        builtin: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a CNN on a generated dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Extract and label the rule-set of a checkpoint.
    Extract {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Retrain a checkpoint against concept constraints.
    Correct {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        constraints: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a rule-set (optionally against a baseline) on a checkpoint.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        ruleset: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        constraints: Option<PathBuf>,
        #[arg(long)]
        baseline_ruleset: Option<PathBuf>,
        #[arg(long)]
        baseline_labels: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_config(path: &PathBuf, seed: Option<u64>) -> anyhow::Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config `{}`", path.display()))?;
    let mut cfg = RunConfig::parse_toml(&text)?;
    cfg.resolve_seed(seed);
    Ok(cfg)
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Gen { spec, builtin, out, seed } => {
            let source = match (spec, builtin.as_deref()) {
                (Some(path), None) => SpecSource::File(path),
                (None, Some("bias-suite")) => SpecSource::BuiltinBiasSuite,
                (None, Some(other)) => bail!("unknown builtin `{other}` (expected `bias-suite`)"),
                (None, None) => bail!("gen needs --spec <file> or --builtin bias-suite"),
                (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
            };
            cli::cmd_gen(source, &out, seed)?;
        }
        Command::Train { config, out, seed } => {
            cli::cmd_train(&load_config(&config, seed)?, &out)?;
        }
        Command::Extract { config, checkpoint, out, seed } => {
            cli::cmd_extract(&load_config(&config, seed)?, &checkpoint, &out)?;
        }
        Command::Correct { config, checkpoint, constraints, out, seed } => {
            cli::cmd_correct(&load_config(&config, seed)?, &checkpoint, constraints.as_deref(), &out)?;
        }
        Command::Eval {
            config,
            checkpoint,
            ruleset,
            labels,
            constraints,
            baseline_ruleset,
            baseline_labels,
            out,
            seed,
        } => {
            let inputs = EvalInputs {
                ruleset: &ruleset,
                labels: labels.as_deref(),
                constraints: constraints.as_deref(),
                baseline_ruleset: baseline_ruleset.as_deref(),
                baseline_labels: baseline_labels.as_deref(),
            };
            cli::cmd_eval(&load_config(&config, seed)?, &checkpoint, &inputs, &out)?;
        }
    }
    Ok(())
}
