use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cpcr::data::SplitTag;
use cpcr_cli::commands::{cmd_eval, cmd_generate, cmd_train, selftest_checks};
use cpcr_cli::{Profile, RunConfig};

#[derive(Parser)]
#[command(
    name = "cpcr",
    version,
    about = "Dual-branch pyramid network with cross-pyramid consistency training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML); replaces the profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Bundled configuration used when --config is absent.
    #[arg(long, value_enum, default_value = "desk")]
    profile: Profile,
    /// Overrides the training seed (the synthetic seed for `generate`).
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the labeled fraction of training patients.
    #[arg(long)]
    labeled_ratio: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalSplit {
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic phantom archive and its split manifest.
    Generate(Common),
    /// Train and write checkpoints, logs and a test report.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides the iteration count.
        #[arg(long)]
        iterations: Option<u64>,
    },
    /// Evaluate a checkpoint on the validation or test patients.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: EvalSplit,
        /// Recompute distance metrics by exhaustive search and require agreement.
        #[arg(long)]
        oracle: bool,
    },
    /// Check closed-form loss values and the metric oracle.
    Selftest,
}

fn resolve(common: &Common) -> cpcr::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::profile(common.profile),
    };
    if let Some(r) = common.labeled_ratio {
        cfg.labeled_ratio = r;
    }
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn workers() -> usize {
    std::env::var("CPCR_NUM_WORKERS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(0)
}

fn run(cli: Cli) -> cpcr::Result<()> {
    match cli.command {
        Command::Generate(common) => {
            let mut cfg = resolve(&common)?;
            if let (Some(seed), Some(spec)) = (common.seed, cfg.synthetic.as_mut()) {
                spec.seed = seed;
            }
            cmd_generate(&cfg, common.out.as_deref())?;
        }
        Command::Train {
            common,
            resume,
            iterations,
        } => {
            let mut cfg = resolve(&common)?;
            if let Some(out) = &common.out {
                cfg.out_dir = out.clone();
            }
            if let Some(n) = iterations {
                cfg.train.max_iterations = n;
                cfg.validate()?;
            }
            cmd_train(&cfg, resume.as_deref(), workers())?;
        }
        Command::Eval {
            common,
            checkpoint,
            split,
            oracle,
        } => {
            let cfg = resolve(&common)?;
            let tag = match split {
                EvalSplit::Val => SplitTag::Val,
                EvalSplit::Test => SplitTag::Test,
            };
            cmd_eval(
                &cfg,
                &checkpoint,
                tag,
                common.out.as_deref(),
                oracle,
                common.config.is_some(),
            )?;
        }
        Command::Selftest => {
            let checks = selftest_checks()?;
            let failed: Vec<_> = checks.iter().filter(|c| !c.passed).collect();
            for c in &checks {
                println!(
                    "{} {}: {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                );
            }
            if !failed.is_empty() {
                let names: Vec<&str> = failed.iter().map(|c| c.name).collect();
                return Err(cpcr::Error::Argument(format!(
                    "self-test failed: {}",
                    names.join(", ")
                )));
            }
            println!("all {} checks passed", checks.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    cpcr_cli::tune_allocator();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
