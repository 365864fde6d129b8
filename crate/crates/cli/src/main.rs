use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use tdeed_cli::commands::{cmd_analyze, cmd_eval, cmd_gen, cmd_train};
use tdeed_cli::config::{bad, exit_code, load_config, parse_config, AnalysisKind, RunConfig, Study};
use tdeed_cli::study::cmd_ablate;

#[derive(Parser)]
#[command(name = "tdeed", about = "Precise event spotting on synthetic videos")]
struct Cli {
    /// TOML run config. Defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic train/val/test splits.
    Gen,
    /// Train a model.
    Train {
        /// Continue from the last saved training state.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint (or a predictions file) on the test split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Run an ablation study.
    Ablate {
        /// temporal_module, skip_variant, head_mode, pyramid, shift_module,
        /// clip_length or postproc. Defaults to `ablate.study`.
        #[arg(long)]
        study: Option<Study>,
    },
    /// Feature analysis of a trained checkpoint.
    Analyze {
        /// discriminability or pyramid_layers. Defaults to `analyze.kind`.
        #[arg(long)]
        kind: Option<AnalysisKind>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn config(cli: &Cli) -> Result<RunConfig> {
    match &cli.config {
        Some(p) => load_config(p, &cli.overrides),
        None => parse_config("", &cli.overrides).and_then(RunConfig::resolve),
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = config(&cli)?;
    match cli.cmd {
        Cmd::Gen => {
            let dir = cmd_gen(&cfg)?;
            println!("wrote dataset to {}", dir.display());
        }
        Cmd::Train { resume } => {
            let dir = cmd_train(&cfg, resume)?;
            println!("wrote {}", dir.display());
        }
        Cmd::Eval { checkpoint, predictions } => {
            let dir = cmd_eval(&cfg, checkpoint.as_deref(), predictions.as_deref())?;
            print!("{}", std::fs::read_to_string(dir.join("results.csv"))?);
        }
        Cmd::Ablate { study } => {
            let Some(study) = study.or(cfg.ablate.study) else {
                return bad("no study given; pass --study or set ablate.study");
            };
            let (dir, _) = cmd_ablate(&cfg, study, &mut |line| eprintln!("{line}"))?;
            print!("{}", std::fs::read_to_string(dir.join(format!("{}.csv", study.name())))?);
        }
        Cmd::Analyze { kind, checkpoint } => {
            let Some(kind) = kind.or(cfg.analyze.kind) else {
                return bad("no analysis kind given; pass --kind or set analyze.kind");
            };
            let dir = cmd_analyze(&cfg, kind, checkpoint.as_deref())?;
            println!("wrote {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
