use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mmfuse::config::{ConfigError, RunConfig};
use mmfuse::harness::{self, HResult, HarnessError};

/// Early-fusion video-grounded dialogue: synthetic corpus, training, evaluation and ablations.
#[derive(Parser, Debug)]
#[command(name = "mmfuse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus (train/val/test) into --out.
    Corpus(Common),
    /// Train on --corpus, writing the loss log and checkpoints into --out.
    Train(Common),
    /// Score --checkpoint (or the gold references with --gold) on the test split.
    Evaluate(Common),
    /// Decode the response for one instance id, e.g. test00003/1.
    Generate {
        id: String,
        #[command(flatten)]
        common: Common,
    },
    /// Train and evaluate full, spatial_only and temporal_only across the configured seeds.
    Ablate(Common),
    /// Finite-difference check of every parameter gradient in 64-bit mode.
    Gradcheck {
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

#[derive(Args, Debug, Default)]
struct Common {
    /// Flat key=value config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// full, spatial_only or temporal_only.
    #[arg(long)]
    ablation: Option<String>,
    /// Comma list from gen,mlm,mvm,mvt.
    #[arg(long)]
    objectives: Option<String>,
    /// greedy or top_k.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    max_steps: Option<u64>,
    /// With evaluate: score the first gold reference of each instance against itself.
    #[arg(long)]
    gold: bool,
    /// Extra key=value overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn resolve(&self) -> HResult<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigError::new("config", format!("{}: {e}", path.display())))?;
            cfg.apply_text(&text)?;
        }
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let overrides = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("corpus", path(&self.corpus)),
            ("checkpoint", path(&self.checkpoint)),
            ("out", path(&self.out)),
            ("ablation", self.ablation.clone()),
            ("objectives", self.objectives.clone()),
            ("strategy", self.strategy.clone()),
            ("k", self.k.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("max_steps", self.max_steps.map(|v| v.to_string())),
            ("gold", self.gold.then(|| "true".to_string())),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| ConfigError::new("--set", format!("expected KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn configure_threads() -> HResult<()> {
    let Ok(v) = std::env::var("MMFUSE_THREADS") else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| ConfigError::new("MMFUSE_THREADS", format!("expected a positive integer, got {v:?}")))?;
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn run(cli: Cli) -> HResult<()> {
    configure_threads()?;
    match cli.command {
        Command::Corpus(c) => {
            let cfg = c.resolve()?;
            harness::cmd_corpus(&cfg)?;
            println!("corpus written to {}", cfg.out.as_deref().unwrap_or_else(|| ".".as_ref()).display());
        }
        Command::Train(c) => {
            let s = harness::cmd_train(&c.resolve()?)?;
            println!("trained {} steps", s.steps);
            println!("final checkpoint: {}", s.final_checkpoint.display());
            if let (Some(p), Some(l)) = (&s.best_checkpoint, s.best_val_loss) {
                println!("best checkpoint: {} (validation loss {l:.6})", p.display());
            }
        }
        Command::Evaluate(c) => {
            let (cfg, outcome) = harness::cmd_evaluate(&c.resolve()?)?;
            print!("{}", harness::report_text(&cfg, &outcome));
        }
        Command::Generate { id, common } => {
            println!("{}", harness::cmd_generate(&common.resolve()?, &id)?);
        }
        Command::Ablate(c) => {
            print!("{}", harness::cmd_ablate(&c.resolve()?)?.to_text());
        }
        Command::Gradcheck { inject_fault } => {
            let result = harness::cmd_gradcheck(inject_fault);
            match &result {
                Ok(r) => println!(
                    "gradcheck PASS: {} elements, max relative error {:.3e} at {}",
                    r.checked, r.max_rel_err, r.worst
                ),
                Err(HarnessError::Gradcheck { .. }) => println!("gradcheck FAIL"),
                Err(_) => {}
            }
            result?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
