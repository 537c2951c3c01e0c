//! Command-line entry point: train, eval, analyze, ablate, gradcheck, and
//! gen-data over the Conv-LoRA desk-scale models.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use convlora::harness::{
    analyze, evaluate, export_dataset, gen_synthetic, gradcheck_suite, run_suite, train,
    ConfigMap, RunConfig, Split, Suite,
};

#[derive(Parser)]
#[command(name = "convlora", version, about = "Low-rank adapters with MoE-gated convolutional experts on a miniature ViT segmentation model")]
struct Cli {
    #[command(subcommand)]
    command: Commands,
}

/// Flags shared by every run-shaped subcommand; each overrides the config
/// file value of the same name.
#[derive(Args, Clone, Default)]
struct RunFlags {
    /// Structured-text config file (`[section]` + `key = value`).
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Adapter/freeze variant: decoder-only | lora | conv-lora | multi-scale
    /// | single-expert:S | full | from-scratch.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for all artifacts.
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    experts: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
}

#[derive(Subcommand)]
enum Commands {
    /// Train a model and write metrics, gate log, and the best checkpoint.
    Train {
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Evaluate a stored checkpoint on one split.
    Eval {
        #[command(flatten)]
        flags: RunFlags,
        /// Checkpoint directory (contains params.bin + manifest.txt).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split to evaluate: train | val | test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Attention-distance, spectrum, and utilization reports for a checkpoint.
    Analyze {
        #[command(flatten)]
        flags: RunFlags,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of test images to push through the instruments.
        #[arg(long, default_value_t = 100)]
        images: usize,
    },
    /// Run an ablation suite.
    Ablate {
        #[command(flatten)]
        flags: RunFlags,
        /// moe-vs-multiscale | scale-sweep | rank-sweep.
        #[arg(long)]
        suite: String,
    },
    /// Finite-difference audit of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate a synthetic dataset and dump it as PGM images plus CSV.
    GenData {
        #[command(flatten)]
        flags: RunFlags,
        /// Split stream to draw: train | val | test.
        #[arg(long, default_value = "train")]
        split: String,
    },
}

fn build_config(flags: &RunFlags) -> convlora::Result<RunConfig> {
    let mut map = match &flags.config {
        Some(path) => ConfigMap::load(path)?,
        None => ConfigMap::default(),
    };
    if let Some(v) = &flags.variant {
        map.set("run.variant", v);
    }
    if let Some(v) = flags.seed {
        map.set("run.seed", v);
    }
    if let Some(v) = &flags.out {
        map.set("run.out", v.display());
    }
    if let Some(v) = flags.epochs {
        map.set("optim.epochs", v);
    }
    if let Some(v) = flags.lr {
        map.set("optim.lr", v);
    }
    if let Some(v) = flags.rank {
        map.set("adapter.rank", v);
    }
    if let Some(v) = flags.experts {
        map.set("adapter.experts", v);
    }
    if let Some(v) = flags.top_k {
        map.set("adapter.top_k", v);
    }
    if let Some(v) = flags.batch {
        map.set("optim.batch", v);
    }
    RunConfig::from_map(&map)
}

fn parse_split(s: &str) -> convlora::Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(convlora::Error::Config(format!(
            "unknown split `{s}` (expected train | val | test)"
        ))),
    }
}

fn run(cli: Cli) -> convlora::Result<()> {
    match cli.command {
        Commands::Train { flags } => {
            let cfg = build_config(&flags)?;
            let s = train(&cfg)?;
            println!(
                "run {} finished: best val {:.4} (epoch {}), test {:.4}; artifacts in {}",
                s.run_id,
                s.best_val,
                s.best_epoch,
                s.test_main,
                cfg.out.display()
            );
        }
        Commands::Eval {
            flags,
            checkpoint,
            split,
        } => {
            let cfg = build_config(&flags)?;
            let split = parse_split(&split)?;
            let out = evaluate(&cfg, &checkpoint, split, &cfg.out.clone())?;
            for (name, v) in &out.metrics {
                println!("{name} = {v:.6}");
            }
        }
        Commands::Analyze {
            flags,
            checkpoint,
            images,
        } => {
            let cfg = build_config(&flags)?;
            let report = analyze(&cfg, &checkpoint, images)?;
            println!(
                "wrote attn_distance.csv, spectrum.csv, utilization.csv to {}",
                cfg.out.display()
            );
            for (li, heads) in report.attn.iter().enumerate() {
                let mean: f64 = heads.iter().sum::<f64>() / heads.len() as f64;
                println!("layer {li}: mean attention distance {mean:.4}");
            }
        }
        Commands::Ablate { flags, suite } => {
            let cfg = build_config(&flags)?;
            let suite = Suite::parse(&suite)?;
            let rows = run_suite(suite, &cfg, &cfg.out.clone())?;
            for row in &rows {
                println!("{row}");
            }
        }
        Commands::Gradcheck { seed } => {
            let results = gradcheck_suite(seed)?;
            let mut worst: f64 = 0.0;
            for (name, err) in &results {
                println!("{name:<20} max rel err {err:.3e}");
                worst = worst.max(*err);
            }
            if worst >= 1e-4 {
                return Err(convlora::Error::OracleInvalid(format!(
                    "gradient check failed: worst rel err {worst:.3e} >= 1e-4"
                )));
            }
            println!("all ops pass (worst {worst:.3e})");
        }
        Commands::GenData { flags, split } => {
            let cfg = build_config(&flags)?;
            let split = parse_split(&split)?;
            let ds = gen_synthetic(&cfg.data, cfg.seed, split)?;
            export_dataset(&ds, &cfg.out)?;
            println!(
                "wrote {} images to {}",
                ds.samples.len(),
                cfg.out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse(); // clap exits with 2 on usage errors
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
