//! Command-line surface: `gen` emits CRP files from a simulated PUF,
//! `attack` mounts one modeling attack on a CRP file, `sweep` drives a
//! full experiment grid from a config file, and `report` re-renders a
//! stored results log.

use std::path::PathBuf;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use puflab_core::crp::{ChallengeBatch, CrpSet, LcgParams};
use puflab_core::harness::{
    self, derive_run_seeds, derive_seed, emit_report, load_reports_jsonl, parse_size,
    save_reports_jsonl, summarize_reports, AttackKind, ExperimentConfig, PufType, ReportFormat,
};
use puflab_core::lr::{self, LrTrainConfig};
use puflab_core::nn::{self, NnTrainConfig};
use puflab_core::puf::CdcXorPuf;

#[derive(Parser)]
#[command(
    name = "puflab",
    version,
    about = "Simulate arbiter-based PUFs and mount modeling attacks on them"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a CRP dataset from a simulated PUF instance.
    Gen(GenArgs),
    /// Train one attack on a stored CRP dataset and score it.
    Attack(AttackArgs),
    /// Run a full experiment sweep and persist per-run records.
    Sweep(SweepArgs),
    /// Re-render a stored results log.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Stage count (ignored when --load-puf is given)
    #[arg(long)]
    n: Option<usize>,
    /// Component count (ignored when --load-puf is given)
    #[arg(long)]
    k: Option<usize>,
    /// Number of CRPs to generate (k/m suffixes accepted)
    #[arg(long, value_parser = cli_size)]
    count: u64,
    /// Master seed; instance and challenge seeds derive from it
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Challenge source
    #[arg(long, default_value = "uniform", value_parser = ["uniform", "lcg"])]
    source: String,
    /// Broadcast one challenge to all components (XOR-PUF mode)
    #[arg(long)]
    broadcast: bool,
    /// LCG multiplier
    #[arg(long)]
    lcg_a: Option<u64>,
    /// LCG increment
    #[arg(long)]
    lcg_g: Option<u64>,
    /// LCG initial state
    #[arg(long)]
    lcg_c0: Option<u64>,
    /// Override the derived instance seed
    #[arg(long)]
    puf_seed: Option<u64>,
    /// Override the derived challenge-stream seed
    #[arg(long)]
    challenge_seed: Option<u64>,
    /// Per-evaluation Gaussian noise level stored on the instance
    #[arg(long, default_value_t = 0.0)]
    noise_sigma: f64,
    /// Load the PUF instance from a file instead of sampling one
    #[arg(long)]
    load_puf: Option<PathBuf>,
    /// Save the PUF instance for later reuse
    #[arg(long)]
    save_puf: Option<PathBuf>,
    /// Output CRP file
    #[arg(long)]
    out: PathBuf,
    /// Also export the dataset as CSV
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct AttackArgs {
    /// Input CRP file
    #[arg(long)]
    crp: PathBuf,
    /// Attack model
    #[arg(long, value_parser = cli_attack)]
    attack: AttackKind,
    /// Master seed; split/init/shuffle seeds derive from it
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Early-stopping patience (LR attack)
    #[arg(long)]
    patience: Option<usize>,
    /// Early-stop validation accuracy (NN attack)
    #[arg(long)]
    early_stop_val_accuracy: Option<f64>,
    /// Wall-clock budget in seconds
    #[arg(long, default_value_t = 3_600)]
    wall_clock_secs: u64,
    /// Save the trained model checkpoint
    #[arg(long)]
    model_out: Option<PathBuf>,
    /// Print the run record as one JSON line instead of text
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// Experiment config file (flat key = value lines)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override: puf type (xor | cdc)
    #[arg(long, value_parser = cli_puf_type)]
    puf_type: Option<PufType>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    /// Override: number of simulated instances
    #[arg(long)]
    instances: Option<usize>,
    #[arg(long, value_parser = cli_attack)]
    attack: Option<AttackKind>,
    /// Override: comma-separated ascending training sizes (k/m suffixes)
    #[arg(long)]
    sizes: Option<String>,
    #[arg(long)]
    success_threshold: Option<f64>,
    #[arg(long, value_parser = cli_size)]
    max_crp_budget: Option<u64>,
    #[arg(long)]
    wall_clock_secs: Option<u64>,
    /// Master seed controlling all randomness
    #[arg(long)]
    seed: Option<u64>,
    /// Per-run records are written here, one JSON document per line
    #[arg(long, default_value = "results.jsonl")]
    log: PathBuf,
    /// Summary format printed to stdout
    #[arg(long, default_value = "table", value_parser = cli_format)]
    format: ReportFormat,
}

#[derive(Args)]
struct ReportArgs {
    /// Results log written by `sweep`
    #[arg(long)]
    log: PathBuf,
    #[arg(long, default_value = "table", value_parser = cli_format)]
    format: ReportFormat,
    /// Threshold used to recompute success rates
    #[arg(long, default_value_t = 0.9)]
    success_threshold: f64,
}

fn cli_size(s: &str) -> Result<u64, String> {
    parse_size(s).map_err(|e| e.to_string())
}

fn cli_attack(s: &str) -> Result<AttackKind, String> {
    s.parse().map_err(|e: puflab_core::Error| e.to_string())
}

fn cli_puf_type(s: &str) -> Result<PufType, String> {
    s.parse().map_err(|e: puflab_core::Error| e.to_string())
}

fn cli_format(s: &str) -> Result<ReportFormat, String> {
    s.parse().map_err(|e: puflab_core::Error| e.to_string())
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Gen(args) => gen(args),
        Command::Attack(args) => attack(args),
        Command::Sweep(args) => sweep(args),
        Command::Report(args) => report(args),
    }
}

fn gen(args: GenArgs) -> anyhow::Result<()> {
    let seeds = derive_run_seeds(args.seed, 0, 0, AttackKind::Lr);
    let puf = match &args.load_puf {
        Some(path) => CdcXorPuf::load(path).context("loading PUF instance")?,
        None => {
            let n = args.n.context("--n is required unless --load-puf is given")?;
            let k = args.k.context("--k is required unless --load-puf is given")?;
            CdcXorPuf::sample(
                n,
                k,
                args.puf_seed.unwrap_or(seeds.instance),
                args.noise_sigma,
            )?
        }
    };
    let (n, k) = (puf.stage_count(), puf.component_count());

    let batch = match args.source.as_str() {
        "uniform" => {
            let seed = args.challenge_seed.unwrap_or(seeds.challenges);
            if args.broadcast {
                ChallengeBatch::uniform_broadcast(n, k, args.count, seed)?
            } else {
                ChallengeBatch::uniform(n, k, args.count, seed)?
            }
        }
        "lcg" => {
            if args.broadcast {
                bail!("broadcast mode supports the uniform source only");
            }
            let params = LcgParams::new(
                args.lcg_a.unwrap_or(LcgParams::DEFAULT_A),
                args.lcg_g.unwrap_or(LcgParams::DEFAULT_G),
                args.lcg_c0.unwrap_or(1),
            );
            ChallengeBatch::lcg(n, k, args.count, &params)?
        }
        _ => unreachable!("clap restricts the source values"),
    };

    let set = CrpSet::build(&puf, &batch)?;
    set.save(&args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    if let Some(path) = &args.csv {
        set.export_csv_path(path)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &args.save_puf {
        puf.save(path)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    eprintln!(
        "wrote {} CRPs (n={n}, k={k}) to {}",
        set.len(),
        args.out.display()
    );
    Ok(())
}

fn attack(args: AttackArgs) -> anyhow::Result<()> {
    let set = CrpSet::load(&args.crp).context("loading CRP file")?;
    let split_seed = derive_seed(args.seed, &[101]);
    let init_seed = derive_seed(args.seed, &[102]);
    let shuffle_seed = derive_seed(args.seed, &[103]);
    let (train_set, val_set, test_set) = set.split(0.8, 0.01, split_seed)?;
    let budget = Duration::from_secs(args.wall_clock_secs);

    let (test_accuracy, converged, epochs, wall, stop) = match args.attack {
        AttackKind::Lr => {
            let mut config = LrTrainConfig::new(init_seed, shuffle_seed);
            config.wall_clock_budget = Some(budget);
            config.batch_size = args.batch_size;
            if let Some(v) = args.max_epochs {
                config.max_epochs = v;
            }
            if let Some(v) = args.patience {
                config.patience = v;
            }
            match lr::train(&train_set, &val_set, &config) {
                Ok((model, report)) => {
                    let accuracy = model.accuracy(&test_set)?;
                    if let Some(path) = &args.model_out {
                        model.save(path)?;
                    }
                    (
                        Some(accuracy),
                        true,
                        report.epochs,
                        report.wall_time.as_secs_f64(),
                        format!("{:?}", report.stop),
                    )
                }
                Err(lr::TrainError::Diverged { report, .. }) => (
                    None,
                    false,
                    report.epochs,
                    report.wall_time.as_secs_f64(),
                    "Diverged".to_string(),
                ),
                Err(lr::TrainError::Invalid(e)) => return Err(e.into()),
            }
        }
        AttackKind::Nn => {
            let mut config = NnTrainConfig::new(init_seed, shuffle_seed);
            config.wall_clock_budget = Some(budget);
            config.batch_size = args.batch_size;
            if let Some(v) = args.max_epochs {
                config.max_epochs = v;
            }
            if let Some(v) = args.early_stop_val_accuracy {
                config.early_stop_val_accuracy = v;
            }
            let (model, report) = nn::train(&train_set, &val_set, &config)?;
            let converged = report.converged();
            let accuracy = if converged {
                let accuracy = model.accuracy(&test_set)?;
                if let Some(path) = &args.model_out {
                    model.save(path)?;
                }
                Some(accuracy)
            } else {
                None
            };
            (
                accuracy,
                converged,
                report.epochs,
                report.wall_time.as_secs_f64(),
                format!("{:?}", report.stop),
            )
        }
    };

    if args.json {
        let value = serde_json::json!({
            "crp": args.crp.display().to_string(),
            "attack": args.attack,
            "n": set.stage_count(),
            "k": set.component_count(),
            "train": train_set.len(),
            "validation": val_set.len(),
            "test": test_set.len(),
            "test_accuracy": test_accuracy,
            "converged": converged,
            "epochs": epochs,
            "wall_time_secs": wall,
            "stop": stop,
            "seed": args.seed,
        });
        println!("{value}");
    } else {
        println!(
            "attack={} n={} k={} train={} val={} test={}",
            args.attack,
            set.stage_count(),
            set.component_count(),
            train_set.len(),
            val_set.len(),
            test_set.len()
        );
        match test_accuracy {
            Some(accuracy) => println!(
                "test accuracy {:.4} after {} epochs in {:.1} s ({})",
                accuracy, epochs, wall, stop
            ),
            None => println!("no convergence after {epochs} epochs in {wall:.1} s"),
        }
    }
    Ok(())
}

fn sweep(args: SweepArgs) -> anyhow::Result<()> {
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::load(path)
            .with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = args.puf_type {
        config.puf_type = v;
    }
    if let Some(v) = args.n {
        config.n = v;
    }
    if let Some(v) = args.k {
        config.k = v;
    }
    if let Some(v) = args.instances {
        config.instance_count = v;
    }
    if let Some(v) = args.attack {
        config.attack = v;
    }
    if let Some(sizes) = &args.sizes {
        config.set("training_sizes", sizes)?;
    }
    if let Some(v) = args.success_threshold {
        config.success_threshold = v;
    }
    if let Some(v) = args.max_crp_budget {
        config.max_crp_budget = v;
    }
    if let Some(v) = args.wall_clock_secs {
        config.wall_clock_budget_secs = v;
    }
    if let Some(v) = args.seed {
        config.master_seed = v;
    }
    config.validate()?;

    eprintln!(
        "sweep: {} n={} k={} attack={} instances={} sizes={:?} seed={}",
        config.puf_type,
        config.n,
        config.k,
        config.attack,
        config.instance_count,
        config.training_sizes,
        config.master_seed
    );
    let (summary, reports) = harness::run_sweep(&config)?;
    save_reports_jsonl(&args.log, &reports)
        .with_context(|| format!("writing {}", args.log.display()))?;
    eprintln!("wrote {} run records to {}", reports.len(), args.log.display());
    print!("{}", emit_report(&[summary], args.format));
    Ok(())
}

fn report(args: ReportArgs) -> anyhow::Result<()> {
    let reports = load_reports_jsonl(&args.log)
        .with_context(|| format!("loading {}", args.log.display()))?;
    let summaries = summarize_reports(&reports, args.success_threshold);
    print!("{}", emit_report(&summaries, args.format));
    Ok(())
}
