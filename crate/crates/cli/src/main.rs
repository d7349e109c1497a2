//! `ekg`: drive pruning runs from a configuration file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ekg::data::make_splits;
use ekg::harness::pipeline::{cn_profile, landscape_batches, loss_grid};
use ekg::harness::report::{default_sweep_rates, sweep, sweep_csv};
use ekg::harness::{load_run_config, report, run_pipeline, Phase, Pipeline, RunConfig, RunLayout};
use ekg::landscape::{correlation_study, write_heatmap, CorrelationConfig, TraversalMode};
use ekg::netcore::load_checkpoint;

#[derive(Parser)]
#[command(name = "ekg", version, about = "Filter pruning guided by ensemble knowledge")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain (or import), split and search for a sub-network.
    Prune {
        #[arg(long)]
        config: PathBuf,
        /// FLOPs reduction goal, overriding the configuration.
        #[arg(long)]
        target_rate: Option<f64>,
    },
    /// Memory-bank operations.
    Membank {
        #[command(subcommand)]
        command: MembankCommand,
    },
    /// Fine-tune the pruned network of a run.
    Finetune {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        kd_weight: Option<f64>,
        /// Epoch count; learning-rate milestones are rescaled to match.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Test-set metrics of the fine-tuned network.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
    },
    /// Loss-landscape analysis.
    Landscape {
        #[command(subcommand)]
        command: LandscapeCommand,
    },
    /// Every phase of a run, skipping the ones already complete.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Table and plots over run directories.
    Report {
        /// Run directories; may be empty.
        #[arg(long, num_args = 0..)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Full runs over target rates and seeds with mean and std per rate.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated rates; defaults to 0.25 through 0.70.
        #[arg(long, value_delimiter = ',')]
        rates: Vec<f64>,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum MembankCommand {
    /// Select teachers from the search interims and store their outputs.
    Build {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        k: Option<usize>,
    },
}

#[derive(Args)]
struct Source {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run configuration for the data; found next to the checkpoint when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum LandscapeCommand {
    /// Condition numbers along the gradient direction.
    Cn {
        #[command(flatten)]
        source: Source,
        /// Second directional derivative instead of full-space eigenvalues.
        #[arg(long)]
        directional: bool,
        #[arg(long)]
        points: Option<usize>,
        #[arg(long)]
        scale: Option<f64>,
        /// CSV output; printed to stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Two-dimensional loss slice saved as CSV and PNG heat map.
    Grid {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        resolution: usize,
        #[arg(long)]
        extent: Option<f64>,
        #[arg(long, default_value = "grid")]
        out: PathBuf,
    },
    /// Correlation of validation loss and CN with potential loss over random sub-networks.
    Correlate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        samples: usize,
        #[arg(long)]
        trials: usize,
        /// Fine-tuning epochs per sample; the configured schedule otherwise.
        #[arg(long)]
        epochs: Option<usize>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Prune { config, target_rate } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(t) = target_rate {
                cfg.search.target_rate = t;
            }
            let mut p = Pipeline::open(cfg)?;
            p.run(Phase::Search)?;
            println!("{}", std::fs::read_to_string(p.layout().search_summary())?);
        }
        Command::Membank { command: MembankCommand::Build { run, k } } => {
            let mut cfg = load_run_config(&run)?;
            if let Some(k) = k {
                cfg.membank.k = k;
            }
            Pipeline::open(cfg)?.run(Phase::Membank)?;
            println!("{}", std::fs::read_to_string(RunLayout::new(&run).membank().join("manifest.json"))?);
        }
        Command::Finetune { run, kd_weight, epochs } => {
            let mut cfg = load_run_config(&run)?;
            if let Some(w) = kd_weight {
                cfg.finetune.kd_weight = w;
            }
            if let Some(n) = epochs {
                cfg.finetune.lr.milestones = rescale_milestones(&cfg.finetune.lr.milestones, cfg.finetune.epochs, n);
                cfg.finetune.epochs = n;
            }
            Pipeline::open(cfg)?.run(Phase::Finetune)?;
            print!("{}", std::fs::read_to_string(RunLayout::new(&run).finetune_metrics())?);
        }
        Command::Evaluate { run } => {
            Pipeline::open(load_run_config(&run)?)?.run(Phase::Evaluate)?;
            println!("{}", std::fs::read_to_string(RunLayout::new(&run).eval_metrics())?);
        }
        Command::Landscape { command } => landscape(command)?,
        Command::Run { config } => {
            let m = run_pipeline(RunConfig::load(&config)?)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
        }
        Command::Report { runs, out } => {
            let t = report(&runs, &out)?;
            print!("{}", t.to_csv());
        }
        Command::Sweep { config, rates, seeds, out } => {
            let cfg = RunConfig::load(&config)?;
            let rates = if rates.is_empty() { default_sweep_rates() } else { rates };
            if seeds == 0 {
                bail!("--seeds must be at least 1");
            }
            let seeds: Vec<u64> = (0..seeds).map(|s| cfg.seed + s).collect();
            let rows = sweep(&cfg, &rates, &seeds, &out)?;
            print!("{}", sweep_csv(&rows));
        }
    }
    Ok(())
}

/// Milestones moved proportionally to a new epoch count, kept strictly
/// increasing and inside the schedule.
fn rescale_milestones(ms: &[usize], from: usize, to: usize) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for &m in ms {
        let s = (m as f64 * to as f64 / from.max(1) as f64).round() as usize;
        if s >= 1 && s < to && out.last().is_none_or(|&l| s > l) {
            out.push(s);
        }
    }
    out
}

/// Run configuration of the run directory holding `checkpoint`.
fn config_for(source: &Source) -> Result<RunConfig> {
    if let Some(c) = &source.config {
        return Ok(RunConfig::load(c)?);
    }
    let mut dir: Option<&Path> = Some(&source.checkpoint);
    while let Some(d) = dir {
        if RunLayout::new(d).config().exists() {
            return Ok(load_run_config(d)?);
        }
        dir = d.parent();
    }
    bail!("no config.toml above {}; pass --config", source.checkpoint.display())
}

fn batches_for(source: &Source) -> Result<(RunConfig, Vec<ekg::data::Batch>)> {
    let cfg = config_for(source)?;
    let (train, _) = cfg.dataset.load()?;
    let layout = RunLayout::new(&cfg.run_dir);
    let splits = match layout.read_splits() {
        Ok(s) => s,
        Err(_) => make_splits(train.labels(), train.num_classes(), &cfg.splits)?,
    };
    let batches = landscape_batches(&cfg.landscape, &train, &splits);
    Ok((cfg, batches))
}

fn landscape(command: LandscapeCommand) -> Result<()> {
    match command {
        LandscapeCommand::Cn { source, directional, points, scale, out } => {
            let net = load_checkpoint(&source.checkpoint).with_context(|| format!("loading {}", source.checkpoint.display()))?;
            let (cfg, batches) = batches_for(&source)?;
            let mut t = cfg.landscape.traversal.clone();
            if directional {
                t.mode = TraversalMode::Directional;
            }
            t.points = points.unwrap_or(t.points);
            t.scale = scale.unwrap_or(t.scale);
            let r = cn_profile(&net, batches, &t)?;
            match out {
                Some(p) => r.write_csv(&p)?,
                None => print!("{}", r.to_csv()),
            }
            println!("cn_mean,{}", r.cn_mean);
        }
        LandscapeCommand::Grid { source, resolution, extent, out } => {
            let net = load_checkpoint(&source.checkpoint).with_context(|| format!("loading {}", source.checkpoint.display()))?;
            let (cfg, batches) = batches_for(&source)?;
            let g = loss_grid(&net, batches, extent.unwrap_or(cfg.landscape.grid_extent), resolution, cfg.seed)?;
            std::fs::create_dir_all(&out)?;
            g.write_csv(&out.join("grid.csv"))?;
            write_heatmap(&g, &out.join("grid.png"), 16)?;
            println!("wrote {}/grid.csv and grid.png ({}x{})", out.display(), g.side(), g.side());
        }
        LandscapeCommand::Correlate { config, samples, trials, epochs } => {
            let cfg = RunConfig::load(&config)?;
            let mut p = Pipeline::open(cfg.clone())?;
            p.run(Phase::Splits)?;
            let layout = p.layout().clone();
            let (train, test) = cfg.dataset.load()?;
            let base = load_checkpoint(&layout.pretrained())?;
            let mut ft = cfg.finetune.clone();
            ft.kd_weight = 0.0;
            if let Some(n) = epochs {
                ft.lr.milestones = rescale_milestones(&ft.lr.milestones, ft.epochs, n);
                ft.epochs = n;
            }
            let cc = CorrelationConfig {
                samples,
                trials,
                target_rate: cfg.search.target_rate,
                ratio: cfg.search.ratio,
                finetune: ft,
                traversal: cfg.landscape.traversal.clone(),
                hessian_batches: cfg.landscape.hessian_batches,
                batch_size: cfg.landscape.batch_size,
                seed: cfg.seed,
            };
            let study = correlation_study(&base, &train, &layout.read_splits()?, &test, &cc)?;
            let path = layout.root.join("landscape").join("correlation.csv");
            std::fs::create_dir_all(path.parent().expect("has parent"))?;
            study.write_csv(&path)?;
            println!("pcc(validation loss, potential loss) = {:.4}", study.pcc_val_potential);
            println!("pcc(CN, potential loss) = {:.4}", study.pcc_cn_potential);
        }
    }
    Ok(())
}
