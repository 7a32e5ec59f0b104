use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use edgefl_core::data::Dataset;
use edgefl_core::ensemble::EnsembleSpec;
use edgefl_core::experiment::{prepare, run_experiment, EnsembleReport, ExperimentConfig};
use edgefl_core::overlay::store::{load_cache, load_manifest};
use edgefl_core::simnet::{cost_calculator, AnalyticModel, CostBreakdown, CostInputs, Regime};
use edgefl_core::Error;

const OUTPUT_DIR_ENV: &str = "EDGEFL_OUTPUT_DIR";

#[derive(Parser)]
#[command(name = "edgefl", version, about = "FL, SFL and edge-overlay training simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every regime in a config and write metrics, traces and models.
    Run {
        config: PathBuf,
        /// Output directory; overrides $EDGEFL_OUTPUT_DIR and the config.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Predict bytes per round without training.
    Calc {
        /// Experiment config; ignored when a preset is given.
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        /// Devices per round for a preset.
        #[arg(long, default_value_t = 20)]
        k: u64,
        #[arg(long)]
        json: bool,
    },
    /// List the records and controller state of a persisted cache.
    InspectCache { dir: PathBuf },
    /// Evaluate a saved ensemble on a DSET file.
    Eval { ensemble: PathBuf, dataset: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Six-weight-layer VGG on 32x32x3 inputs with 10 classes.
    Vgg6Cifar10,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn dispatch(cmd: Command) -> edgefl_core::Result<()> {
    match cmd {
        Command::Run { config, output_dir } => run(&config, output_dir),
        Command::Calc {
            config,
            preset,
            k,
            json,
        } => calc(config.as_deref(), preset, k, json),
        Command::InspectCache { dir } => inspect_cache(&dir),
        Command::Eval { ensemble, dataset } => eval(&ensemble, &dataset),
    }
}

fn run(path: &Path, output_dir: Option<PathBuf>) -> edgefl_core::Result<()> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(dir) = output_dir.or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from)) {
        cfg.output_dir = dir;
    }
    let report = run_experiment(&cfg)?;
    println!(
        "{:<10} {:>9} {:>14} {:>12} {:>10}",
        "regime", "best_acc", "bytes/round", "time/round", "sent"
    );
    for (regime, s) in &report.summary.regimes {
        println!(
            "{:<10} {:>9.4} {:>14.0} {:>12.4} {:>10}",
            regime.name(),
            s.best_accuracy,
            s.mean_bytes_per_round,
            s.mean_round_time,
            s.sent_per_round.iter().sum::<u64>()
        );
    }
    if let Some(e) = &report.summary.ensemble {
        println!(
            "ensemble: vertical {:.4}, horizontal {:?}, base {:.4}",
            e.vertical_accuracy, e.horizontal_accuracy, e.base_accuracy
        );
    }
    println!("artifacts in {}", cfg.output_dir.display());
    Ok(())
}

fn calc_inputs(path: Option<&Path>, preset: Option<Preset>, k: u64) -> edgefl_core::Result<CostInputs> {
    if let Some(Preset::Vgg6Cifar10) = preset {
        let vgg = AnalyticModel::vgg6_cifar10();
        return Ok(CostInputs {
            small: vgg.clone(),
            large: vgg,
            split_index: 2,
            tap_layer: 2,
            k,
            batches_per_device: 500u64.div_ceil(16),
            batch_size: 16,
            emo_sent_batches: None,
        });
    }
    let path = path.ok_or_else(|| Error::config("config", "give a config file or --preset"))?;
    let cfg = ExperimentConfig::load(path)?;
    let setup = prepare(&cfg)?;
    let m = cfg.batch_size as u64;
    let mean_shard = setup.population.total_samples() as f64 / setup.population.len() as f64;
    Ok(CostInputs {
        small: AnalyticModel::from_stack(&setup.small),
        large: AnalyticModel::from_stack(&setup.large(cfg.tap_layer)?),
        split_index: cfg.split_index,
        tap_layer: cfg.tap_layer,
        k: cfg.devices.per_round as u64,
        batches_per_device: (mean_shard / m as f64).ceil() as u64,
        batch_size: m,
        emo_sent_batches: None,
    })
}

fn calc(path: Option<&Path>, preset: Option<Preset>, k: u64, json: bool) -> edgefl_core::Result<()> {
    let inputs = calc_inputs(path, preset, k)?;
    let costs = Regime::ALL
        .iter()
        .map(|&r| Ok((r, cost_calculator(r, &inputs)?)))
        .collect::<edgefl_core::Result<BTreeMap<Regime, CostBreakdown>>>()?;
    if json {
        let doc = serde_json::json!({ "inputs": inputs, "bytes_per_round": costs });
        println!("{}", serde_json::to_string_pretty(&doc)?);
        return Ok(());
    }
    println!(
        "parameters: small {}, large {}",
        inputs.small.params(),
        inputs.large.params()
    );
    println!(
        "{:<10} {:>14} {:>16} {:>12} {:>14} {:>8}",
        "regime", "model", "activations", "labels", "total", "GB"
    );
    for (r, c) in &costs {
        println!(
            "{:<10} {:>14} {:>16} {:>12} {:>14} {:>8.3}",
            r.name(),
            c.model_bytes,
            c.activation_bytes,
            c.label_bytes,
            c.total,
            c.total as f64 / 1e9
        );
    }
    Ok(())
}

fn inspect_cache(dir: &Path) -> edgefl_core::Result<()> {
    let manifest = load_manifest(dir)?;
    let cache = load_cache(dir, usize::MAX)?;
    println!("{} records in {}", cache.len(), dir.display());
    println!(
        "{:<12} {:>6} {:>10} {:>8} {:>8} {:>12}",
        "key", "round", "score", "interval", "counter", "shape"
    );
    for (key, e) in &manifest {
        let rec = cache.get(&key.parse()?);
        let shape = rec.map(|r| format!("{:?}", r.activation.shape())).unwrap_or_default();
        println!(
            "{:<12} {:>6} {:>10.6} {:>8} {:>8} {:>12}",
            key, e.round, e.score, e.interval, e.counter, shape
        );
    }
    Ok(())
}

fn eval(ensemble: &Path, dataset: &Path) -> edgefl_core::Result<()> {
    let spec = EnsembleSpec::load(ensemble)?;
    let data = Dataset::load(dataset)?;
    let report = EnsembleReport::measure(&spec, &data)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
