use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use eas_core::cost::CostTable;
use eas_core::deploy::{DeployResult, Deployer};
use eas_core::eval::Evaluator;
use eas_core::generator::{train_generator, Generator, Request};
use eas_core::harness::{run_experiment, similarity_report, ExperimentConfig, Inputs, SpacePreset};
use eas_core::space::{from_discrete, DiscreteArch, SearchSpaceConfig};
use eas_core::substrate::{Checkpoint, RngStream};
use eas_core::supernet::Supernet;
use eas_core::train::{train_supernet, DropoutConfig, TrainInputs};
use eas_core::EasError;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Eas(#[from] EasError),
    #[error("{0}: {1}")]
    File(PathBuf, std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "eas", version, about = "Elastic architecture search at desk scale")]
struct Cli {
    /// Experiment configuration (JSON). Defaults to the desk benchmark.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the configuration.
    #[arg(long, global = true, env = "EAS_SEED")]
    seed: Option<u64>,
    /// Search space file; overrides the configuration.
    #[arg(long, global = true)]
    space: Option<PathBuf>,
    /// Superclass partition file; overrides the configuration.
    #[arg(long, global = true)]
    partition: Option<PathBuf>,
    /// Built-in space when no space file is given.
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Mini,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Train the supernet with superclass dropout.
    TrainSupernet {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        drop_rate: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Per-epoch training log (CSV).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the architecture generator against a frozen supernet.
    TrainGenerator {
        #[arg(long)]
        supernet: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Generate architectures for deployment requests.
    Generate {
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        supernet: PathBuf,
        /// JSON list of {"superclass": t, "budget_madds_m": B}.
        #[arg(long)]
        requests: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Target-superclass accuracy of one architecture.
    Evaluate {
        #[arg(long)]
        supernet: PathBuf,
        #[arg(long)]
        arch: PathBuf,
        #[arg(long)]
        superclass: usize,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// MAdds of an architecture.
    Cost {
        #[arg(long)]
        arch: PathBuf,
    },
    /// Similarity curve of generation results, grouped by budget.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full pipeline: train, generate, evaluate, report.
    Run {
        #[arg(long)]
        out: PathBuf,
    },
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::File(path.to_path_buf(), e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::File(path.to_path_buf(), e))
}

impl Cli {
    fn experiment(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::desk(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = &self.space {
            cfg.space_file = Some(p.clone());
        }
        if let Some(p) = &self.partition {
            cfg.partition_file = Some(p.clone());
        }
        match self.preset {
            Some(Preset::Desk) => cfg.space_preset = SpacePreset::Desk,
            Some(Preset::Mini) => cfg.space_preset = SpacePreset::Mini,
            None => {}
        }
        Ok(cfg)
    }

    fn space_only(&self) -> Result<SearchSpaceConfig> {
        let cfg = self.experiment()?;
        if let Some(p) = &cfg.space_file {
            return Ok(SearchSpaceConfig::from_json(&read(p)?)?);
        }
        Ok(cfg.inputs()?.space)
    }
}

fn load_supernet(path: &Path, space: &SearchSpaceConfig) -> Result<Supernet> {
    Ok(Supernet::from_checkpoint(&Checkpoint::load(path)?, space)?)
}

fn evaluator(cfg: &ExperimentConfig, inputs: &Inputs, split: Split) -> Result<Evaluator> {
    let root = RngStream::new(cfg.seed);
    let (set, label) = match split {
        Split::Val => (&inputs.splits.val, "val-eval"),
        Split::Test => (&inputs.splits.test, "test-eval"),
    };
    Ok(Evaluator::new(&inputs.splits.train, set, &inputs.partition, cfg.calibration_size, cfg.eval_cap, &root.fork(label))?)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Cost { arch } => {
            let space = cli.space_only()?;
            let arch = DiscreteArch::from_json(&read(arch)?)?;
            let madds = CostTable::build(&space).madds_exact(&from_discrete(&arch, &space)?, &space)?;
            println!("{madds} MAdds ({:.3}M)", madds as f64 / 1e6);
        }
        Command::TrainSupernet { out, drop_rate, epochs, log } => {
            let mut cfg = cli.experiment()?;
            if let Some(e) = epochs {
                let keep = cfg.supernet.clone();
                cfg.supernet = eas_core::train::TrainSchedule::progressive(*e);
                cfg.supernet.batch_size = keep.batch_size;
                cfg.supernet.lr = keep.lr;
                cfg.supernet.distill = keep.distill;
                cfg.supernet.eval_every = keep.eval_every;
            }
            let q = drop_rate.unwrap_or(cfg.drop_rate);
            let inputs = cfg.inputs()?;
            let root = RngStream::new(cfg.seed);
            let mut net = Supernet::init(&inputs.space, &mut root.fork("supernet-init"))?;
            let ev = evaluator(&cfg, &inputs, Split::Val)?;
            let dir = out.parent().map(Path::to_path_buf);
            let tlog = train_supernet(
                &mut net,
                &TrainInputs { train: &inputs.splits.train, partition: &inputs.partition, evaluator: Some(&ev), divergence_dir: dir },
                &cfg.supernet,
                Some(DropoutConfig::new(q)?),
                &root.fork("supernet-train"),
            )?;
            net.to_checkpoint().save(out)?;
            if let Some(p) = log {
                tlog.write_csv(p, &inputs.partition)?;
            }
            println!("supernet written to {}", out.display());
        }
        Command::TrainGenerator { supernet, out, epochs, log } => {
            let cfg = cli.experiment()?;
            let inputs = cfg.inputs()?;
            let net = load_supernet(supernet, &inputs.space)?;
            let cost = CostTable::build(&inputs.space);
            let mut gcfg = cfg.generator_config(&cost);
            if let Some(e) = epochs {
                gcfg.epochs = *e;
            }
            let root = RngStream::new(cfg.seed);
            let mut gen = Generator::new(gcfg, &inputs.space, inputs.partition.len(), &mut root.fork("generator-init"))?;
            let glog = train_generator(&mut gen, &net, &inputs.splits.val, &inputs.partition, &cost, &root.fork("generator-train"))?;
            gen.to_checkpoint().save(out)?;
            if let Some(p) = log {
                glog.write_csv(p)?;
            }
            println!(
                "generator written to {} (budget range {:.3}M to {:.3}M)",
                out.display(),
                gen.config.budget_low,
                gen.config.budget_high
            );
        }
        Command::Generate { gen, supernet, requests, out } => {
            let cfg = cli.experiment()?;
            let inputs = cfg.inputs()?;
            let gen = Generator::from_checkpoint(&Checkpoint::load(gen)?)?;
            let net = load_supernet(supernet, &inputs.space)?;
            let reqs: Vec<Request> = serde_json::from_str(&read(requests)?)?;
            let cost = CostTable::build(&inputs.space);
            let ev = evaluator(&cfg, &inputs, Split::Val)?;
            let deployer = Deployer { net: &net, cost: &cost, evaluator: &ev };
            let results = deployer.generate_batch(&gen, &reqs, &cfg.deploy, &RngStream::new(cfg.seed).fork("deploy"))?;
            for r in &results {
                println!(
                    "superclass {} budget {:.3}M -> {:.3}M, val acc {:.4}, {:.3}s",
                    r.superclass, r.budget_madds_m, r.madds_m, r.accuracy, r.elapsed_s
                );
            }
            write(out, &serde_json::to_string_pretty(&results)?)?;
        }
        Command::Evaluate { supernet, arch, superclass, split } => {
            let cfg = cli.experiment()?;
            let inputs = cfg.inputs()?;
            let net = load_supernet(supernet, &inputs.space)?;
            let arch = DiscreteArch::from_json(&read(arch)?)?;
            let acc = evaluator(&cfg, &inputs, *split)?.accuracy(&net, &arch, *superclass)?;
            println!("{acc:.4}");
        }
        Command::Report { results, out } => {
            let space = cli.space_only()?;
            let results: Vec<DeployResult> = serde_json::from_str(&read(results)?)?;
            let mut levels: Vec<(f64, Vec<(DiscreteArch, f64)>)> = Vec::new();
            for r in results {
                match levels.iter_mut().find(|l| l.0 == r.budget_madds_m) {
                    Some(l) => l.1.push((r.arch, r.madds_m)),
                    None => levels.push((r.budget_madds_m, vec![(r.arch, r.madds_m)])),
                }
            }
            let curve = similarity_report(&levels, &space)?;
            let mut text = String::from("level,budget_madds_m,avg_madds_m,mean_cosine,pairs\n");
            for p in &curve {
                text.push_str(&format!("{},{:.3},{:.3},{:.6},{}\n", p.level, p.budget_madds_m, p.avg_madds_m, p.mean_cosine, p.pairs));
            }
            write(out, &text)?;
            print!("{text}");
        }
        Command::Run { out } => {
            let cfg = cli.experiment()?;
            let outcome = run_experiment(&cfg, out)?;
            let r = &outcome.report;
            println!("seed {}", r.seed);
            for (l, b) in r.budget_levels.iter().enumerate() {
                println!(
                    "level {l}: budget {b:.3}M, avg madds {:.3}M, avg test acc {:.4}",
                    r.avg_madds_m[l], r.avg_accuracy[l]
                );
            }
            println!("reports written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Command::Run { .. } | Command::TrainSupernet { .. } | Command::TrainGenerator { .. } = cli.command {
        if cli.config.is_none() && cli.preset.is_none() {
            log::info!("using the built-in desk configuration");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
