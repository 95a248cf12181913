//! Experiment configuration, the end-to-end pipeline, and reports.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cost::CostTable;
use crate::data::{self, Splits, SuperclassPartition, SyntheticSpec};
use crate::deploy::{DeployConfig, Deployer};
use crate::error::{EasError, Result};
use crate::eval::{Evaluator, CALIBRATION_SIZE};
use crate::generator::{train_generator, Generator, GeneratorConfig, Request};
use crate::space::{arch_cosine, DiscreteArch, SearchSpaceConfig};
use crate::substrate::RngStream;
use crate::supernet::Supernet;
use crate::train::{train_supernet, DropoutConfig, TrainInputs, TrainSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpacePreset {
    Desk,
    Mini,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    Directory { path: PathBuf, split: [f64; 3] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Search space file; the preset is used when absent.
    pub space_file: Option<PathBuf>,
    pub space_preset: SpacePreset,
    /// Partition file; synthetic data falls back to consecutive groups.
    pub partition_file: Option<PathBuf>,
    pub dataset: DatasetSource,
    pub supernet: TrainSchedule,
    pub drop_rate: f64,
    pub generator: GeneratorConfig,
    /// Scale the generator budget range into the space's cost range.
    pub auto_budget_range: bool,
    pub deploy: DeployConfig,
    pub budget_levels: usize,
    pub calibration_size: usize,
    /// Cap on evaluation samples per superclass.
    pub eval_cap: usize,
    /// Also evaluate the uniform random baseline at every (superclass, level).
    pub random_baseline: bool,
}

impl ExperimentConfig {
    /// Desk-scale benchmark: 12 synthetic classes in 4 superclasses.
    pub fn desk() -> Self {
        let mut supernet = TrainSchedule::progressive(120);
        supernet.batch_size = 64;
        supernet.lr = 0.05;
        supernet.eval_every = 10;
        ExperimentConfig {
            seed: 0,
            space_file: None,
            space_preset: SpacePreset::Desk,
            partition_file: None,
            dataset: DatasetSource::Synthetic(SyntheticSpec::default()),
            supernet,
            drop_rate: 0.15,
            generator: GeneratorConfig { batch_size: 64, lr: 1e-2, ..GeneratorConfig::default() },
            auto_budget_range: true,
            deploy: DeployConfig::default(),
            budget_levels: 4,
            calibration_size: CALIBRATION_SIZE,
            eval_cap: 512,
            random_baseline: true,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| EasError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks referenced files before anything runs.
    pub fn validate(&self) -> Result<()> {
        for (what, p) in [("space", &self.space_file), ("partition", &self.partition_file)] {
            if let Some(p) = p {
                if !p.is_file() {
                    return Err(EasError::Config(format!("{what} file {} does not exist", p.display())));
                }
            }
        }
        match &self.dataset {
            DatasetSource::Directory { path, .. } => {
                if !path.is_dir() {
                    return Err(EasError::Config(format!("dataset directory {} does not exist", path.display())));
                }
                if self.partition_file.is_none() {
                    return Err(EasError::Config("directory datasets need a partition file".into()));
                }
            }
            DatasetSource::Synthetic(_) => {}
        }
        DropoutConfig::new(self.drop_rate)?;
        self.supernet.validate()?;
        self.generator.validate()?;
        if self.budget_levels == 0 {
            return Err(EasError::Config("need at least one budget level".into()));
        }
        Ok(())
    }

    /// Loads the space, partition and data, cross-validating them.
    pub fn inputs(&self) -> Result<Inputs> {
        self.validate()?;
        let classes_hint = match &self.dataset {
            DatasetSource::Synthetic(s) => s.classes,
            DatasetSource::Directory { .. } => 0,
        };
        let partition = match &self.partition_file {
            Some(p) => SuperclassPartition::load(p)?,
            None => match &self.dataset {
                DatasetSource::Synthetic(s) => {
                    if s.classes % s.classes_per_superclass != 0 {
                        return Err(EasError::Config("synthetic classes must divide into superclasses".into()));
                    }
                    SuperclassPartition::contiguous(s.classes / s.classes_per_superclass, s.classes_per_superclass)
                }
                DatasetSource::Directory { .. } => unreachable!("validated above"),
            },
        };
        let mut space = match &self.space_file {
            Some(p) => SearchSpaceConfig::from_json(&fs::read_to_string(p)?)?,
            None => match self.space_preset {
                SpacePreset::Desk => SearchSpaceConfig::default_desk(classes_hint),
                SpacePreset::Mini => SearchSpaceConfig::mini(classes_hint),
            },
        };
        let splits = match &self.dataset {
            DatasetSource::Synthetic(s) => data::synthetic(&SyntheticSpec { resolution: space.input_resolution, ..s.clone() })?,
            DatasetSource::Directory { path, split } => data::from_directory(path, space.input_resolution, *split, self.seed)?,
        };
        if self.space_file.is_none() {
            space.head.classes = splits.classes();
        }
        if space.head.classes != splits.classes() {
            return Err(EasError::Config(format!(
                "space head has {} classes, data has {}",
                space.head.classes,
                splits.classes()
            )));
        }
        partition.validate(splits.classes())?;
        space.validate()?;
        Ok(Inputs { space, partition, splits })
    }

    /// Generator settings with the budget range placed inside the cost range.
    pub fn generator_config(&self, cost: &CostTable) -> GeneratorConfig {
        let mut g = self.generator.clone();
        if self.auto_budget_range {
            let (lo, hi) = scaled_budget_range(cost);
            g.budget_low = lo;
            g.budget_high = hi;
        }
        g
    }
}

/// `[B_L, B_H]` spanning the middle 80% of the achievable cost range.
pub fn scaled_budget_range(cost: &CostTable) -> (f64, f64) {
    let (lo, hi) = (cost.min_madds(), cost.max_madds());
    let span = hi - lo;
    (lo + 0.1 * span, hi - 0.1 * span)
}

/// `n` levels evenly spaced inside `[lo, hi]`, at the centers of `n` equal bins.
pub fn budget_levels(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (i as f64 + 0.5) * (hi - lo) / n as f64).collect()
}

pub struct Inputs {
    pub space: SearchSpaceConfig,
    pub partition: SuperclassPartition,
    pub splits: Splits,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityPoint {
    pub level: usize,
    pub budget_madds_m: f64,
    pub avg_madds_m: f64,
    pub mean_cosine: f64,
    pub pairs: usize,
}

/// Mean pairwise one-hot cosine across superclasses at each budget level, sorted
/// by budget. Levels with fewer than two architectures are skipped.
pub fn similarity_report(levels: &[(f64, Vec<(DiscreteArch, f64)>)], space: &SearchSpaceConfig) -> Result<Vec<SimilarityPoint>> {
    let mut order: Vec<usize> = (0..levels.len()).collect();
    order.sort_by(|&a, &b| levels[a].0.total_cmp(&levels[b].0));
    let mut out = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        let (budget, archs) = &levels[i];
        if archs.len() < 2 {
            log::warn!("budget level {budget} has fewer than two architectures; skipped");
            continue;
        }
        let mut sum = 0.0;
        let mut pairs = 0;
        for a in 0..archs.len() {
            for b in a + 1..archs.len() {
                sum += arch_cosine(&archs[a].0, &archs[b].0, space)?;
                pairs += 1;
            }
        }
        out.push(SimilarityPoint {
            level: rank,
            budget_madds_m: *budget,
            avg_madds_m: archs.iter().map(|a| a.1).sum::<f64>() / archs.len() as f64,
            mean_cosine: sum / pairs as f64,
            pairs,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub superclass: usize,
    pub name: String,
    pub level: usize,
    pub budget_madds_m: f64,
    pub madds_m: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub arch_file: String,
    pub random_madds_m: Option<f64>,
    pub random_test_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub seed: u64,
    pub budget_range: (f64, f64),
    pub budget_levels: Vec<f64>,
    pub rows: Vec<ReportRow>,
    /// Per level, mean test accuracy over superclasses.
    pub avg_accuracy: Vec<f64>,
    pub avg_madds_m: Vec<f64>,
    pub random_avg_accuracy: Option<Vec<f64>>,
    pub similarity: Vec<SimilarityPoint>,
}

fn level_means(rows: &[ReportRow], levels: usize, f: impl Fn(&ReportRow) -> Option<f64>) -> Option<Vec<f64>> {
    (0..levels)
        .map(|l| {
            let vals: Vec<f64> = rows.iter().filter(|r| r.level == l).map(&f).collect::<Option<_>>()?;
            Some(vals.iter().sum::<f64>() / vals.len().max(1) as f64)
        })
        .collect()
}

impl Report {
    pub fn from_rows(seed: u64, budget_range: (f64, f64), budget_levels: Vec<f64>, rows: Vec<ReportRow>, similarity: Vec<SimilarityPoint>) -> Self {
        let n = budget_levels.len();
        Report {
            seed,
            budget_range,
            avg_accuracy: level_means(&rows, n, |r| Some(r.test_acc)).unwrap(),
            avg_madds_m: level_means(&rows, n, |r| Some(r.madds_m)).unwrap(),
            random_avg_accuracy: level_means(&rows, n, |r| r.random_test_acc),
            budget_levels,
            rows,
            similarity,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        let mut w = csv::Writer::from_path(dir.join("accuracy.csv"))?;
        w.write_record([
            "seed", "superclass", "name", "level", "budget_madds_m", "madds_m", "val_acc", "test_acc", "random_madds_m", "random_test_acc", "arch_file",
        ])?;
        let opt = |v: Option<f64>, p: usize| v.map(|x| format!("{x:.p$}")).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                self.seed.to_string(),
                r.superclass.to_string(),
                r.name.clone(),
                r.level.to_string(),
                format!("{:.3}", r.budget_madds_m),
                format!("{:.3}", r.madds_m),
                format!("{:.4}", r.val_acc),
                format!("{:.4}", r.test_acc),
                opt(r.random_madds_m, 3),
                opt(r.random_test_acc, 4),
                r.arch_file.clone(),
            ])?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("similarity.csv"))?;
        w.write_record(["seed", "level", "budget_madds_m", "avg_madds_m", "mean_cosine", "pairs"])?;
        for s in &self.similarity {
            w.write_record([
                self.seed.to_string(),
                s.level.to_string(),
                format!("{:.3}", s.budget_madds_m),
                format!("{:.3}", s.avg_madds_m),
                format!("{:.6}", s.mean_cosine),
                s.pairs.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Wall-clock measurements, kept apart from the deterministic report files.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub rows: Vec<(String, f64)>,
}

impl Timing {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["stage", "seconds"])?;
        for (s, t) in &self.rows {
            w.write_record([s.clone(), format!("{t:.4}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Artifacts of one pipeline run.
pub struct Outcome {
    pub report: Report,
    pub supernet: Supernet,
    pub generator: Generator,
    pub timing: Timing,
}

/// Train supernet, train generator, deploy every (superclass, level), report.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let inputs = cfg.inputs().map_err(|e| e.in_stage("load inputs"))?;
    fs::create_dir_all(out.join("archs"))?;
    fs::write(out.join("config.json"), cfg.to_json())?;
    let Inputs { space, partition, splits } = inputs;
    let root = RngStream::new(cfg.seed);
    let mut timing = Timing::default();

    let t0 = Instant::now();
    let mut net = Supernet::init(&space, &mut root.fork("supernet-init")).map_err(|e| e.in_stage("train-supernet"))?;
    let val_eval = Evaluator::new(&splits.train, &splits.val, &partition, cfg.calibration_size, cfg.eval_cap, &root.fork("val-eval"))?;
    let test_eval = Evaluator::new(&splits.train, &splits.test, &partition, cfg.calibration_size, cfg.eval_cap, &root.fork("test-eval"))?;
    let log = train_supernet(
        &mut net,
        &TrainInputs { train: &splits.train, partition: &partition, evaluator: Some(&val_eval), divergence_dir: Some(out.to_path_buf()) },
        &cfg.supernet,
        Some(DropoutConfig::new(cfg.drop_rate)?),
        &root.fork("supernet-train"),
    )
    .map_err(|e| e.in_stage("train-supernet"))?;
    net.to_checkpoint().save(&out.join("supernet.ckpt"))?;
    log.write_csv(&out.join("supernet_log.csv"), &partition)?;
    timing.rows.push(("train-supernet".into(), t0.elapsed().as_secs_f64()));

    let t0 = Instant::now();
    let cost = CostTable::build(&space);
    let gcfg = cfg.generator_config(&cost);
    let mut gen = Generator::new(gcfg.clone(), &space, partition.len(), &mut root.fork("generator-init"))?;
    let glog = train_generator(&mut gen, &net, &splits.val, &partition, &cost, &root.fork("generator-train"))
        .map_err(|e| e.in_stage("train-generator"))?;
    gen.to_checkpoint().save(&out.join("generator.ckpt"))?;
    glog.write_csv(&out.join("generator_log.csv"))?;
    timing.rows.push(("train-generator".into(), t0.elapsed().as_secs_f64()));

    let levels = budget_levels(gcfg.budget_low, gcfg.budget_high, cfg.budget_levels);
    let deployer = Deployer { net: &net, cost: &cost, evaluator: &val_eval };
    let mut requests = Vec::new();
    for (l, &b) in levels.iter().enumerate() {
        for t in 0..partition.len() {
            requests.push((l, Request { superclass: t, budget_madds_m: b }));
        }
    }
    let t0 = Instant::now();
    let reqs: Vec<Request> = requests.iter().map(|r| r.1).collect();
    let results = deployer.generate_batch(&gen, &reqs, &cfg.deploy, &root.fork("deploy")).map_err(|e| e.in_stage("generate"))?;
    timing.rows.push(("generate-all".into(), t0.elapsed().as_secs_f64()));

    let t0 = Instant::now();
    let fifty: Vec<Request> = (0..50).map(|i| reqs[i % reqs.len()]).collect();
    gen.probabilities(&fifty)?;
    timing.rows.push(("rollout-50".into(), t0.elapsed().as_secs_f64()));

    let mut rows = Vec::new();
    let mut per_level: Vec<(f64, Vec<(DiscreteArch, f64)>)> = levels.iter().map(|&b| (b, Vec::new())).collect();
    for ((l, req), res) in requests.iter().zip(&results) {
        let t = req.superclass;
        let name = partition.superclasses[t].name.clone();
        let file = format!("archs/{}_level{l}.json", sanitize(&name));
        fs::write(out.join(&file), res.arch.to_json())?;
        let test_acc = test_eval.accuracy(&net, &res.arch, t).map_err(|e| e.in_stage("evaluate"))?;
        let (random_madds_m, random_test_acc) = if cfg.random_baseline {
            let r = deployer
                .random_search(*req, 1, &cfg.deploy, &root.fork_indexed("random", rows.len()))
                .map_err(|e| e.in_stage("random-baseline"))?;
            (Some(r.madds_m), Some(test_eval.accuracy(&net, &r.arch, t)?))
        } else {
            (None, None)
        };
        per_level[*l].1.push((res.arch.clone(), res.madds_m));
        rows.push(ReportRow {
            superclass: t,
            name,
            level: *l,
            budget_madds_m: req.budget_madds_m,
            madds_m: res.madds_m,
            val_acc: res.accuracy,
            test_acc,
            arch_file: file,
            random_madds_m,
            random_test_acc,
        });
    }
    let similarity = similarity_report(&per_level, &space)?;
    let report = Report::from_rows(cfg.seed, (gcfg.budget_low, gcfg.budget_high), levels, rows, similarity);
    report.write(out)?;
    timing.write(&out.join("timing.csv"))?;
    Ok(Outcome { report, supernet: net, generator: gen, timing })
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}
