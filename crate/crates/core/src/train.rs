//! Supernet training with superclass dropout and progressive shrinking.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SuperclassPartition};
use crate::error::{EasError, Result};
use crate::eval::Evaluator;
use crate::space::{to_discrete, DiscreteArch};
use crate::substrate::graph::masked_softmax;
use crate::substrate::{cosine_lr, Graph, Optimizer, OptimizerKind, RngStream};
use crate::supernet::{forward_discrete, sample_arch, NormMode, Phase, Supernet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutConfig {
    pub q: f64,
}

impl DropoutConfig {
    pub fn new(q: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&q) {
            return Err(EasError::Config(format!("drop rate {q} is outside [0, 1]")));
        }
        Ok(DropoutConfig { q })
    }
}

/// Per-sample class mask (`[n * classes]`): the target superclass is always kept,
/// every other superclass is dropped as a whole with probability `q`.
pub fn sample_mask(
    partition: &SuperclassPartition,
    classes: usize,
    targets: &[usize],
    q: f64,
    rng: &mut RngStream,
) -> Result<Vec<bool>> {
    DropoutConfig::new(q)?;
    let mut mask = vec![true; targets.len() * classes];
    for (i, &t) in targets.iter().enumerate() {
        partition.classes(t)?;
        let row = &mut mask[i * classes..(i + 1) * classes];
        for (u, group) in partition.superclasses.iter().enumerate() {
            if u != t && rng.random_bool(q) {
                for &c in &group.classes {
                    row[c] = false;
                }
            }
        }
    }
    Ok(mask)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    /// Phases in order with their epoch counts.
    pub phases: Vec<(Phase, usize)>,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Distill from the largest sub-network.
    pub distill: bool,
    /// Evaluate validation accuracy every this many epochs (0: last epoch only).
    pub eval_every: usize,
}

impl TrainSchedule {
    /// Four equal phases: largest, +kernel, +depth, +width.
    pub fn progressive(total_epochs: usize) -> Self {
        let order = [Phase::Largest, Phase::Kernel, Phase::KernelDepth, Phase::All];
        let phases = order
            .iter()
            .enumerate()
            .map(|(i, &p)| (p, total_epochs * (i + 1) / 4 - total_epochs * i / 4))
            .collect();
        TrainSchedule {
            phases,
            total_epochs,
            batch_size: 256,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 3e-5,
            distill: true,
            eval_every: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sum: usize = self.phases.iter().map(|p| p.1).sum();
        if sum != self.total_epochs {
            return Err(EasError::Config(format!("phase epochs sum to {sum}, expected {}", self.total_epochs)));
        }
        if self.batch_size == 0 || self.lr <= 0.0 {
            return Err(EasError::Config("batch size and learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn phase_at(&self, epoch: usize) -> Phase {
        let mut end = 0;
        for &(p, e) in &self.phases {
            end += e;
            if epoch < end {
                return p;
            }
        }
        self.phases.last().map(|p| p.0).unwrap_or(Phase::All)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub loss: f64,
    pub lr: f64,
    /// Largest sub-network accuracy per superclass, when evaluated.
    pub val_acc: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path, partition: &SuperclassPartition) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["epoch".to_string(), "phase".into(), "loss".into(), "lr".into()];
        header.extend(partition.superclasses.iter().map(|s| format!("val_acc_{}", s.name)));
        w.write_record(&header)?;
        for r in &self.epochs {
            let mut row = vec![r.epoch.to_string(), r.phase.name().to_string(), format!("{:.6}", r.loss), format!("{:.6e}", r.lr)];
            match &r.val_acc {
                Some(a) => row.extend(a.iter().map(|v| format!("{v:.4}"))),
                None => row.extend(std::iter::repeat_n(String::new(), partition.len())),
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Everything the training loop reads besides the network.
pub struct TrainInputs<'a> {
    pub train: &'a Dataset,
    pub partition: &'a SuperclassPartition,
    /// Validation accuracy reporting; skipped when `None`.
    pub evaluator: Option<&'a Evaluator>,
    /// Where to write a checkpoint if training diverges.
    pub divergence_dir: Option<PathBuf>,
}

/// Trains `net` in place. `dropout = None` trains without the dropout mechanism.
pub fn train_supernet(
    net: &mut Supernet,
    inputs: &TrainInputs,
    schedule: &TrainSchedule,
    dropout: Option<DropoutConfig>,
    rng: &RngStream,
) -> Result<TrainLog> {
    schedule.validate()?;
    let train = inputs.train;
    let partition = inputs.partition;
    let classes = net.space.head.classes;
    if train.classes != classes {
        return Err(EasError::Config(format!("data has {} classes, network head {classes}", train.classes)));
    }
    let super_of = partition.superclass_of(classes)?;
    let mut opt = Optimizer::new(
        OptimizerKind::SgdMomentum { momentum: schedule.momentum as f32, weight_decay: schedule.weight_decay as f32 },
        schedule.lr as f32,
    );
    let largest = net.space.largest_arch();
    let mut arch_rng = rng.fork("arch");
    let mut drop_rng = rng.fork("dropout");
    let steps_per_epoch = train.len().div_ceil(schedule.batch_size);
    let mut log = TrainLog::default();
    let mut step = 0usize;

    for epoch in 0..schedule.total_epochs {
        let phase = schedule.phase_at(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng.fork_indexed("shuffle", epoch));
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(schedule.batch_size).enumerate() {
            let progress = epoch as f64 + b as f64 / steps_per_epoch as f64;
            opt.lr = cosine_lr(schedule.lr, progress, schedule.total_epochs as f64) as f32;
            let arch = to_discrete(&sample_arch(&net.space, phase, &mut arch_rng), &net.space)?;
            let (x, labels) = train.gather(idx);
            let targets: Vec<usize> = labels.iter().map(|&y| super_of[y]).collect();
            let mask = match dropout {
                Some(d) => sample_mask(partition, classes, &targets, d.q, &mut drop_rng)?,
                None => vec![true; idx.len() * classes],
            };
            let teacher = if schedule.distill && arch != largest {
                Some(teacher_probs(net, &x, &largest, &mask)?)
            } else {
                None
            };
            let mut g = Graph::<f32>::new();
            let xi = g.input(x);
            let logits = forward_discrete(&mut g, &net.weights, &net.space, xi, &arch, NormMode::Batch, true)?;
            let mut loss = g.masked_cross_entropy(logits, &mask, &labels)?;
            if let Some(t) = &teacher {
                let kd = g.masked_distill(logits, t, &mask)?;
                loss = g.add(loss, kd)?;
            }
            let value = g.value(loss).item() as f64;
            let grads = g.backward(loss)?;
            if !value.is_finite() || grads.by_name.values().any(|t| !t.all_finite()) {
                return Err(diverged(net, step, inputs.divergence_dir.as_deref()));
            }
            opt.step(&mut net.weights, &grads)?;
            loss_sum += value * idx.len() as f64;
            step += 1;
        }
        let last = epoch + 1 == schedule.total_epochs;
        let due = schedule.eval_every > 0 && (epoch + 1) % schedule.eval_every == 0;
        let val_acc = match inputs.evaluator {
            Some(ev) if last || due => Some(ev.accuracies(net, &largest)?),
            _ => None,
        };
        let record = EpochRecord {
            epoch,
            phase,
            loss: loss_sum / train.len() as f64,
            lr: cosine_lr(schedule.lr, (epoch + 1) as f64, schedule.total_epochs as f64),
            val_acc,
        };
        log::info!("supernet epoch {epoch} phase {} loss {:.4}", phase.name(), record.loss);
        log.epochs.push(record);
    }
    Ok(log)
}

fn teacher_probs(net: &Supernet, x: &crate::substrate::Tensor, largest: &DiscreteArch, mask: &[bool]) -> Result<Vec<f32>> {
    let mut g = Graph::<f32>::new();
    let xi = g.input(x.clone());
    let y = forward_discrete(&mut g, &net.weights, &net.space, xi, largest, NormMode::Batch, false)?;
    Ok(masked_softmax(g.value(y).data(), mask, net.space.head.classes))
}

fn diverged(net: &Supernet, step: usize, dir: Option<&Path>) -> EasError {
    let checkpoint = match dir {
        Some(d) => {
            let path = d.join(format!("diverged-step{step}.ckpt"));
            match net.to_checkpoint().save(&path) {
                Ok(()) => path.display().to_string(),
                Err(e) => format!("not saved ({e})"),
            }
        }
        None => "not saved".to_string(),
    };
    let _ = std::io::stderr().flush();
    EasError::Diverged { step, checkpoint }
}
