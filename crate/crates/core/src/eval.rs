//! Target-superclass accuracy of sub-networks with recalibrated normalization.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::seq::SliceRandom;

use crate::data::{Dataset, SuperclassPartition};
use crate::error::Result;
use crate::space::DiscreteArch;
use crate::substrate::{RngStream, Tensor};
use crate::supernet::{calibrate, forward_discrete, NormMode, NormStats, Supernet};
use crate::substrate::Graph;

pub const CALIBRATION_SIZE: usize = 512;
const CHUNK: usize = 128;

/// Fixed per-superclass calibration and evaluation subsets. Accuracies are
/// cached per (architecture, superclass) for the weights they were computed on.
#[derive(Debug)]
pub struct Evaluator {
    pub partition: SuperclassPartition,
    calib: Vec<Tensor>,
    sets: Vec<(Tensor, Vec<usize>)>,
    cache: Mutex<HashMap<(String, DiscreteArch, usize), f64>>,
}

fn seeded_subset(idx: &mut Vec<usize>, cap: usize, rng: &mut RngStream) {
    if idx.len() > cap {
        idx.shuffle(rng);
        idx.truncate(cap);
        idx.sort_unstable();
    }
}

impl Evaluator {
    /// Calibration samples come from the superclass's part of `train`, evaluation
    /// samples from its part of `eval`; both capped with a seeded draw.
    pub fn new(
        train: &Dataset,
        eval: &Dataset,
        partition: &SuperclassPartition,
        calib_size: usize,
        eval_cap: usize,
        rng: &RngStream,
    ) -> Result<Self> {
        partition.validate(train.classes)?;
        let mut calib = Vec::new();
        let mut sets = Vec::new();
        for t in 0..partition.len() {
            let classes = partition.classes(t)?;
            let mut r = rng.fork_indexed("calibration", t);
            let mut idx = train.indices_of(classes);
            seeded_subset(&mut idx, calib_size, &mut r);
            calib.push(train.gather(&idx).0);
            let mut r = rng.fork_indexed("evaluation", t);
            let mut idx = eval.indices_of(classes);
            seeded_subset(&mut idx, eval_cap, &mut r);
            sets.push(eval.gather(&idx));
        }
        Ok(Evaluator { partition: partition.clone(), calib, sets, cache: Mutex::new(HashMap::new()) })
    }

    pub fn superclasses(&self) -> usize {
        self.sets.len()
    }

    pub fn calibrate(&self, net: &Supernet, arch: &DiscreteArch, t: usize) -> Result<NormStats> {
        self.partition.classes(t)?;
        calibrate(net, arch, &self.calib[t], CHUNK)
    }

    /// Top-1 accuracy on superclass `t`, predicting among its classes only.
    pub fn accuracy(&self, net: &Supernet, arch: &DiscreteArch, t: usize) -> Result<f64> {
        let key = (net.fingerprint(), arch.clone(), t);
        if let Some(&acc) = self.cache.lock().unwrap().get(&key) {
            return Ok(acc);
        }
        let stats = self.calibrate(net, arch, t)?;
        let acc = self.accuracy_with(net, arch, t, &stats)?;
        self.cache.lock().unwrap().insert(key, acc);
        Ok(acc)
    }

    pub fn accuracy_with(&self, net: &Supernet, arch: &DiscreteArch, t: usize, stats: &NormStats) -> Result<f64> {
        let classes = self.partition.classes(t)?;
        let (x, labels) = &self.sets[t];
        if labels.is_empty() {
            return Ok(0.0);
        }
        let c = net.space.head.classes;
        let mut correct = 0usize;
        let mut start = 0;
        while start < labels.len() {
            let len = CHUNK.min(labels.len() - start);
            let mut g = Graph::<f32>::new();
            let xi = g.input(x.narrow(0, start, len)?);
            let y = forward_discrete(&mut g, &net.weights, &net.space, xi, arch, NormMode::Fixed(stats), false)?;
            let logits = g.value(y).data();
            for i in 0..len {
                let row = &logits[i * c..(i + 1) * c];
                let best = classes.iter().copied().fold(classes[0], |b, k| if row[k] > row[b] { k } else { b });
                if best == labels[start + i] {
                    correct += 1;
                }
            }
            start += len;
        }
        Ok(correct as f64 / labels.len() as f64)
    }

    /// Accuracy on every superclass.
    pub fn accuracies(&self, net: &Supernet, arch: &DiscreteArch) -> Result<Vec<f64>> {
        (0..self.superclasses()).map(|t| self.accuracy(net, arch, t)).collect()
    }
}
