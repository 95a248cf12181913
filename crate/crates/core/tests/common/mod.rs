#![allow(dead_code)]

use eas_core::data::{self, Splits, SuperclassPartition, SyntheticSpec};
use eas_core::space::{BlockArch, DiscreteArch, HeadConfig, SearchSpaceConfig, StemConfig, UnitArch, UnitConfig};
use eas_core::substrate::{RngStream, Tensor};
use rand::Rng;

/// Multiply-adds counted layer by layer while walking the network.
pub fn count_madds(space: &SearchSpaceConfig, arch: &DiscreteArch) -> u64 {
    let [mut h, mut w, mut c] = space.input_resolution;
    let mut total = 0u64;
    let mut conv = |h: &mut usize, w: &mut usize, c: &mut usize, k: usize, c_out: usize, stride: usize, depthwise: bool| {
        *h /= stride;
        *w /= stride;
        let per_output = if depthwise { k * k } else { k * k * *c };
        total += (*h * *w * c_out * per_output) as u64;
        *c = c_out;
    };
    conv(&mut h, &mut w, &mut c, space.stem.kernel, space.stem.channels, space.stem.stride, false);
    for (unit_cfg, unit) in space.units.iter().zip(&arch.units) {
        for (b, blk) in unit.blocks.iter().enumerate() {
            let stride = if b == 0 { unit_cfg.stride } else { 1 };
            let mid = c * blk.expand;
            conv(&mut h, &mut w, &mut c, 1, mid, 1, false);
            conv(&mut h, &mut w, &mut c, blk.kernel, mid, stride, true);
            conv(&mut h, &mut w, &mut c, 1, unit_cfg.output_channels, 1, false);
        }
    }
    conv(&mut h, &mut w, &mut c, 1, space.head.hidden, 1, false);
    total + (space.head.hidden * space.head.classes) as u64
}

/// Two units, two blocks each, two choices per dimension: 400 architectures.
pub fn tiny_space() -> SearchSpaceConfig {
    SearchSpaceConfig {
        units: vec![
            UnitConfig { output_channels: 4, stride: 1, max_blocks: 2, min_blocks: 1 },
            UnitConfig { output_channels: 6, stride: 2, max_blocks: 2, min_blocks: 1 },
        ],
        depth_choices: vec![1, 2],
        expand_choices: vec![1, 2],
        kernel_choices: vec![3, 5],
        stem: StemConfig { channels: 4, kernel: 3, stride: 1 },
        head: HeadConfig { hidden: 8, classes: 4 },
        input_resolution: [8, 8, 3],
    }
}

/// Small space with residual blocks, a strided unit and all default choice sets.
pub fn small_space() -> SearchSpaceConfig {
    SearchSpaceConfig {
        units: vec![
            UnitConfig { output_channels: 4, stride: 1, max_blocks: 4, min_blocks: 2 },
            UnitConfig { output_channels: 6, stride: 2, max_blocks: 4, min_blocks: 2 },
        ],
        depth_choices: vec![2, 3, 4],
        expand_choices: vec![3, 4, 6],
        kernel_choices: vec![3, 5, 7],
        stem: StemConfig { channels: 4, kernel: 3, stride: 1 },
        head: HeadConfig { hidden: 8, classes: 6 },
        input_resolution: [8, 8, 3],
    }
}

pub fn random_arch(space: &SearchSpaceConfig, rng: &mut RngStream) -> DiscreteArch {
    let pick = |rng: &mut RngStream, set: &[usize]| set[rng.random_range(0..set.len())];
    DiscreteArch {
        units: space
            .units
            .iter()
            .map(|_| {
                let depth = pick(rng, &space.depth_choices);
                let blocks = (0..depth)
                    .map(|_| BlockArch { kernel: pick(rng, &space.kernel_choices), expand: pick(rng, &space.expand_choices) })
                    .collect();
                UnitArch { depth, blocks }
            })
            .collect(),
    }
}

pub fn random_batch(space: &SearchSpaceConfig, n: usize, rng: &mut RngStream) -> Tensor {
    let [h, w, c] = space.input_resolution;
    Tensor::new(vec![n, h, w, c], (0..n * h * w * c).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

/// Mean over samples of `-ln(exp(l_y) / sum_{k kept} exp(l_k))`, term by term.
pub fn masked_ce_oracle(logits: &[f64], mask: &[bool], labels: &[usize], classes: usize) -> f64 {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits[i * classes..(i + 1) * classes];
        let keep = &mask[i * classes..(i + 1) * classes];
        let denom: f64 = (0..classes).filter(|&k| keep[k]).map(|k| row[k].exp()).sum();
        total += -(row[y].exp() / denom).ln();
    }
    total / labels.len() as f64
}

/// 16x16 synthetic data, 12 classes in 4 superclasses, 200/50/50 per class.
pub fn mini_data(seed: u64) -> (Splits, SuperclassPartition) {
    let spec = SyntheticSpec { resolution: [16, 16, 3], seed, ..SyntheticSpec::default() };
    (data::synthetic(&spec).unwrap(), SuperclassPartition::contiguous(4, 3))
}

pub fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
