//! Elastic search space and its single-path gate encoding.
//!
//! Every elastic dimension with `n` ordered choices is encoded by `n - 1` nested
//! binary gates (a thermometer code): the choice index is the number of leading
//! ones. Per unit the layout is `[depth gates]` followed, for each of the
//! `max_blocks` blocks, by `[kernel gates, expansion gates]`. With the default
//! choice sets that is `[g_d3, g_d4]` then `[g_k5, g_k7, g_e4, g_e6]` per block.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{EasError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitConfig {
    pub output_channels: usize,
    /// Applied at the first block of the unit.
    pub stride: usize,
    #[serde(default = "default_max_blocks")]
    pub max_blocks: usize,
    #[serde(default = "default_min_blocks")]
    pub min_blocks: usize,
}

fn default_max_blocks() -> usize {
    4
}
fn default_min_blocks() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemConfig {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Width of the final pointwise layer feeding the classifier.
    pub hidden: usize,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpaceConfig {
    pub units: Vec<UnitConfig>,
    pub depth_choices: Vec<usize>,
    pub expand_choices: Vec<usize>,
    pub kernel_choices: Vec<usize>,
    pub stem: StemConfig,
    pub head: HeadConfig,
    /// `[height, width, channels]`.
    pub input_resolution: [usize; 3],
}

impl SearchSpaceConfig {
    /// Five MobileNetV3-like units sized for 32x32 inputs.
    pub fn default_desk(classes: usize) -> Self {
        let plan = [(16, 1), (24, 2), (32, 2), (48, 2), (64, 1)];
        SearchSpaceConfig {
            units: plan
                .iter()
                .map(|&(c, s)| UnitConfig { output_channels: c, stride: s, max_blocks: 4, min_blocks: 2 })
                .collect(),
            depth_choices: vec![2, 3, 4],
            expand_choices: vec![3, 4, 6],
            kernel_choices: vec![3, 5, 7],
            stem: StemConfig { channels: 16, kernel: 3, stride: 2 },
            head: HeadConfig { hidden: 128, classes },
            input_resolution: [32, 32, 3],
        }
    }

    /// Narrow variant of [`Self::default_desk`] for 16x16 inputs.
    pub fn mini(classes: usize) -> Self {
        let mut s = Self::default_desk(classes);
        for (u, c) in s.units.iter_mut().zip([8, 12, 16, 24, 32]) {
            u.output_channels = c;
        }
        s.stem = StemConfig { channels: 8, kernel: 3, stride: 1 };
        s.head.hidden = 64;
        s.input_resolution = [16, 16, 3];
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SearchSpaceConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("space config serializes")
    }

    /// SHA-256 of the compact JSON form, used to tie checkpoints to a space.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("space config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EasError::Space(m));
        if self.units.is_empty() {
            return bad("no units".into());
        }
        for (name, set) in [("depth", &self.depth_choices), ("expand", &self.expand_choices), ("kernel", &self.kernel_choices)] {
            if set.is_empty() {
                return bad(format!("{name} choices are empty"));
            }
            if set.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("{name} choices must be strictly increasing: {set:?}"));
            }
        }
        if self.kernel_choices.iter().any(|k| k % 2 == 0) || self.stem.kernel % 2 == 0 {
            return bad("kernel sizes must be odd".into());
        }
        if self.expand_choices[0] == 0 {
            return bad("expansion ratio must be positive".into());
        }
        let [mut h, mut w, c] = self.input_resolution;
        if h == 0 || w == 0 || c == 0 {
            return bad("input resolution must be positive".into());
        }
        for (what, s) in std::iter::once(("stem", self.stem.stride)).chain(self.units.iter().map(|u| ("unit", u.stride))) {
            if s == 0 || h % s != 0 || w % s != 0 {
                return bad(format!("{what} stride {s} does not divide feature map {h}x{w}"));
            }
            h /= s;
            w /= s;
        }
        for (i, u) in self.units.iter().enumerate() {
            if u.min_blocks == 0 || u.min_blocks > u.max_blocks {
                return bad(format!("unit {i}: need 1 <= min_blocks <= max_blocks"));
            }
            if u.output_channels == 0 || !(u.stride == 1 || u.stride == 2) {
                return bad(format!("unit {i}: channels must be positive and stride 1 or 2"));
            }
            if self.depth_choices[0] < u.min_blocks || *self.depth_choices.last().unwrap() > u.max_blocks {
                return bad(format!(
                    "unit {i}: depth choices {:?} outside [{}, {}]",
                    self.depth_choices, u.min_blocks, u.max_blocks
                ));
            }
        }
        if self.stem.channels == 0 || self.head.hidden == 0 || self.head.classes == 0 {
            return bad("stem channels, head width and class count must be positive".into());
        }
        Ok(())
    }

    pub fn layout(&self) -> GateLayout {
        GateLayout::new(self)
    }

    pub fn gate_count(&self) -> usize {
        self.layout().len()
    }

    /// Geometry of every block slot, in forward order.
    pub fn block_geometry(&self) -> Vec<BlockGeom> {
        let [h0, w0, _] = self.input_resolution;
        let (mut h, mut w) = (h0 / self.stem.stride, w0 / self.stem.stride);
        let mut c_in = self.stem.channels;
        let mut out = Vec::new();
        for (u, unit) in self.units.iter().enumerate() {
            for b in 0..unit.max_blocks {
                let stride = if b == 0 { unit.stride } else { 1 };
                out.push(BlockGeom { unit: u, block: b, h, w, c_in, c_out: unit.output_channels, stride });
                h /= stride;
                w /= stride;
                c_in = unit.output_channels;
            }
        }
        out
    }

    /// Spatial size and channel count entering the head.
    pub fn head_input(&self) -> (usize, usize, usize) {
        let last = self.block_geometry().last().copied().unwrap();
        (last.h / last.stride, last.w / last.stride, last.c_out)
    }

    pub fn minimal_arch(&self) -> DiscreteArch {
        self.uniform_arch(0)
    }

    pub fn largest_arch(&self) -> DiscreteArch {
        DiscreteArch {
            units: self
                .units
                .iter()
                .map(|_| {
                    let depth = *self.depth_choices.last().unwrap();
                    UnitArch {
                        depth,
                        blocks: vec![
                            BlockArch {
                                kernel: *self.kernel_choices.last().unwrap(),
                                expand: *self.expand_choices.last().unwrap()
                            };
                            depth
                        ],
                    }
                })
                .collect(),
        }
    }

    fn uniform_arch(&self, idx: usize) -> DiscreteArch {
        DiscreteArch {
            units: self
                .units
                .iter()
                .map(|_| {
                    let depth = self.depth_choices[idx];
                    UnitArch {
                        depth,
                        blocks: vec![BlockArch { kernel: self.kernel_choices[idx], expand: self.expand_choices[idx] }; depth],
                    }
                })
                .collect(),
        }
    }

    /// Number of legal architectures, `prod_u sum_d (|K| * |E|)^d`.
    pub fn count(&self) -> u128 {
        let per_block = (self.kernel_choices.len() * self.expand_choices.len()) as u128;
        self.units
            .iter()
            .map(|_| self.depth_choices.iter().map(|&d| per_block.pow(d as u32)).sum::<u128>())
            .try_fold(1u128, |acc, x| acc.checked_mul(x))
            .unwrap_or(u128::MAX)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockGeom {
    pub unit: usize,
    pub block: usize,
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
}

impl BlockGeom {
    pub fn has_residual(&self) -> bool {
        self.stride == 1 && self.c_in == self.c_out
    }
}

/// Gate index ranges for one unit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnitLayout {
    pub depth: Range<usize>,
    /// Per block slot: (kernel gates, expansion gates).
    pub blocks: Vec<(Range<usize>, Range<usize>)>,
    /// Per block slot: index into `depth` of the effective depth gate that switches
    /// the block on, or `None` if the block is always present.
    pub block_switch: Vec<Option<usize>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GateLayout {
    pub units: Vec<UnitLayout>,
    len: usize,
}

impl GateLayout {
    fn new(space: &SearchSpaceConfig) -> Self {
        let nd = space.depth_choices.len() - 1;
        let nk = space.kernel_choices.len() - 1;
        let ne = space.expand_choices.len() - 1;
        let mut at = 0;
        let mut units = Vec::new();
        for unit in &space.units {
            let depth = at..at + nd;
            at += nd;
            let mut blocks = Vec::new();
            let mut block_switch = Vec::new();
            for b in 0..unit.max_blocks {
                let k = at..at + nk;
                at += nk;
                let e = at..at + ne;
                at += ne;
                blocks.push((k, e));
                // block b runs iff depth > b; first choice index with depth > b
                let first = space.depth_choices.iter().position(|&d| d > b);
                block_switch.push(match first {
                    Some(0) => None,
                    Some(j) => Some(j - 1),
                    None => Some(usize::MAX),
                });
            }
            units.push(UnitLayout { depth, blocks, block_switch });
        }
        GateLayout { units, len: at }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Gates of the nested groups (each a thermometer code).
    pub fn groups(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        self.units.iter().flat_map(|u| {
            std::iter::once(u.depth.clone()).chain(u.blocks.iter().flat_map(|(k, e)| [k.clone(), e.clone()]))
        })
    }
}

/// Flat binary gate vector. Only encodings produced by [`normalize`] or
/// [`from_discrete`] are guaranteed canonical.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchEncoding {
    pub gates: Vec<bool>,
}

impl ArchEncoding {
    pub fn from_raw(gates: Vec<bool>) -> Self {
        ArchEncoding { gates }
    }

    pub fn zeros(space: &SearchSpaceConfig) -> Self {
        ArchEncoding { gates: vec![false; space.gate_count()] }
    }

    pub fn ones(space: &SearchSpaceConfig) -> Self {
        ArchEncoding { gates: vec![true; space.gate_count()] }
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.gates.iter().map(|&g| if g { 1.0 } else { 0.0 }).collect()
    }

    pub fn is_normalized(&self, space: &SearchSpaceConfig) -> bool {
        self.gates.len() == space.gate_count() && normalize(&self.gates, space).map(|n| n == *self).unwrap_or(false)
    }
}

/// Canonical form: each nested group becomes the running conjunction of its raw
/// gates, and gates of blocks the depth gates switch off are cleared.
pub fn normalize(raw: &[bool], space: &SearchSpaceConfig) -> Result<ArchEncoding> {
    let layout = space.layout();
    if raw.len() != layout.len() {
        return Err(EasError::Encoding(format!("expected {} gates, got {}", layout.len(), raw.len())));
    }
    let mut g = raw.to_vec();
    for range in layout.groups() {
        let mut on = true;
        for i in range {
            on &= g[i];
            g[i] = on;
        }
    }
    for unit in &layout.units {
        for (b, (k, e)) in unit.blocks.iter().enumerate() {
            if !block_active(&g, unit, b) {
                for i in k.clone().chain(e.clone()) {
                    g[i] = false;
                }
            }
        }
    }
    Ok(ArchEncoding { gates: g })
}

fn block_active(g: &[bool], unit: &UnitLayout, b: usize) -> bool {
    match unit.block_switch[b] {
        None => true,
        Some(usize::MAX) => false,
        Some(j) => g[unit.depth.start + j],
    }
}

fn ones_in(g: &[bool], r: Range<usize>) -> usize {
    g[r].iter().filter(|&&v| v).count()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockArch {
    pub kernel: usize,
    pub expand: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UnitArch {
    pub depth: usize,
    /// Exactly `depth` entries.
    pub blocks: Vec<BlockArch>,
}

/// Architecture in canonical discrete form; the JSON interchange format.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DiscreteArch {
    pub units: Vec<UnitArch>,
}

impl DiscreteArch {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("arch serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn validate(&self, space: &SearchSpaceConfig) -> Result<()> {
        if self.units.len() != space.units.len() {
            return Err(EasError::IllegalArch(format!(
                "{} units, space has {}",
                self.units.len(),
                space.units.len()
            )));
        }
        for (i, u) in self.units.iter().enumerate() {
            if !space.depth_choices.contains(&u.depth) {
                return Err(EasError::IllegalArch(format!("unit {i}: depth {} not in {:?}", u.depth, space.depth_choices)));
            }
            if u.blocks.len() != u.depth {
                return Err(EasError::IllegalArch(format!("unit {i}: {} blocks for depth {}", u.blocks.len(), u.depth)));
            }
            for (b, blk) in u.blocks.iter().enumerate() {
                if !space.kernel_choices.contains(&blk.kernel) {
                    return Err(EasError::IllegalArch(format!("unit {i} block {b}: kernel {}", blk.kernel)));
                }
                if !space.expand_choices.contains(&blk.expand) {
                    return Err(EasError::IllegalArch(format!("unit {i} block {b}: expand {}", blk.expand)));
                }
            }
        }
        Ok(())
    }
}

pub fn to_discrete(enc: &ArchEncoding, space: &SearchSpaceConfig) -> Result<DiscreteArch> {
    if !enc.is_normalized(space) {
        return Err(EasError::Encoding("encoding is not normalized".into()));
    }
    let layout = space.layout();
    let g = &enc.gates;
    let units = layout
        .units
        .iter()
        .map(|u| {
            let depth = space.depth_choices[ones_in(g, u.depth.clone())];
            let blocks = u.blocks[..depth]
                .iter()
                .map(|(k, e)| BlockArch {
                    kernel: space.kernel_choices[ones_in(g, k.clone())],
                    expand: space.expand_choices[ones_in(g, e.clone())],
                })
                .collect();
            UnitArch { depth, blocks }
        })
        .collect();
    Ok(DiscreteArch { units })
}

pub fn from_discrete(d: &DiscreteArch, space: &SearchSpaceConfig) -> Result<ArchEncoding> {
    d.validate(space)?;
    let layout = space.layout();
    let mut g = vec![false; layout.len()];
    let set = |g: &mut Vec<bool>, r: Range<usize>, n: usize| {
        for i in r.take(n) {
            g[i] = true;
        }
    };
    for (u, ua) in layout.units.iter().zip(&d.units) {
        let di = space.depth_choices.iter().position(|&x| x == ua.depth).unwrap();
        set(&mut g, u.depth.clone(), di);
        for ((k, e), blk) in u.blocks.iter().zip(&ua.blocks) {
            set(&mut g, k.clone(), space.kernel_choices.iter().position(|&x| x == blk.kernel).unwrap());
            set(&mut g, e.clone(), space.expand_choices.iter().position(|&x| x == blk.expand).unwrap());
        }
    }
    Ok(ArchEncoding { gates: g })
}

/// One-hot architecture vector: per unit the depth choice, then per block slot
/// the kernel and expansion choices (all zero for inactive slots).
pub fn one_hot(d: &DiscreteArch, space: &SearchSpaceConfig) -> Result<Vec<f64>> {
    d.validate(space)?;
    let (nd, nk, ne) = (space.depth_choices.len(), space.kernel_choices.len(), space.expand_choices.len());
    let mut v = Vec::new();
    for (unit, ua) in space.units.iter().zip(&d.units) {
        let mut depth = vec![0.0; nd];
        depth[space.depth_choices.iter().position(|&x| x == ua.depth).unwrap()] = 1.0;
        v.extend(depth);
        for b in 0..unit.max_blocks {
            let mut k = vec![0.0; nk];
            let mut e = vec![0.0; ne];
            if let Some(blk) = ua.blocks.get(b) {
                k[space.kernel_choices.iter().position(|&x| x == blk.kernel).unwrap()] = 1.0;
                e[space.expand_choices.iter().position(|&x| x == blk.expand).unwrap()] = 1.0;
            }
            v.extend(k);
            v.extend(e);
        }
    }
    Ok(v)
}

/// Cosine similarity of two one-hot vectors of the same space.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(EasError::Space(format!("one-hot lengths differ: {} vs {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>();
    let nb = b.iter().map(|x| x * x).sum::<f64>();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb).sqrt()).clamp(0.0, 1.0))
}

pub fn arch_cosine(a: &DiscreteArch, b: &DiscreteArch, space: &SearchSpaceConfig) -> Result<f64> {
    cosine(&one_hot(a, space)?, &one_hot(b, space)?)
}

/// Every legal architecture exactly once, in odometer order (last unit fastest).
pub fn enumerate(space: &SearchSpaceConfig, limit: u128) -> Result<ArchIter> {
    let count = space.count();
    if count > limit {
        return Err(EasError::SpaceTooLarge { count, limit });
    }
    let per_unit: Vec<Vec<UnitArch>> = space.units.iter().map(|_| unit_options(space)).collect();
    Ok(ArchIter { per_unit, cursor: vec![0; space.units.len()], done: false })
}

fn unit_options(space: &SearchSpaceConfig) -> Vec<UnitArch> {
    let mut blocks_choices = Vec::new();
    for &k in &space.kernel_choices {
        for &e in &space.expand_choices {
            blocks_choices.push(BlockArch { kernel: k, expand: e });
        }
    }
    let mut out = Vec::new();
    for &depth in &space.depth_choices {
        let mut idx = vec![0usize; depth];
        'odometer: loop {
            out.push(UnitArch { depth, blocks: idx.iter().map(|&i| blocks_choices[i]).collect() });
            for p in (0..depth).rev() {
                idx[p] += 1;
                if idx[p] < blocks_choices.len() {
                    continue 'odometer;
                }
                idx[p] = 0;
            }
            break;
        }
    }
    out
}

pub struct ArchIter {
    per_unit: Vec<Vec<UnitArch>>,
    cursor: Vec<usize>,
    done: bool,
}

impl Iterator for ArchIter {
    type Item = DiscreteArch;

    fn next(&mut self) -> Option<DiscreteArch> {
        if self.done {
            return None;
        }
        let arch = DiscreteArch {
            units: self.cursor.iter().zip(&self.per_unit).map(|(&i, opts)| opts[i].clone()).collect(),
        };
        let mut p = self.cursor.len();
        loop {
            if p == 0 {
                self.done = true;
                break;
            }
            p -= 1;
            self.cursor[p] += 1;
            if self.cursor[p] < self.per_unit[p].len() {
                break;
            }
            self.cursor[p] = 0;
        }
        Some(arch)
    }
}
