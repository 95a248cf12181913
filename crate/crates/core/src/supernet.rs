//! Weight-sharing elastic supernet.
//!
//! Each block slot stores its tensors at the largest expansion ratio and kernel
//! size. A sub-network uses the first `e * c_in` expanded channels and the
//! centered `k x k` window of the depthwise kernel; a unit of depth `d` runs its
//! first `d` block slots.
//!
//! Two graph forwards exist. [`forward_discrete`] slices the shared tensors for one
//! architecture. [`forward_gated`] runs every slot at full size and blends with gate
//! activations (channel masks, kernel rings, and
//! `H' = H + s * (F(H) - H)` for depth), so gradients reach the gates. With binary
//! gates both produce the same logits.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{EasError, Result};
use crate::space::{from_discrete, normalize, ArchEncoding, BlockGeom, DiscreteArch, SearchSpaceConfig};
use crate::substrate::kernels::{self, ConvGeom};
use crate::substrate::{Checkpoint, Graph, NodeId, ParamMap, Real, RngStream, Tensor};

pub fn block_prefix(unit: usize, block: usize) -> String {
    format!("u{unit}.b{block}")
}

/// Calibrated per-channel statistics, keyed by normalization layer name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub layers: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl NormStats {
    fn get<T: Real>(&self, tag: &str) -> Result<(Vec<T>, Vec<T>)> {
        let (m, v) = self
            .layers
            .get(tag)
            .ok_or_else(|| EasError::Shape(format!("no calibrated statistics for `{tag}`")))?;
        Ok((m.iter().map(|&x| T::from_f64_lossy(x)).collect(), v.iter().map(|&x| T::from_f64_lossy(x)).collect()))
    }
}

#[derive(Clone, Copy, Debug)]
pub enum NormMode<'a> {
    /// Statistics of the current batch.
    Batch,
    /// Calibrated statistics.
    Fixed(&'a NormStats),
}

/// Progressive-shrinking phase: which elastic dimensions are sampled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Largest,
    Kernel,
    KernelDepth,
    All,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Largest => "largest",
            Phase::Kernel => "kernel",
            Phase::KernelDepth => "kernel+depth",
            Phase::All => "all",
        }
    }
    fn kernel(self) -> bool {
        self != Phase::Largest
    }
    fn depth(self) -> bool {
        matches!(self, Phase::KernelDepth | Phase::All)
    }
    fn width(self) -> bool {
        self == Phase::All
    }
}

/// Uniform over the choices unlocked in `phase`; locked dimensions take their
/// largest choice.
pub fn sample_arch(space: &SearchSpaceConfig, phase: Phase, rng: &mut RngStream) -> ArchEncoding {
    let pick = |rng: &mut RngStream, set: &[usize], open: bool| {
        if open {
            set[rng.random_range(0..set.len())]
        } else {
            *set.last().unwrap()
        }
    };
    let arch = DiscreteArch {
        units: space
            .units
            .iter()
            .map(|_| {
                let depth = pick(rng, &space.depth_choices, phase.depth());
                let blocks = (0..depth)
                    .map(|_| crate::space::BlockArch {
                        kernel: pick(rng, &space.kernel_choices, phase.kernel()),
                        expand: pick(rng, &space.expand_choices, phase.width()),
                    })
                    .collect();
                crate::space::UnitArch { depth, blocks }
            })
            .collect(),
    };
    from_discrete(&arch, space).expect("sampled architecture is legal")
}

#[derive(Clone, Debug)]
pub struct Supernet {
    pub space: SearchSpaceConfig,
    pub weights: ParamMap,
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut RngStream) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng) as f32).collect()).unwrap()
}

fn add_norm(w: &mut ParamMap, name: &str, c: usize) {
    w.insert(format!("{name}.g"), Tensor::ones(&[c]));
    w.insert(format!("{name}.b"), Tensor::zeros(&[c]));
}

impl Supernet {
    pub fn init(space: &SearchSpaceConfig, rng: &mut RngStream) -> Result<Self> {
        space.validate()?;
        let mut w = ParamMap::new();
        let k = space.stem.kernel;
        let c_img = space.input_resolution[2];
        w.insert("stem.w".into(), he_normal(&[k, k, c_img, space.stem.channels], k * k * c_img, rng));
        add_norm(&mut w, "stem.bn", space.stem.channels);
        let emax = *space.expand_choices.last().unwrap();
        let kmax = *space.kernel_choices.last().unwrap();
        for geom in space.block_geometry() {
            let p = block_prefix(geom.unit, geom.block);
            let mid = emax * geom.c_in;
            w.insert(format!("{p}.expand.w"), he_normal(&[geom.c_in, mid], geom.c_in, rng));
            add_norm(&mut w, &format!("{p}.expand.bn"), mid);
            w.insert(format!("{p}.dw.w"), he_normal(&[kmax, kmax, mid], 9, rng));
            add_norm(&mut w, &format!("{p}.dw.bn"), mid);
            w.insert(format!("{p}.project.w"), he_normal(&[mid, geom.c_out], mid, rng));
            add_norm(&mut w, &format!("{p}.project.bn"), geom.c_out);
        }
        let (_, _, c_last) = space.head_input();
        w.insert("head.conv.w".into(), he_normal(&[c_last, space.head.hidden], c_last, rng));
        add_norm(&mut w, "head.bn", space.head.hidden);
        w.insert("head.fc.w".into(), he_normal(&[space.head.hidden, space.head.classes], space.head.hidden, rng).map(|v| v * 0.5));
        Ok(Supernet { space: space.clone(), weights: w })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            serde_json::json!({
                "kind": "supernet",
                "space_hash": self.space.hash(),
                "space": self.space,
            }),
            self.weights.clone(),
        )
    }

    /// Loads a checkpoint, refusing one trained for a different space.
    pub fn from_checkpoint(ck: &Checkpoint, space: &SearchSpaceConfig) -> Result<Self> {
        if ck.metadata.get("kind").and_then(|v| v.as_str()) != Some("supernet") {
            return Err(EasError::Checkpoint("not a supernet checkpoint".into()));
        }
        let hash = ck.metadata.get("space_hash").and_then(|v| v.as_str()).unwrap_or_default();
        if hash != space.hash() {
            return Err(EasError::Checkpoint(format!(
                "space hash mismatch: checkpoint {hash}, requested {}",
                space.hash()
            )));
        }
        let reference = Supernet::init(space, &mut RngStream::new(0))?;
        for (name, t) in &reference.weights {
            match ck.tensors.get(name) {
                Some(u) if u.shape() == t.shape() => {}
                _ => return Err(EasError::Checkpoint(format!("missing or misshapen tensor `{name}`"))),
            }
        }
        Ok(Supernet { space: space.clone(), weights: ck.tensors.clone() })
    }

    /// Space stored inside a supernet checkpoint.
    pub fn space_of(ck: &Checkpoint) -> Result<SearchSpaceConfig> {
        let v = ck.metadata.get("space").ok_or_else(|| EasError::Checkpoint("checkpoint has no space".into()))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    /// SHA-256 of the weight payload.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.weights {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn weights_as<T: Real>(&self) -> ParamMap<T> {
        self.weights.iter().map(|(k, v)| (k.clone(), v.cast())).collect()
    }
}

/// Graph-building context for one forward pass.
pub struct Forward<'a, 'g, T: Real> {
    pub g: &'g mut Graph<T>,
    pub weights: &'a ParamMap<T>,
    pub space: &'a SearchSpaceConfig,
    pub norm: NormMode<'a>,
    /// Register weights as trainable parameters (otherwise as constants).
    pub trainable: bool,
    cache: BTreeMap<String, NodeId>,
}

impl<'a, 'g, T: Real> Forward<'a, 'g, T> {
    pub fn new(g: &'g mut Graph<T>, weights: &'a ParamMap<T>, space: &'a SearchSpaceConfig, norm: NormMode<'a>, trainable: bool) -> Self {
        Forward { g, weights, space, norm, trainable, cache: BTreeMap::new() }
    }

    fn w(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.cache.get(name) {
            return Ok(id);
        }
        let t = self.weights.get(name).ok_or_else(|| EasError::Shape(format!("missing weight `{name}`")))?;
        let id = if self.trainable { self.g.param(name, t) } else { self.g.constant(t.clone()) };
        self.cache.insert(name.to_string(), id);
        Ok(id)
    }

    /// Normalization layer `tag` over the first `c` channels.
    fn norm(&mut self, x: NodeId, tag: &str, c: usize) -> Result<NodeId> {
        let mut gamma = self.w(&format!("{tag}.g"))?;
        let mut beta = self.w(&format!("{tag}.b"))?;
        if self.g.shape(gamma)[0] != c {
            gamma = self.g.narrow(gamma, 0, 0, c)?;
            beta = self.g.narrow(beta, 0, 0, c)?;
        }
        match self.norm {
            NormMode::Batch => self.g.batch_norm(x, gamma, beta, tag),
            NormMode::Fixed(stats) => {
                let (m, v) = stats.get::<T>(tag)?;
                if m.len() < c {
                    return Err(EasError::Shape(format!("statistics for `{tag}` cover {} < {c} channels", m.len())));
                }
                self.g.fixed_norm(x, gamma, beta, &m[..c], &v[..c])
            }
        }
    }

    fn check_input(&self, x: NodeId) -> Result<()> {
        let s = self.g.shape(x);
        let [h, w, c] = self.space.input_resolution;
        if s.len() != 4 || s[1] != h || s[2] != w || s[3] != c {
            return Err(EasError::Shape(format!("input {s:?} does not match resolution {h}x{w}x{c}")));
        }
        Ok(())
    }

    fn stem(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_input(x)?;
        let w = self.w("stem.w")?;
        let y = self.g.conv2d(x, w, self.space.stem.stride)?;
        let y = self.norm(y, "stem.bn", self.space.stem.channels)?;
        self.g.hardswish(y)
    }

    fn head(&mut self, x: NodeId) -> Result<NodeId> {
        let w = self.w("head.conv.w")?;
        let y = self.g.pointwise(x, w)?;
        let y = self.norm(y, "head.bn", self.space.head.hidden)?;
        let y = self.g.hardswish(y)?;
        let v = self.g.global_avg_pool(y)?;
        let fc = self.w("head.fc.w")?;
        self.g.matmul(v, fc)
    }

    fn block_discrete(&mut self, x: NodeId, geom: &BlockGeom, kernel: usize, expand: usize) -> Result<NodeId> {
        let p = block_prefix(geom.unit, geom.block);
        let mid = expand * geom.c_in;
        let kmax = *self.space.kernel_choices.last().unwrap();

        let we = self.w(&format!("{p}.expand.w"))?;
        let we = self.g.narrow(we, 1, 0, mid)?;
        let y = self.g.pointwise(x, we)?;
        let y = self.norm(y, &format!("{p}.expand.bn"), mid)?;
        let y = self.g.hardswish(y)?;

        let wd = self.w(&format!("{p}.dw.w"))?;
        let off = (kmax - kernel) / 2;
        let wd = self.g.narrow(wd, 0, off, kernel)?;
        let wd = self.g.narrow(wd, 1, off, kernel)?;
        let wd = self.g.narrow(wd, 2, 0, mid)?;
        let y = self.g.depthwise(y, wd, geom.stride)?;
        let y = self.norm(y, &format!("{p}.dw.bn"), mid)?;
        let y = self.g.hardswish(y)?;

        let wp = self.w(&format!("{p}.project.w"))?;
        let wp = self.g.narrow(wp, 0, 0, mid)?;
        let y = self.g.pointwise(y, wp)?;
        let y = self.norm(y, &format!("{p}.project.bn"), geom.c_out)?;
        if geom.has_residual() {
            self.g.add(x, y)
        } else {
            Ok(y)
        }
    }

    /// Logits of the sub-network `arch`, using sliced views of the shared weights.
    pub fn discrete(&mut self, x: NodeId, arch: &DiscreteArch) -> Result<NodeId> {
        arch.validate(self.space)?;
        let mut h = self.stem(x)?;
        for geom in self.space.block_geometry() {
            let unit = &arch.units[geom.unit];
            if geom.block >= unit.depth {
                continue;
            }
            let blk = unit.blocks[geom.block];
            h = self.block_discrete(h, &geom, blk.kernel, blk.expand)?;
        }
        self.head(h)
    }

    /// Logits under real-valued gate activations `gates` (`[gate_count]`).
    pub fn gated(&mut self, x: NodeId, gates: NodeId) -> Result<NodeId> {
        let space = self.space;
        let layout = space.layout();
        if self.g.shape(gates) != [layout.len()] {
            return Err(EasError::Shape(format!("expected {} gates, got {:?}", layout.len(), self.g.shape(gates))));
        }
        let gate: Vec<NodeId> = (0..layout.len()).map(|i| self.g.element(gates, i)).collect::<Result<_>>()?;
        let running = |g: &mut Graph<T>, idx: &[usize]| -> Result<Vec<NodeId>> {
            let mut out: Vec<NodeId> = Vec::with_capacity(idx.len());
            for &i in idx {
                let next = match out.last() {
                    Some(&prev) => g.mul(prev, gate[i])?,
                    None => gate[i],
                };
                out.push(next);
            }
            Ok(out)
        };

        let emax = *space.expand_choices.last().unwrap();
        let kmax = *space.kernel_choices.last().unwrap();
        let one = self.g.constant(Tensor::scalar(T::one()));
        let mut h = self.stem(x)?;
        for geom in space.block_geometry() {
            let unit = &layout.units[geom.unit];
            let switch = match unit.block_switch[geom.block] {
                None => None,
                Some(usize::MAX) => continue,
                Some(j) => {
                    let depth: Vec<usize> = unit.depth.clone().collect();
                    Some(*running(self.g, &depth[..=j])?.last().unwrap())
                }
            };
            let (kr, er) = unit.blocks[geom.block].clone();
            let e_eff = running(self.g, &er.collect::<Vec<_>>())?;
            let k_eff = running(self.g, &kr.collect::<Vec<_>>())?;

            // expansion channel mask: segment i has (e_i - e_{i-1}) * c_in channels
            let mut segs = Vec::new();
            for (i, &e) in space.expand_choices.iter().enumerate() {
                let prev = if i == 0 { 0 } else { space.expand_choices[i - 1] };
                let src = if i == 0 { one } else { e_eff[i - 1] };
                segs.push(self.g.fill(src, &[(e - prev) * geom.c_in])?);
            }
            let mask = self.g.concat(&segs, 0)?;

            let p = block_prefix(geom.unit, geom.block);
            let mid = emax * geom.c_in;
            let we = self.w(&format!("{p}.expand.w"))?;
            let y = self.g.pointwise(h, we)?;
            let y = self.norm(y, &format!("{p}.expand.bn"), mid)?;
            let y = self.g.hardswish(y)?;
            let y = self.g.mul_channels(y, mask)?;

            let wd = self.w(&format!("{p}.dw.w"))?;
            let mut kernel = None;
            for (j, &k) in space.kernel_choices.iter().enumerate() {
                let prev = if j == 0 { 0 } else { space.kernel_choices[j - 1] };
                let ring = ring_mask::<T>(kmax, prev, k, mid);
                let part = self.g.mul_const(wd, &ring)?;
                kernel = Some(match kernel {
                    None => part,
                    Some(acc) => {
                        let scaled = self.g.scale_by(part, k_eff[j - 1])?;
                        self.g.add(acc, scaled)?
                    }
                });
            }
            let y = self.g.depthwise(y, kernel.unwrap(), geom.stride)?;
            let y = self.norm(y, &format!("{p}.dw.bn"), mid)?;
            let y = self.g.hardswish(y)?;
            let y = self.g.mul_channels(y, mask)?;

            let wp = self.w(&format!("{p}.project.w"))?;
            let y = self.g.pointwise(y, wp)?;
            let y = self.norm(y, &format!("{p}.project.bn"), geom.c_out)?;
            let f = if geom.has_residual() { self.g.add(h, y)? } else { y };
            h = match switch {
                None => f,
                Some(s) => {
                    let diff = self.g.sub(f, h)?;
                    let step = self.g.scale_by(diff, s)?;
                    self.g.add(h, step)?
                }
            };
        }
        self.head(h)
    }
}

/// `[k, k, c]` indicator of the square ring between the centered `inner` and
/// `outer` windows of a `k x k` kernel (`inner = 0` gives the full window).
fn ring_mask<T: Real>(k: usize, inner: usize, outer: usize, c: usize) -> Tensor<T> {
    let inside = |y: usize, x: usize, size: usize| {
        let off = (k - size) / 2;
        size > 0 && y >= off && y < off + size && x >= off && x < off + size
    };
    let mut data = Vec::with_capacity(k * k * c);
    for y in 0..k {
        for x in 0..k {
            let v = if inside(y, x, outer) && !inside(y, x, inner) { T::one() } else { T::zero() };
            data.extend(std::iter::repeat_n(v, c));
        }
    }
    Tensor::new(vec![k, k, c], data).unwrap()
}

/// Logits of `arch` via sliced shared weights.
pub fn forward_discrete<T: Real>(
    g: &mut Graph<T>,
    weights: &ParamMap<T>,
    space: &SearchSpaceConfig,
    x: NodeId,
    arch: &DiscreteArch,
    norm: NormMode,
    trainable: bool,
) -> Result<NodeId> {
    Forward::new(g, weights, space, norm, trainable).discrete(x, arch)
}

/// Logits under gate activations.
pub fn forward_gated<T: Real>(
    g: &mut Graph<T>,
    weights: &ParamMap<T>,
    space: &SearchSpaceConfig,
    x: NodeId,
    gates: NodeId,
    norm: NormMode,
    trainable: bool,
) -> Result<NodeId> {
    Forward::new(g, weights, space, norm, trainable).gated(x, gates)
}

/// Logits of a normalized encoding (one forward, no gradients).
pub fn logits_for(net: &Supernet, x: &Tensor, enc: &ArchEncoding, norm: NormMode) -> Result<Tensor> {
    let arch = crate::space::to_discrete(enc, &net.space)?;
    let mut g = Graph::<f32>::new();
    let xi = g.input(x.clone());
    let y = forward_discrete(&mut g, &net.weights, &net.space, xi, &arch, norm, false)?;
    Ok(g.value(y).clone())
}

/// Averages batch statistics of `arch` over `data` (chunks of `chunk` samples).
pub fn calibrate(net: &Supernet, arch: &DiscreteArch, data: &Tensor, chunk: usize) -> Result<NormStats> {
    let n = data.shape()[0];
    let mut sums: BTreeMap<String, (Vec<f64>, Vec<f64>, f64)> = BTreeMap::new();
    let mut start = 0;
    while start < n {
        let len = chunk.min(n - start);
        let batch = data.narrow(0, start, len)?;
        let mut g = Graph::<f32>::new();
        g.record_norm_stats();
        let xi = g.input(batch);
        forward_discrete(&mut g, &net.weights, &net.space, xi, arch, NormMode::Batch, false)?;
        for (tag, mean, var) in g.take_norm_stats().unwrap_or_default() {
            let e = sums.entry(tag).or_insert_with(|| (vec![0.0; mean.len()], vec![0.0; mean.len()], 0.0));
            let wgt = len as f64;
            for i in 0..mean.len() {
                let m = mean[i] as f64;
                e.0[i] += wgt * m;
                e.1[i] += wgt * (var[i] as f64 + m * m);
            }
            e.2 += wgt;
        }
        start += len;
    }
    let layers = sums
        .into_iter()
        .map(|(tag, (m, sq, w))| {
            let mean: Vec<f64> = m.iter().map(|v| v / w).collect();
            let var = sq.iter().zip(&mean).map(|(s, mu)| (s / w - mu * mu).max(0.0)).collect();
            (tag, (mean, var))
        })
        .collect();
    Ok(NormStats { layers })
}

/// Standalone copy of one sub-network with its own (sliced) tensors.
#[derive(Clone, Debug)]
pub struct Standalone {
    pub space: SearchSpaceConfig,
    pub arch: DiscreteArch,
    pub tensors: ParamMap,
}

pub fn extract(net: &Supernet, arch: &DiscreteArch) -> Result<Standalone> {
    arch.validate(&net.space)?;
    let space = &net.space;
    let kmax = *space.kernel_choices.last().unwrap();
    let mut t = ParamMap::new();
    let copy = |t: &mut ParamMap, name: &str| {
        t.insert(name.to_string(), net.weights[name].clone());
    };
    for name in ["stem.w", "stem.bn.g", "stem.bn.b", "head.conv.w", "head.bn.g", "head.bn.b", "head.fc.w"] {
        copy(&mut t, name);
    }
    for geom in space.block_geometry() {
        let unit = &arch.units[geom.unit];
        if geom.block >= unit.depth {
            continue;
        }
        let blk = unit.blocks[geom.block];
        let p = block_prefix(geom.unit, geom.block);
        let mid = blk.expand * geom.c_in;
        let off = (kmax - blk.kernel) / 2;
        let w = &net.weights;
        t.insert(format!("{p}.expand.w"), w[&format!("{p}.expand.w")].narrow(1, 0, mid)?);
        for (layer, c) in [("expand.bn", mid), ("dw.bn", mid), ("project.bn", geom.c_out)] {
            for s in ["g", "b"] {
                let name = format!("{p}.{layer}.{s}");
                t.insert(name.clone(), w[&name].narrow(0, 0, c)?);
            }
        }
        let dw = w[&format!("{p}.dw.w")].narrow(0, off, blk.kernel)?.narrow(1, off, blk.kernel)?.narrow(2, 0, mid)?;
        t.insert(format!("{p}.dw.w"), dw);
        t.insert(format!("{p}.project.w"), w[&format!("{p}.project.w")].narrow(0, 0, mid)?);
    }
    Ok(Standalone { space: space.clone(), arch: arch.clone(), tensors: t })
}

impl Standalone {
    fn normalize(&self, x: &mut Vec<f32>, c: usize, tag: &str, stats: Option<&NormStats>) -> Result<()> {
        let gamma = self.tensors[&format!("{tag}.g")].data();
        let beta = self.tensors[&format!("{tag}.b")].data();
        let (mean, var): (Vec<f32>, Vec<f32>) = match stats {
            Some(s) => {
                let (m, v) = s.get::<f32>(tag)?;
                (m[..c].to_vec(), v[..c].to_vec())
            }
            None => kernels::channel_stats(x, c),
        };
        *x = kernels::normalize_affine(x, &mean, &var, gamma, beta);
        Ok(())
    }

    /// Plain-loop inference. `stats = None` normalizes with batch statistics.
    pub fn forward(&self, x: &Tensor, stats: Option<&NormStats>) -> Result<Tensor> {
        let space = &self.space;
        let s = x.shape();
        let [h0, w0, c0] = space.input_resolution;
        if s.len() != 4 || s[1] != h0 || s[2] != w0 || s[3] != c0 {
            return Err(EasError::Shape(format!("input {s:?} does not match resolution {h0}x{w0}x{c0}")));
        }
        let n = s[0];
        let hsw = |v: &mut Vec<f32>| v.iter_mut().for_each(|a| *a = kernels::hardswish(*a));

        let stem = ConvGeom { n, h: h0, w: w0, c_in: c0, c_out: space.stem.channels, k: space.stem.kernel, stride: space.stem.stride };
        let mut cur = kernels::conv2d_direct(x.data(), self.tensors["stem.w"].data(), stem);
        self.normalize(&mut cur, space.stem.channels, "stem.bn", stats)?;
        hsw(&mut cur);

        for geom in space.block_geometry() {
            let unit = &self.arch.units[geom.unit];
            if geom.block >= unit.depth {
                continue;
            }
            let blk = unit.blocks[geom.block];
            let p = block_prefix(geom.unit, geom.block);
            let mid = blk.expand * geom.c_in;
            let rows = n * geom.h * geom.w;
            let mut y = kernels::matmul(&cur, self.tensors[&format!("{p}.expand.w")].data(), rows, geom.c_in, mid);
            self.normalize(&mut y, mid, &format!("{p}.expand.bn"), stats)?;
            hsw(&mut y);
            let dg = ConvGeom { n, h: geom.h, w: geom.w, c_in: mid, c_out: mid, k: blk.kernel, stride: geom.stride };
            let mut y = kernels::depthwise(&y, self.tensors[&format!("{p}.dw.w")].data(), dg);
            self.normalize(&mut y, mid, &format!("{p}.dw.bn"), stats)?;
            hsw(&mut y);
            let rows_out = n * dg.out_h() * dg.out_w();
            let mut y = kernels::matmul(&y, self.tensors[&format!("{p}.project.w")].data(), rows_out, mid, geom.c_out);
            self.normalize(&mut y, geom.c_out, &format!("{p}.project.bn"), stats)?;
            if geom.has_residual() {
                y.iter_mut().zip(&cur).for_each(|(a, &b)| *a += b);
            }
            cur = y;
        }

        let (hh, hw, hc) = space.head_input();
        let mut y = kernels::matmul(&cur, self.tensors["head.conv.w"].data(), n * hh * hw, hc, space.head.hidden);
        self.normalize(&mut y, space.head.hidden, "head.bn", stats)?;
        hsw(&mut y);
        let v = kernels::global_avg_pool(&y, n, hh * hw, space.head.hidden);
        let logits = kernels::matmul(&v, self.tensors["head.fc.w"].data(), n, space.head.hidden, space.head.classes);
        Tensor::new(vec![n, space.head.classes], logits)
    }
}

/// Normalized encoding of gate activations thresholded at 0.5.
pub fn encoding_from_activations(acts: &[f64], space: &SearchSpaceConfig) -> Result<ArchEncoding> {
    normalize(&acts.iter().map(|&a| a > 0.5).collect::<Vec<_>>(), space)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{to_discrete, HeadConfig, StemConfig, UnitConfig};

    fn small_space() -> SearchSpaceConfig {
        SearchSpaceConfig {
            units: vec![
                UnitConfig { output_channels: 4, stride: 1, max_blocks: 4, min_blocks: 2 },
                UnitConfig { output_channels: 6, stride: 2, max_blocks: 4, min_blocks: 2 },
            ],
            depth_choices: vec![2, 3, 4],
            expand_choices: vec![3, 4, 6],
            kernel_choices: vec![3, 5, 7],
            stem: StemConfig { channels: 4, kernel: 3, stride: 1 },
            head: HeadConfig { hidden: 8, classes: 5 },
            input_resolution: [8, 8, 3],
        }
    }

    fn batch(space: &SearchSpaceConfig, n: usize, seed: u64) -> Tensor {
        let mut r = RngStream::new(seed);
        let [h, w, c] = space.input_resolution;
        Tensor::new(vec![n, h, w, c], (0..n * h * w * c).map(|_| r.random_range(-1.0f32..1.0)).collect()).unwrap()
    }

    #[test]
    fn ring_masks_partition_the_kernel() {
        let a = ring_mask::<f32>(7, 0, 3, 1);
        let b = ring_mask::<f32>(7, 3, 5, 1);
        let c = ring_mask::<f32>(7, 5, 7, 1);
        assert_eq!(a.sum(), 9.0);
        assert_eq!(b.sum(), 16.0);
        assert_eq!(c.sum(), 24.0);
        for i in 0..49 {
            assert_eq!(a.data()[i] + b.data()[i] + c.data()[i], 1.0);
        }
    }

    #[test]
    fn gated_binary_equals_discrete() {
        let space = small_space();
        let net = Supernet::init(&space, &mut RngStream::new(1)).unwrap();
        let x = batch(&space, 4, 2);
        let mut r = RngStream::new(3);
        for _ in 0..5 {
            let enc = sample_arch(&space, Phase::All, &mut r);
            let arch = to_discrete(&enc, &space).unwrap();
            let mut g = Graph::<f32>::new();
            let xi = g.input(x.clone());
            let a = forward_discrete(&mut g, &net.weights, &space, xi, &arch, NormMode::Batch, false).unwrap();
            let gates = g.constant(Tensor::from_vec(enc.as_f64().iter().map(|&v| v as f32).collect()));
            let b = forward_gated(&mut g, &net.weights, &space, xi, gates, NormMode::Batch, false).unwrap();
            for (p, q) in g.value(a).data().iter().zip(g.value(b).data()) {
                assert!((p - q).abs() < 1e-5, "{p} vs {q}");
            }
        }
    }

    #[test]
    fn sample_phase_kernel_only() {
        let space = small_space();
        let mut r = RngStream::new(9);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..200 {
            let arch = to_discrete(&sample_arch(&space, Phase::Kernel, &mut r), &space).unwrap();
            for u in &arch.units {
                assert_eq!(u.depth, 4);
                for b in &u.blocks {
                    assert_eq!(b.expand, 6);
                    seen.insert(b.kernel);
                }
            }
        }
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![3, 5, 7]);
    }

    #[test]
    fn checkpoint_refuses_other_space() {
        let space = small_space();
        let net = Supernet::init(&space, &mut RngStream::new(1)).unwrap();
        let ck = net.to_checkpoint();
        assert!(Supernet::from_checkpoint(&ck, &space).is_ok());
        let mut other = space.clone();
        other.head.classes = 6;
        assert!(matches!(Supernet::from_checkpoint(&ck, &other), Err(EasError::Checkpoint(_))));
        assert_eq!(Supernet::space_of(&ck).unwrap(), space);
    }

    #[test]
    fn extract_largest_copies_full_tensors() {
        let space = small_space();
        let net = Supernet::init(&space, &mut RngStream::new(4)).unwrap();
        let s = extract(&net, &space.largest_arch()).unwrap();
        for (k, v) in &s.tensors {
            assert_eq!(v, &net.weights[k], "{k}");
        }
    }

    #[test]
    fn extract_minimal_slices_center_and_prefix() {
        let space = small_space();
        let net = Supernet::init(&space, &mut RngStream::new(4)).unwrap();
        let s = extract(&net, &space.minimal_arch()).unwrap();
        let full = &net.weights["u0.b0.dw.w"];
        let part = &s.tensors["u0.b0.dw.w"];
        assert_eq!(part.shape(), &[3, 3, 12]);
        let c = full.shape()[2];
        for y in 0..3 {
            for x in 0..3 {
                for ch in 0..12 {
                    assert_eq!(part.data()[(y * 3 + x) * 12 + ch], full.data()[((y + 2) * 7 + x + 2) * c + ch]);
                }
            }
        }
        assert_eq!(s.tensors["u0.b0.expand.w"].shape(), &[4, 12]);
        assert!(!s.tensors.contains_key("u0.b2.expand.w"));
    }
}
