//! Recurrent architecture generator `G(B, t; theta)`.
//!
//! A request (superclass `t`, budget `B`) is embedded as the concatenation of a
//! learned superclass vector and a budget vector interpolated between `K` learned
//! anchors. An LSTM unrolled once per unit reads that embedding at every step and
//! three linear heads emit the unit's depth, kernel and expansion gate logits.

use rand::seq::IteratorRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cost::CostTable;
use crate::data::{Dataset, SuperclassPartition};
use crate::error::{EasError, Result};
use crate::space::{normalize, ArchEncoding, SearchSpaceConfig};
use crate::substrate::kernels::sigmoid;
use crate::substrate::{Checkpoint, Graph, NodeId, Optimizer, OptimizerKind, ParamMap, Real, RngStream, Tensor};
use crate::supernet::{forward_gated, NormMode, Supernet};

/// Probabilities are clamped to `[P_EPS, 1 - P_EPS]` before taking logits.
pub const P_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub embed_dim: usize,
    pub anchors: usize,
    /// Budget range in millions of MAdds.
    pub budget_low: f64,
    pub budget_high: f64,
    pub hidden: usize,
    pub lambda: f64,
    pub tau: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            embed_dim: 32,
            anchors: 10,
            budget_low: 150.0,
            budget_high: 550.0,
            hidden: 64,
            lambda: 0.01,
            tau: 1.0,
            lr: 1e-3,
            epochs: 90,
            batch_size: 256,
        }
    }
}

/// Width of the reference budget range the penalty weight is expressed in.
pub const REFERENCE_RANGE: f64 = 400.0;

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.anchors < 2 || self.budget_high <= self.budget_low || self.budget_low < 0.0 {
            return Err(EasError::Config("generator needs at least two anchors on a non-empty budget range".into()));
        }
        if self.tau <= 0.0 || self.lambda < 0.0 || self.embed_dim == 0 || self.hidden == 0 {
            return Err(EasError::Config("generator needs tau > 0, lambda >= 0 and positive widths".into()));
        }
        Ok(())
    }

    pub fn anchor(&self, i: usize) -> f64 {
        self.budget_low + i as f64 * (self.budget_high - self.budget_low) / (self.anchors - 1) as f64
    }

    /// Two nearest anchors and their weights; an anchor hit gets weight 1 alone.
    pub fn interpolation(&self, budget: f64) -> Vec<(usize, f64)> {
        let b = budget.clamp(self.budget_low, self.budget_high);
        if b != budget {
            log::warn!("budget {budget} clamped to [{}, {}]", self.budget_low, self.budget_high);
        }
        let step = (self.budget_high - self.budget_low) / (self.anchors - 1) as f64;
        let pos = (b - self.budget_low) / step;
        let i = (pos.floor() as usize).min(self.anchors - 2);
        let frac = pos - i as f64;
        if frac <= 0.0 {
            vec![(i, 1.0)]
        } else if frac >= 1.0 {
            vec![(i + 1, 1.0)]
        } else {
            vec![(i, 1.0 - frac), (i + 1, frac)]
        }
    }

    /// Penalty scale so that `lambda` weighs a fraction of the budget range the
    /// same way it would on the reference range.
    pub fn penalty_scale(&self) -> f64 {
        (self.budget_high - self.budget_low) / REFERENCE_RANGE
    }
}

/// Gate layout as seen by the generator heads.
#[derive(Clone, Debug, PartialEq)]
struct HeadLayout {
    depth: usize,
    kernel: usize,
    expand: usize,
    max_blocks: usize,
    unit_blocks: Vec<usize>,
}

impl HeadLayout {
    fn new(space: &SearchSpaceConfig) -> Self {
        HeadLayout {
            depth: space.depth_choices.len() - 1,
            kernel: space.kernel_choices.len() - 1,
            expand: space.expand_choices.len() - 1,
            max_blocks: space.units.iter().map(|u| u.max_blocks).max().unwrap_or(0),
            unit_blocks: space.units.iter().map(|u| u.max_blocks).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub space: SearchSpaceConfig,
    pub superclasses: usize,
    pub params: ParamMap,
}

/// One deployment request.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub superclass: usize,
    pub budget_madds_m: f64,
}

/// Relaxed and hard samples for one probability vector with frozen noise.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledGates {
    pub soft: Vec<f64>,
    pub hard: Vec<bool>,
    pub noise: Vec<f64>,
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(P_EPS, 1.0 - P_EPS);
    (p / (1.0 - p)).ln()
}

/// `soft = sigmoid((logit(p) + logit(u)) / tau)`, `hard = soft > 0.5`.
pub fn relax(p: &[f64], noise: &[f64], tau: f64) -> SampledGates {
    let soft: Vec<f64> = p.iter().zip(noise).map(|(&p, &u)| sigmoid((logit(p) + logit(u)) / tau)).collect();
    let hard = soft.iter().map(|&s| s > 0.5).collect();
    SampledGates { soft, hard, noise: noise.to_vec() }
}

pub fn sample(p: &[f64], tau: f64, rng: &mut RngStream) -> SampledGates {
    let noise: Vec<f64> = (0..p.len()).map(|_| rng.open01()).collect();
    relax(p, &noise, tau)
}

/// Whether the loss sees hard (straight-through) or soft gates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    Hard,
    Soft,
}

/// Nodes of one joint-loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub loss: NodeId,
    pub ce: NodeId,
    pub cost: NodeId,
    pub gates: NodeId,
}

impl Generator {
    pub fn new(config: GeneratorConfig, space: &SearchSpaceConfig, superclasses: usize, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        space.validate()?;
        if superclasses == 0 {
            return Err(EasError::Config("generator needs at least one superclass".into()));
        }
        let l = HeadLayout::new(space);
        let (e, h) = (config.embed_dim, config.hidden);
        let mut p = ParamMap::new();
        let mut init = |name: &str, shape: &[usize], std: f64, rng: &mut RngStream| {
            let n: usize = shape.iter().product();
            let d = Normal::new(0.0, std).unwrap();
            p.insert(name.to_string(), Tensor::new(shape.to_vec(), (0..n).map(|_| d.sample(rng) as f32).collect()).unwrap());
        };
        init("embed.superclass", &[superclasses, e], 0.1, rng);
        init("embed.budget", &[config.anchors, e], 0.1, rng);
        let std = 1.0 / (h as f64).sqrt();
        init("lstm.w", &[2 * e, 4 * h], std, rng);
        init("lstm.u", &[h, 4 * h], std, rng);
        p.insert("lstm.b".into(), Tensor::zeros(&[4 * h]));
        for (name, width) in [("depth", l.depth), ("kernel", l.max_blocks * l.kernel), ("expand", l.max_blocks * l.expand)] {
            p.insert(format!("head.{name}.w"), Tensor::zeros(&[h, width]));
            p.insert(format!("head.{name}.b"), Tensor::zeros(&[width]));
        }
        Ok(Generator { config, space: space.clone(), superclasses, params: p })
    }

    pub fn params_as<T: Real>(&self) -> ParamMap<T> {
        self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect()
    }

    /// `[M, 2 * embed_dim]` request embeddings.
    pub fn embed<T: Real>(&self, g: &mut Graph<T>, params: &ParamMap<T>, requests: &[Request]) -> Result<NodeId> {
        let sc = g.param("embed.superclass", &params["embed.superclass"]);
        let bud = g.param("embed.budget", &params["embed.budget"]);
        let mut rows = Vec::with_capacity(requests.len());
        for r in requests {
            if r.superclass >= self.superclasses {
                return Err(EasError::UnknownSuperclass { index: r.superclass, count: self.superclasses });
            }
            let s = g.narrow(sc, 0, r.superclass, 1)?;
            let mut b = None;
            for (i, w) in self.config.interpolation(r.budget_madds_m) {
                let row = g.narrow(bud, 0, i, 1)?;
                let part = if w == 1.0 { row } else { g.affine(row, T::from_f64_lossy(w), T::zero())? };
                b = Some(match b {
                    None => part,
                    Some(acc) => g.add(acc, part)?,
                });
            }
            rows.push(g.concat(&[s, b.unwrap()], 1)?);
        }
        g.concat(&rows, 0)
    }

    /// Gate probabilities `[M, gate_count]` for embedded requests.
    pub fn rollout<T: Real>(&self, g: &mut Graph<T>, params: &ParamMap<T>, x: NodeId) -> Result<NodeId> {
        let l = HeadLayout::new(&self.space);
        let hsz = self.config.hidden;
        let m = g.shape(x)[0];
        let w = g.param("lstm.w", &params["lstm.w"]);
        let u = g.param("lstm.u", &params["lstm.u"]);
        let b = g.param("lstm.b", &params["lstm.b"]);
        let heads: Vec<(NodeId, NodeId)> = ["depth", "kernel", "expand"]
            .iter()
            .map(|n| {
                let hw = format!("head.{n}.w");
                let hb = format!("head.{n}.b");
                (g.param(&hw, &params[&hw]), g.param(&hb, &params[&hb]))
            })
            .collect();
        let xw = g.matmul(x, w)?;
        let mut h = g.constant(Tensor::zeros(&[m, hsz]));
        let mut c = g.constant(Tensor::zeros(&[m, hsz]));
        let mut pieces = Vec::new();
        for &blocks in &l.unit_blocks {
            let hu = g.matmul(h, u)?;
            let z = g.add(xw, hu)?;
            let z = g.add_row_bias(z, b)?;
            let gate = |g: &mut Graph<T>, k: usize| g.narrow(z, 1, k * hsz, hsz);
            let (i, f, cand, o) = (gate(g, 0)?, gate(g, 1)?, gate(g, 2)?, gate(g, 3)?);
            let (i, f, o) = (g.sigmoid(i)?, g.sigmoid(f)?, g.sigmoid(o)?);
            let cand = g.tanh(cand)?;
            let keep = g.mul(f, c)?;
            let write = g.mul(i, cand)?;
            c = g.add(keep, write)?;
            let tc = g.tanh(c)?;
            h = g.mul(o, tc)?;
            let out: Vec<NodeId> = heads
                .iter()
                .map(|&(hw, hb)| {
                    let y = g.matmul(h, hw)?;
                    g.add_row_bias(y, hb)
                })
                .collect::<Result<_>>()?;
            if l.depth > 0 {
                pieces.push(out[0]);
            }
            for blk in 0..blocks {
                if l.kernel > 0 {
                    pieces.push(g.narrow(out[1], 1, blk * l.kernel, l.kernel)?);
                }
                if l.expand > 0 {
                    pieces.push(g.narrow(out[2], 1, blk * l.expand, l.expand)?);
                }
            }
        }
        let z = g.concat(&pieces, 1)?;
        g.sigmoid(z)
    }

    /// Gate probabilities for each request in one batched rollout.
    pub fn probabilities(&self, requests: &[Request]) -> Result<Vec<Vec<f64>>> {
        if requests.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::<f32>::new();
        let x = self.embed(&mut g, &self.params, requests)?;
        let p = self.rollout(&mut g, &self.params, x)?;
        let n = self.space.gate_count();
        Ok(g.value(p).data().chunks(n).map(|r| r.iter().map(|&v| v as f64).collect()).collect())
    }

    /// Relaxed gates of one request's probabilities `p` (`[1, n]`) under frozen noise.
    pub fn relax_node<T: Real>(&self, g: &mut Graph<T>, p: NodeId, noise: &[f64], mode: GateMode) -> Result<NodeId> {
        let n = noise.len();
        let p = g.reshape(p, &[n])?;
        let lp = g.logit(p, T::from_f64_lossy(P_EPS), T::from_f64_lossy(1.0 - P_EPS))?;
        let lu = g.constant(Tensor::from_vec(noise.iter().map(|&u| T::from_f64_lossy(logit(u))).collect()));
        let s = g.add(lp, lu)?;
        let s = g.affine(s, T::from_f64_lossy(1.0 / self.config.tau), T::zero())?;
        let soft = g.sigmoid(s)?;
        match mode {
            GateMode::Soft => Ok(soft),
            GateMode::Hard => g.straight_through(soft, "gate threshold"),
        }
    }

    /// Masked cross-entropy on superclass `t` plus the budget penalty.
    #[allow(clippy::too_many_arguments)]
    pub fn joint_loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ParamMap<T>,
        supernet: (&SearchSpaceConfig, &ParamMap<T>),
        cost: &CostTable,
        partition: &SuperclassPartition,
        batch: (&Tensor<T>, &[usize]),
        request: Request,
        noise: &[f64],
        mode: GateMode,
    ) -> Result<LossNodes> {
        let (space, weights) = supernet;
        let (x, labels) = batch;
        let emb = self.embed(g, params, &[request])?;
        let p = self.rollout(g, params, emb)?;
        let gates = self.relax_node(g, p, noise, mode)?;
        let xi = g.input(x.clone());
        let logits = forward_gated(g, weights, space, xi, gates, NormMode::Batch, false)?;
        let classes = space.head.classes;
        let row = partition.class_mask(request.superclass, classes)?;
        let mask: Vec<bool> = (0..labels.len()).flat_map(|_| row.iter().copied()).collect();
        let ce = g.masked_cross_entropy(logits, &mask, labels)?;
        let cost_m = cost.madds_differentiable(g, gates)?;
        let scale = self.config.penalty_scale();
        let diff = g.affine(cost_m, T::from_f64_lossy(1.0 / scale), T::from_f64_lossy(-request.budget_madds_m / scale))?;
        let sq = g.square(diff)?;
        let pen = g.affine(sq, T::from_f64_lossy(self.config.lambda), T::zero())?;
        let loss = g.add(ce, pen)?;
        Ok(LossNodes { loss, ce, cost: cost_m, gates })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            serde_json::json!({
                "kind": "generator",
                "config": self.config,
                "space_hash": self.space.hash(),
                "space": self.space,
                "superclasses": self.superclasses,
            }),
            self.params.clone(),
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = &ck.metadata;
        if meta.get("kind").and_then(|v| v.as_str()) != Some("generator") {
            return Err(EasError::Checkpoint("not a generator checkpoint".into()));
        }
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| EasError::Checkpoint(format!("generator checkpoint lacks `{k}`")));
        let config: GeneratorConfig = serde_json::from_value(field("config")?)?;
        let space: SearchSpaceConfig = serde_json::from_value(field("space")?)?;
        let superclasses: usize = serde_json::from_value(field("superclasses")?)?;
        let reference = Generator::new(config, &space, superclasses, &mut RngStream::new(0))?;
        for (name, t) in &reference.params {
            match ck.tensors.get(name) {
                Some(u) if u.shape() == t.shape() => {}
                _ => return Err(EasError::Checkpoint(format!("missing or misshapen tensor `{name}`"))),
            }
        }
        Ok(Generator { params: ck.tensors.clone(), ..reference })
    }
}

/// Normalized encoding of hard gates.
pub fn encoding_of(sampled: &SampledGates, space: &SearchSpaceConfig) -> Result<ArchEncoding> {
    normalize(&sampled.hard, space)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub ce: f64,
    /// Mean `|R - B| / B` of the sampled architectures.
    pub budget_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GeneratorLog {
    pub epochs: Vec<GeneratorEpoch>,
}

impl GeneratorLog {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "loss", "ce", "budget_error"])?;
        for e in &self.epochs {
            w.write_record([e.epoch.to_string(), format!("{:.6}", e.loss), format!("{:.6}", e.ce), format!("{:.6}", e.budget_error)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Trains the generator against a frozen supernet on validation data.
pub fn train_generator(
    gen: &mut Generator,
    net: &Supernet,
    val: &Dataset,
    partition: &SuperclassPartition,
    cost: &CostTable,
    rng: &RngStream,
) -> Result<GeneratorLog> {
    let cfg = gen.config.clone();
    if net.space != gen.space {
        return Err(EasError::Config("generator and supernet use different search spaces".into()));
    }
    if partition.len() != gen.superclasses {
        return Err(EasError::Config(format!(
            "generator has {} superclasses, partition {}",
            gen.superclasses,
            partition.len()
        )));
    }
    partition.validate(val.classes)?;
    let pools: Vec<Vec<usize>> =
        (0..partition.len()).map(|t| partition.classes(t).map(|c| val.indices_of(c))).collect::<Result<_>>()?;
    if pools.iter().any(Vec::is_empty) {
        return Err(EasError::Dataset("a superclass has no validation samples".into()));
    }
    let mut opt = Optimizer::new(OptimizerKind::adam(), cfg.lr as f32);
    let steps = val.len().div_ceil(cfg.batch_size).max(1);
    let mut draw = rng.fork("requests");
    let mut noise_rng = rng.fork("gumbel");
    let mut log = GeneratorLog::default();
    for epoch in 0..cfg.epochs {
        let (mut loss_sum, mut ce_sum, mut err_sum) = (0.0, 0.0, 0.0);
        for step in 0..steps {
            let t = draw.random_range(0..partition.len());
            let budget = draw.random_range(cfg.budget_low..cfg.budget_high);
            let k = cfg.batch_size.min(pools[t].len());
            let mut idx: Vec<usize> = pools[t].iter().copied().choose_multiple(&mut draw, k);
            idx.sort_unstable();
            let (x, labels) = val.gather(&idx);
            let noise: Vec<f64> = (0..gen.space.gate_count()).map(|_| noise_rng.open01()).collect();
            let mut g = Graph::<f32>::new();
            let nodes = gen.joint_loss(
                &mut g,
                &gen.params,
                (&net.space, &net.weights),
                cost,
                partition,
                (&x, &labels),
                Request { superclass: t, budget_madds_m: budget },
                &noise,
                GateMode::Hard,
            )?;
            let loss = g.value(nodes.loss).item() as f64;
            let ce = g.value(nodes.ce).item() as f64;
            let madds = g.value(nodes.cost).item() as f64;
            let grads = g.backward(nodes.loss)?;
            if !loss.is_finite() {
                return Err(EasError::Diverged { step: epoch * steps + step, checkpoint: "not saved".into() });
            }
            opt.step(&mut gen.params, &grads)?;
            loss_sum += loss;
            ce_sum += ce;
            err_sum += (madds - budget).abs() / budget;
        }
        let n = steps as f64;
        let rec = GeneratorEpoch { epoch, loss: loss_sum / n, ce: ce_sum / n, budget_error: err_sum / n };
        log::info!("generator epoch {epoch} loss {:.4} ce {:.4} budget error {:.3}", rec.loss, rec.ce, rec.budget_error);
        log.epochs.push(rec);
    }
    Ok(log)
}
