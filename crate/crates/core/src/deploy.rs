//! Deployment: budgeted architecture generation and baseline searchers.

use std::collections::HashMap;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cost::CostTable;
use crate::error::{EasError, Result};
use crate::eval::Evaluator;
use crate::generator::{encoding_of, relax, Generator, Request};
use crate::space::{from_discrete, to_discrete, BlockArch, DiscreteArch, SearchSpaceConfig, UnitArch};
use crate::substrate::RngStream;
use crate::supernet::Supernet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeployConfig {
    /// Feasible candidates to collect before selecting.
    pub pool: usize,
    pub attempt_cap: usize,
    /// Rejection cap for the uniform baseline, whose samples need only a cost check.
    #[serde(default = "default_random_cap")]
    pub random_attempt_cap: usize,
}

fn default_random_cap() -> usize {
    1 << 20
}

impl Default for DeployConfig {
    fn default() -> Self {
        DeployConfig { pool: 16, attempt_cap: 256, random_attempt_cap: default_random_cap() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeployResult {
    pub superclass: usize,
    pub budget_madds_m: f64,
    pub arch: DiscreteArch,
    pub madds: u64,
    pub madds_m: f64,
    /// Validation accuracy on the target superclass.
    pub accuracy: f64,
    pub elapsed_s: f64,
    /// Samples drawn and feasible candidates found.
    pub attempts: usize,
    pub feasible: usize,
}

/// Shared read-only inputs of the searchers.
pub struct Deployer<'a> {
    pub net: &'a Supernet,
    pub cost: &'a CostTable,
    pub evaluator: &'a Evaluator,
}

fn budget_units(b: f64) -> f64 {
    b * 1e6
}

impl Deployer<'_> {
    fn space(&self) -> &SearchSpaceConfig {
        &self.net.space
    }

    pub fn madds(&self, arch: &DiscreteArch) -> Result<u64> {
        self.cost.madds_exact(&from_discrete(arch, self.space())?, self.space())
    }

    fn check(&self, req: &Request) -> Result<()> {
        if !(req.budget_madds_m > 0.0) {
            return Err(EasError::Config(format!("budget must be positive, got {}", req.budget_madds_m)));
        }
        self.evaluator.partition.classes(req.superclass)?;
        Ok(())
    }

    fn infeasible(&self, req: &Request, attempts: usize) -> EasError {
        EasError::InfeasibleBudget { budget_m: req.budget_madds_m, attempts, min_cost_m: self.cost.min_madds() }
    }

    /// Highest validation accuracy among `candidates`; earlier candidates win ties.
    fn select(&self, req: &Request, candidates: &[(DiscreteArch, u64)]) -> Result<(DiscreteArch, u64, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, (arch, _)) in candidates.iter().enumerate() {
            let acc = self.evaluator.accuracy(self.net, arch, req.superclass)?;
            if best.is_none_or(|(_, b)| acc > b) {
                best = Some((i, acc));
            }
        }
        let (i, acc) = best.expect("at least one candidate");
        Ok((candidates[i].0.clone(), candidates[i].1, acc))
    }

    fn result(&self, req: &Request, chosen: (DiscreteArch, u64, f64), start: Instant, attempts: usize, feasible: usize) -> DeployResult {
        let (arch, madds, accuracy) = chosen;
        DeployResult {
            superclass: req.superclass,
            budget_madds_m: req.budget_madds_m,
            arch,
            madds,
            madds_m: madds as f64 / 1e6,
            accuracy,
            elapsed_s: start.elapsed().as_secs_f64(),
            attempts,
            feasible,
        }
    }

    /// Generator sampling with rejection until `pool` feasible samples or the cap.
    /// Duplicate architectures count toward the pool but are evaluated once.
    fn candidates_from(&self, p: &[f64], tau: f64, req: &Request, cfg: &DeployConfig, rng: &mut RngStream) -> Result<(Vec<(DiscreteArch, u64)>, usize, usize)> {
        let limit = budget_units(req.budget_madds_m);
        let mut unique: Vec<(DiscreteArch, u64)> = Vec::new();
        let (mut attempts, mut feasible) = (0, 0);
        while feasible < cfg.pool && attempts < cfg.attempt_cap {
            attempts += 1;
            let noise: Vec<f64> = (0..p.len()).map(|_| rng.open01()).collect();
            let enc = encoding_of(&relax(p, &noise, tau), self.space())?;
            let madds = self.cost.madds_exact(&enc, self.space())?;
            if madds as f64 <= limit {
                feasible += 1;
                let arch = to_discrete(&enc, self.space())?;
                if !unique.iter().any(|(a, _)| *a == arch) {
                    unique.push((arch, madds));
                }
            }
        }
        Ok((unique, attempts, feasible))
    }

    pub fn generate(&self, gen: &Generator, req: Request, cfg: &DeployConfig, rng: &RngStream) -> Result<DeployResult> {
        Ok(self.generate_batch(gen, &[req], cfg, rng)?.remove(0))
    }

    /// One batched rollout for all requests, then independent per-request
    /// sampling and selection on stream `rng.fork_indexed("request", i)`.
    pub fn generate_batch(&self, gen: &Generator, reqs: &[Request], cfg: &DeployConfig, rng: &RngStream) -> Result<Vec<DeployResult>> {
        if gen.space != *self.space() {
            return Err(EasError::Config("generator and supernet use different search spaces".into()));
        }
        for r in reqs {
            self.check(r)?;
        }
        let start = Instant::now();
        let probs = gen.probabilities(reqs)?;
        let rollout = start.elapsed();
        let mut out = Vec::with_capacity(reqs.len());
        for (i, (req, p)) in reqs.iter().zip(&probs).enumerate() {
            let t0 = Instant::now();
            if budget_units(req.budget_madds_m) < self.cost.min_madds() * 1e6 {
                return Err(self.infeasible(req, 0));
            }
            let mut r = rng.fork_indexed("request", i);
            let (cands, attempts, feasible) = self.candidates_from(p, gen.config.tau, req, cfg, &mut r)?;
            if cands.is_empty() {
                return Err(self.infeasible(req, attempts));
            }
            let chosen = self.select(req, &cands)?;
            let mut res = self.result(req, chosen, t0, attempts, feasible);
            res.elapsed_s += rollout.as_secs_f64() / reqs.len() as f64;
            out.push(res);
        }
        Ok(out)
    }

    /// Uniform draw over depth, then kernel and expansion of each active block.
    pub fn uniform_arch(&self, rng: &mut RngStream) -> DiscreteArch {
        let s = self.space();
        let pick = |rng: &mut RngStream, set: &[usize]| set[rng.random_range(0..set.len())];
        DiscreteArch {
            units: s
                .units
                .iter()
                .map(|_| {
                    let depth = pick(rng, &s.depth_choices);
                    let blocks = (0..depth)
                        .map(|_| BlockArch { kernel: pick(rng, &s.kernel_choices), expand: pick(rng, &s.expand_choices) })
                        .collect();
                    UnitArch { depth, blocks }
                })
                .collect(),
        }
    }

    /// Uniform architecture with madds within budget, by rejection.
    fn feasible_uniform(&self, req: &Request, cap: usize, rng: &mut RngStream) -> Result<Option<(DiscreteArch, u64, usize)>> {
        let limit = budget_units(req.budget_madds_m);
        for attempt in 1..=cap {
            let arch = self.uniform_arch(rng);
            let madds = self.madds(&arch)?;
            if madds as f64 <= limit {
                return Ok(Some((arch, madds, attempt)));
            }
        }
        Ok(None)
    }

    /// Best of `samples` uniform feasible architectures.
    pub fn random_search(&self, req: Request, samples: usize, cfg: &DeployConfig, rng: &RngStream) -> Result<DeployResult> {
        self.check(&req)?;
        let start = Instant::now();
        if budget_units(req.budget_madds_m) < self.cost.min_madds() * 1e6 {
            return Err(self.infeasible(&req, 0));
        }
        let mut r = rng.fork("random-search");
        let mut cands = Vec::new();
        let mut attempts = 0;
        for _ in 0..samples.max(1) {
            match self.feasible_uniform(&req, cfg.random_attempt_cap, &mut r)? {
                Some((a, m, n)) => {
                    attempts += n;
                    cands.push((a, m));
                }
                None => attempts += cfg.random_attempt_cap,
            }
        }
        if cands.is_empty() {
            return Err(self.infeasible(&req, attempts));
        }
        let feasible = cands.len();
        let chosen = self.select(&req, &cands)?;
        Ok(self.result(&req, chosen, start, attempts, feasible))
    }

    fn mutate(&self, arch: &DiscreteArch, prob: f64, rng: &mut RngStream) -> DiscreteArch {
        let s = self.space();
        let fresh = self.uniform_arch(rng);
        let mut out = arch.clone();
        for (u, unit) in out.units.iter_mut().enumerate() {
            if rng.random_bool(prob) {
                let depth = s.depth_choices[rng.random_range(0..s.depth_choices.len())];
                unit.blocks.resize(depth, BlockArch { kernel: s.kernel_choices[0], expand: s.expand_choices[0] });
                unit.depth = depth;
                for b in arch.units[u].depth..depth {
                    unit.blocks[b] = fresh.units[u].blocks.get(b).copied().unwrap_or(unit.blocks[b]);
                }
            }
            for blk in unit.blocks.iter_mut() {
                if rng.random_bool(prob) {
                    blk.kernel = s.kernel_choices[rng.random_range(0..s.kernel_choices.len())];
                }
                if rng.random_bool(prob) {
                    blk.expand = s.expand_choices[rng.random_range(0..s.expand_choices.len())];
                }
            }
        }
        out
    }

    fn crossover(a: &DiscreteArch, b: &DiscreteArch, rng: &mut RngStream) -> DiscreteArch {
        DiscreteArch {
            units: a.units.iter().zip(&b.units).map(|(x, y)| if rng.random_bool(0.5) { x.clone() } else { y.clone() }).collect(),
        }
    }

    /// Mutation and crossover over discrete architectures with accuracy fitness
    /// and hard feasibility.
    pub fn evolutionary_search(&self, req: Request, evo: &EvolutionConfig, rng: &RngStream) -> Result<DeployResult> {
        self.check(&req)?;
        let start = Instant::now();
        let limit = budget_units(req.budget_madds_m);
        if limit < self.cost.min_madds() * 1e6 {
            return Err(self.infeasible(&req, 0));
        }
        let mut r = rng.fork("evolution");
        let mut fitness: HashMap<DiscreteArch, (u64, f64)> = HashMap::new();
        let mut score = |arch: &DiscreteArch| -> Result<(u64, f64)> {
            if let Some(&f) = fitness.get(arch) {
                return Ok(f);
            }
            let f = (self.madds(arch)?, self.evaluator.accuracy(self.net, arch, req.superclass)?);
            fitness.insert(arch.clone(), f);
            Ok(f)
        };
        let mut attempts = 0;
        let mut population = Vec::with_capacity(evo.population);
        for _ in 0..evo.population.max(1) {
            let arch = match self.feasible_uniform(&req, evo.init_cap, &mut r)? {
                Some((a, _, n)) => {
                    attempts += n;
                    a
                }
                None => {
                    attempts += evo.init_cap;
                    self.space().minimal_arch()
                }
            };
            let f = score(&arch)?;
            population.push((arch, f));
        }
        let by_fitness = |p: &mut Vec<(DiscreteArch, (u64, f64))>| {
            p.sort_by(|a, b| b.1 .1.total_cmp(&a.1 .1));
        };
        by_fitness(&mut population);
        for _ in 0..evo.generations {
            let parents = population.len().div_ceil(2).max(1);
            population.truncate(parents);
            while population.len() < evo.population.max(1) {
                let mut child = None;
                for _ in 0..evo.child_cap {
                    attempts += 1;
                    let a = &population[r.random_range(0..parents)].0;
                    let c = if r.random_bool(evo.crossover_prob) {
                        let b = &population[r.random_range(0..parents)].0;
                        Self::crossover(a, b, &mut r)
                    } else {
                        a.clone()
                    };
                    let c = self.mutate(&c, evo.mutation_prob, &mut r);
                    if self.madds(&c)? as f64 <= limit {
                        child = Some(c);
                        break;
                    }
                }
                let child = child.unwrap_or_else(|| population[0].0.clone());
                let f = score(&child)?;
                population.push((child, f));
            }
            by_fitness(&mut population);
        }
        let (arch, (madds, acc)) = population.swap_remove(0);
        let feasible = fitness.len();
        Ok(self.result(&req, (arch, madds, acc), start, attempts, feasible))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolutionConfig {
    pub population: usize,
    pub generations: usize,
    pub mutation_prob: f64,
    pub crossover_prob: f64,
    /// Rejection attempts per initial individual and per child.
    pub init_cap: usize,
    pub child_cap: usize,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        EvolutionConfig { population: 16, generations: 8, mutation_prob: 0.1, crossover_prob: 0.5, init_cap: 256, child_cap: 32 }
    }
}
