mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use common::{count_madds, masked_ce_oracle, mean_and_se, mini_data, random_arch, random_batch, small_space, tiny_space};
use eas_core::cost::CostTable;
use eas_core::data::{Splits, SuperclassPartition};
use eas_core::deploy::{DeployConfig, DeployResult, Deployer};
use eas_core::eval::Evaluator;
use eas_core::generator::{sample, train_generator, GateMode, Generator, GeneratorConfig, Request};
use eas_core::harness::{scaled_budget_range, similarity_report};
use eas_core::space::{arch_cosine, enumerate, from_discrete, DiscreteArch, HeadConfig, SearchSpaceConfig, StemConfig, UnitConfig};
use eas_core::substrate::{gradient_check, GradCheckOptions, Graph, RngStream, Tensor};
use eas_core::supernet::{extract, forward_discrete, forward_gated, NormMode, Supernet};
use eas_core::train::{sample_mask, train_supernet, DropoutConfig, TrainInputs, TrainSchedule};
use rand::Rng;

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn cost_exactness() -> Check {
    let start = Instant::now();
    let mut n = 0;
    let mut check = |space: &SearchSpaceConfig, arch: &DiscreteArch| -> Result<(), String> {
        let table = CostTable::build(space);
        let got = table.madds_exact(&from_discrete(arch, space).unwrap(), space).unwrap();
        let want = count_madds(space, arch);
        n += 1;
        ensure(got == want, format!("{got} != {want} for {arch:?}")).map(|_| ())
    };
    let desk = SearchSpaceConfig::default_desk(12);
    let mut r = RngStream::new(1);
    for _ in 0..100 {
        check(&desk, &random_arch(&desk, &mut r))?;
    }
    let tiny = tiny_space();
    for arch in enumerate(&tiny, 1000).unwrap() {
        check(&tiny, &arch)?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 10.0, format!("{n} architectures integer-exact in {secs:.3}s"))
}

fn gate_marginal() -> Check {
    let start = Instant::now();
    let mut r = RngStream::new(2);
    let n = 100_000;
    let mut worst: f64 = 0.0;
    for p in [0.1, 0.5, 0.9] {
        for tau in [0.5, 1.0, 5.0] {
            let s = sample(&vec![p; n], tau, &mut r);
            let freq = s.hard.iter().filter(|&&h| h).count() as f64 / n as f64;
            worst = worst.max((freq - p).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst <= 0.01 && secs < 10.0, format!("max |freq - p| {worst:.4} over 9 settings in {secs:.2}s"))
}

fn gradient_fidelity() -> Check {
    let start = Instant::now();
    let space = SearchSpaceConfig {
        units: vec![
            UnitConfig { output_channels: 3, stride: 1, max_blocks: 3, min_blocks: 2 },
            UnitConfig { output_channels: 4, stride: 2, max_blocks: 3, min_blocks: 2 },
        ],
        depth_choices: vec![2, 3],
        expand_choices: vec![1, 2],
        kernel_choices: vec![1, 3],
        stem: StemConfig { channels: 3, kernel: 3, stride: 1 },
        head: HeadConfig { hidden: 4, classes: 4 },
        input_resolution: [4, 4, 3],
    };
    let root = RngStream::new(3);
    let net = Supernet::init(&space, &mut root.fork("net")).unwrap();
    let cfg = GeneratorConfig { embed_dim: 4, anchors: 3, budget_low: 0.002, budget_high: 0.006, hidden: 5, ..Default::default() };
    let mut gen = Generator::new(cfg, &space, 2, &mut root.fork("gen")).unwrap();
    let mut r = root.fork("perturb");
    for t in gen.params.values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += r.random_range(-0.3f32..0.3));
    }
    let partition = SuperclassPartition::contiguous(2, 2);
    let cost = CostTable::build(&space);
    let weights = net.weights_as::<f64>();
    let x: Tensor<f64> = random_batch(&space, 3, &mut r).cast();
    let labels = [2, 3, 3];
    let noise: Vec<f64> = (0..space.gate_count()).map(|_| r.open01()).collect();
    let req = Request { superclass: 1, budget_madds_m: 0.004 };
    let report = gradient_check(
        &gen.params_as::<f64>(),
        |g, p| Ok(gen.joint_loss(g, p, (&space, &weights), &cost, &partition, (&x, &labels), req, &noise, GateMode::Soft)?.loss),
        GradCheckOptions::default(),
    )
    .unwrap();
    let secs = start.elapsed().as_secs_f64();
    ensure(
        report.passes(1e-3) && secs < 60.0,
        format!("max relative error {:.2e} over {} tensors in {secs:.2}s", report.max_error(), report.per_param.len()),
    )
}

fn logits(net: &Supernet, x: &Tensor, arch: &DiscreteArch) -> Vec<f32> {
    let mut g = Graph::<f32>::new();
    let xi = g.input(x.clone());
    let y = forward_discrete(&mut g, &net.weights, &net.space, xi, arch, NormMode::Batch, false).unwrap();
    g.value(y).data().to_vec()
}

fn gated(net: &Supernet, x: &Tensor, gates: &[f32]) -> Vec<f32> {
    let mut g = Graph::<f32>::new();
    let xi = g.input(x.clone());
    let gi = g.constant(Tensor::from_vec(gates.to_vec()));
    let y = forward_gated(&mut g, &net.weights, &net.space, xi, gi, NormMode::Batch, false).unwrap();
    g.value(y).data().to_vec()
}

fn pass_through_and_extraction() -> Check {
    let space = small_space();
    let mut net = Supernet::init(&space, &mut RngStream::new(4)).unwrap();
    let layout = space.layout();
    let mut r = RngStream::new(5);
    let x = random_batch(&space, 3, &mut r);
    let mut gates: Vec<f32> = (0..layout.len()).map(|_| if r.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
    for i in layout.units[0].depth.clone() {
        gates[i] = 0.0;
    }
    let before = gated(&net, &x, &gates);
    for b in 2..4 {
        let (k, e) = layout.units[0].blocks[b].clone();
        for i in k.chain(e) {
            gates[i] = 1.0 - gates[i];
        }
        for layer in ["expand.w", "dw.w", "project.w"] {
            net.weights.get_mut(&format!("u0.b{b}.{layer}")).unwrap().data_mut().iter_mut().for_each(|v| *v = r.random_range(-3.0..3.0));
        }
    }
    let after = gated(&net, &x, &gates);
    let bitwise = before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits());

    let mini = SearchSpaceConfig::mini(12);
    let net = Supernet::init(&mini, &mut RngStream::new(6)).unwrap();
    let mut worst = 0.0f32;
    for _ in 0..20 {
        let arch = random_arch(&mini, &mut r);
        let x = random_batch(&mini, 4, &mut r);
        let sub = extract(&net, &arch).unwrap().forward(&x, None).unwrap();
        for (a, b) in sub.data().iter().zip(logits(&net, &x, &arch)) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(bitwise && worst <= 1e-5, format!("pass-through bitwise {bitwise}, extraction max |diff| {worst:.2e} on 20 pairs"))
}

fn dropout_semantics() -> Check {
    let space = small_space();
    let partition = SuperclassPartition::contiguous(2, 3);
    let spec = eas_core::data::SyntheticSpec {
        classes: 6,
        samples_per_class: 12,
        resolution: space.input_resolution,
        seed: 7,
        ..Default::default()
    };
    let splits = eas_core::data::synthetic(&spec).unwrap();
    let run = |d: Option<DropoutConfig>| {
        let mut net = Supernet::init(&space, &mut RngStream::new(8)).unwrap();
        let sched = TrainSchedule { batch_size: 16, ..TrainSchedule::progressive(4) };
        let inputs = TrainInputs { train: &splits.train, partition: &partition, evaluator: None, divergence_dir: None };
        train_supernet(&mut net, &inputs, &sched, d, &RngStream::new(9)).unwrap();
        net.fingerprint()
    };
    let identical = run(None) == run(Some(DropoutConfig::new(0.0).unwrap()));

    let net = Supernet::init(&space, &mut RngStream::new(10)).unwrap();
    let mut r = RngStream::new(11);
    let mut leaked = 0usize;
    for t in 0..2 {
        let labels: Vec<usize> = (0..4).map(|i| t * 3 + i % 3).collect();
        let mask = sample_mask(&partition, 6, &[t; 4], 1.0, &mut r).unwrap();
        let x = random_batch(&space, 4, &mut r);
        let mut g = Graph::<f32>::new();
        let xi = g.input(x);
        let y = forward_discrete(&mut g, &net.weights, &space, xi, &space.largest_arch(), NormMode::Batch, true).unwrap();
        let loss = g.masked_cross_entropy(y, &mask, &labels).unwrap();
        let grad = g.backward(loss).unwrap().get("head.fc.w").unwrap().clone();
        leaked += grad.data().iter().enumerate().filter(|&(j, &v)| (j % 6) / 3 != t && v != 0.0).count();
    }

    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (n, c) = (6, 10);
        let l: Vec<f64> = (0..n * c).map(|_| r.random_range(-8.0..8.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        let mut mask: Vec<bool> = (0..n * c).map(|_| r.random_bool(0.5)).collect();
        for (i, &y) in labels.iter().enumerate() {
            mask[i * c + y] = true;
        }
        let mut g = Graph::<f64>::new();
        let li = g.input(Tensor::new(vec![n, c], l.clone()).unwrap());
        let ce = g.masked_cross_entropy(li, &mask, &labels).unwrap();
        worst = worst.max((g.value(ce).item() - masked_ce_oracle(&l, &mask, &labels, c)).abs());
    }
    ensure(
        identical && leaked == 0 && worst <= 1e-6,
        format!("q=0 bit-identical {identical}, non-target head gradient entries at q=1: {leaked}, masked CE max |diff| {worst:.1e}"),
    )
}

const Q_SWEEP: [f64; 3] = [0.15, 0.3, 0.6];
const SEEDS: [u64; 3] = [0, 1, 2];
const EPOCHS: usize = 8;
const CALIBRATION: usize = 64;
const REQUEST_LEVELS: usize = 25;

struct World {
    space: SearchSpaceConfig,
    partition: SuperclassPartition,
    splits: Splits,
    val: Evaluator,
    test: Evaluator,
    cost: CostTable,
}

impl World {
    fn new() -> Self {
        let (splits, partition) = mini_data(0);
        let space = SearchSpaceConfig::mini(12);
        let val = Evaluator::new(&splits.train, &splits.val, &partition, CALIBRATION, 1000, &RngStream::new(20)).unwrap();
        let test = Evaluator::new(&splits.train, &splits.test, &partition, CALIBRATION, 1000, &RngStream::new(21)).unwrap();
        let cost = CostTable::build(&space);
        World { space, partition, splits, val, test, cost }
    }

    fn supernet(&self, seed: u64, q: f64) -> Supernet {
        let start = Instant::now();
        let root = RngStream::new(100 + seed);
        let mut net = Supernet::init(&self.space, &mut root.fork("init")).unwrap();
        let sched = TrainSchedule { batch_size: 64, lr: 0.05, distill: false, eval_every: 0, ..TrainSchedule::progressive(EPOCHS) };
        let inputs = TrainInputs { train: &self.splits.train, partition: &self.partition, evaluator: None, divergence_dir: None };
        train_supernet(&mut net, &inputs, &sched, Some(DropoutConfig::new(q).unwrap()), &root.fork("train")).unwrap();
        eprintln!("  supernet seed {seed} q {q}: {:.0}s", start.elapsed().as_secs_f64());
        net
    }

    /// Mean target-superclass accuracy over a fixed architecture panel.
    fn panel_accuracy(&self, net: &Supernet, ev: &Evaluator) -> f64 {
        let mut r = RngStream::new(30);
        let mut archs = vec![self.space.largest_arch(), self.space.minimal_arch()];
        archs.extend((0..6).map(|_| random_arch(&self.space, &mut r)));
        let mut sum = 0.0;
        for a in &archs {
            sum += ev.accuracies(net, a).unwrap().iter().sum::<f64>();
        }
        sum / (archs.len() * self.partition.len()) as f64
    }
}

struct Pipeline {
    net: Supernet,
    gen: Generator,
    requests: Vec<Request>,
    results: Vec<DeployResult>,
}

fn pipeline(world: &World, net: Supernet) -> Pipeline {
    let start = Instant::now();
    let (lo, hi) = scaled_budget_range(&world.cost);
    let cfg = GeneratorConfig { budget_low: lo, budget_high: hi, batch_size: 32, epochs: 40, lr: 1e-2, ..Default::default() };
    let root = RngStream::new(200);
    let mut gen = Generator::new(cfg, &world.space, world.partition.len(), &mut root.fork("init")).unwrap();
    train_generator(&mut gen, &net, &world.splits.val, &world.partition, &world.cost, &root.fork("train")).unwrap();
    eprintln!("  generator: {:.0}s", start.elapsed().as_secs_f64());
    let start = Instant::now();
    let mut requests = Vec::new();
    for l in 0..REQUEST_LEVELS {
        let b = lo + (hi - lo) * l as f64 / (REQUEST_LEVELS - 1) as f64;
        for t in 0..world.partition.len() {
            requests.push(Request { superclass: t, budget_madds_m: b });
        }
    }
    let deployer = Deployer { net: &net, cost: &world.cost, evaluator: &world.val };
    let results = deployer.generate_batch(&gen, &requests, &DeployConfig::default(), &root.fork("deploy")).unwrap();
    eprintln!("  deployment of {} requests: {:.0}s", requests.len(), start.elapsed().as_secs_f64());
    Pipeline { net, gen, requests, results }
}

fn budget_tracking(p: &Pipeline, secs: f64) -> Check {
    let n = p.results.len() as f64;
    let within = p.results.iter().filter(|r| r.madds_m <= r.budget_madds_m).count() as f64 / n;
    let err = p.results.iter().map(|r| (r.madds_m - r.budget_madds_m).abs() / r.budget_madds_m).sum::<f64>() / n;
    let (lo, hi) = (p.requests[0].budget_madds_m, p.requests.last().unwrap().budget_madds_m);
    ensure(
        p.results.len() == 100 && within >= 0.9 && err <= 0.10 && secs <= 7200.0,
        format!(
            "{} requests over {lo:.3}M..{hi:.3}M: {:.0}% within budget, mean |madds-B|/B {err:.3}, pipeline {secs:.0}s",
            p.results.len(),
            within * 100.0
        ),
    )
}

fn latency(p: &Pipeline) -> Check {
    let reqs: Vec<Request> = p.requests.iter().step_by(2).copied().collect();
    p.gen.probabilities(&reqs).unwrap();
    let mut times: Vec<f64> = (0..5)
        .map(|_| {
            let t = Instant::now();
            p.gen.probabilities(&reqs).unwrap();
            t.elapsed().as_secs_f64()
        })
        .collect();
    times.sort_by(f64::total_cmp);
    ensure(reqs.len() == 50 && times[2] < 0.1, format!("batched rollout of {} requests: median {:.4}s", reqs.len(), times[2]))
}

fn beats_random(world: &World, p: &Pipeline) -> Check {
    let deployer = Deployer { net: &p.net, cost: &world.cost, evaluator: &world.val };
    let root = RngStream::new(300);
    let mut diffs = Vec::new();
    let (mut gen_sum, mut rnd_sum) = (0.0, 0.0);
    for (i, (req, res)) in p.requests.iter().zip(&p.results).enumerate() {
        let rnd = deployer.random_search(*req, 1, &DeployConfig::default(), &root.fork_indexed("request", i)).unwrap();
        let a = world.test.accuracy(&p.net, &res.arch, req.superclass).unwrap();
        let b = world.test.accuracy(&p.net, &rnd.arch, req.superclass).unwrap();
        gen_sum += a;
        rnd_sum += b;
        diffs.push(a - b);
    }
    let n = diffs.len() as f64;
    let (mean, se) = mean_and_se(&diffs);
    ensure(
        mean >= -se,
        format!("test accuracy generator {:.4} vs random {:.4}, difference {mean:+.4} (SE {se:.4})", gen_sum / n, rnd_sum / n),
    )
}

fn dropout_ablation(world: &World, seed0: &Supernet) -> Check {
    let mut diffs = Vec::new();
    let mut lines = Vec::new();
    for &seed in &SEEDS {
        let base = world.supernet(seed, 0.0);
        let base_test = world.panel_accuracy(&base, &world.test);
        let mut best: Option<(f64, f64, f64)> = None;
        for &q in &Q_SWEEP {
            let owned;
            let net = if seed == SEEDS[0] && q == Q_SWEEP[0] {
                seed0
            } else {
                owned = world.supernet(seed, q);
                &owned
            };
            let val = world.panel_accuracy(net, &world.val);
            if best.is_none_or(|b| val > b.1) {
                best = Some((q, val, world.panel_accuracy(net, &world.test)));
            }
        }
        let (q, _, test) = best.unwrap();
        lines.push(format!("seed {seed}: q={q} {test:.4} vs q=0 {base_test:.4}"));
        diffs.push(test - base_test);
    }
    let (mean, se) = mean_and_se(&diffs);
    ensure(mean >= -se, format!("{}; mean difference {mean:+.4} (SE {se:.4})", lines.join(", ")))
}

fn similarity(world: &World, p: &Pipeline) -> Check {
    let mut levels: Vec<(f64, Vec<(DiscreteArch, f64)>)> = Vec::new();
    for (req, res) in p.requests.iter().zip(&p.results).rev() {
        match levels.iter_mut().find(|l| l.0 == req.budget_madds_m) {
            Some(l) => l.1.push((res.arch.clone(), res.madds_m)),
            None => levels.push((req.budget_madds_m, vec![(res.arch.clone(), res.madds_m)])),
        }
    }
    let curve = similarity_report(&levels, &world.space).unwrap();
    let in_range = curve.iter().all(|s| (0.0..=1.0).contains(&s.mean_cosine));
    let sorted = curve.windows(2).all(|w| w[0].budget_madds_m < w[1].budget_madds_m) && curve.iter().enumerate().all(|(i, s)| s.level == i);
    let self_one = p.results.iter().all(|r| arch_cosine(&r.arch, &r.arch, &world.space).unwrap() == 1.0);
    let first = curve.first().map(|s| s.mean_cosine).unwrap_or(f64::NAN);
    let last = curve.last().map(|s| s.mean_cosine).unwrap_or(f64::NAN);
    ensure(
        curve.len() == REQUEST_LEVELS && in_range && sorted && self_one,
        format!(
            "{} levels, in [0,1] {in_range}, sorted {sorted}, self-similarity 1 {self_one}, cosine {first:.3} at lowest to {last:.3} at highest budget",
            curve.len()
        ),
    )
}

fn both(a: Check, b: Check) -> Check {
    match (a, b) {
        (Ok(a), Ok(b)) => Ok(format!("(a) {a}; (b) {b}")),
        (a, b) => {
            let show = |c: Check| match c {
                Ok(d) => format!("pass {d}"),
                Err(d) => format!("FAIL {d}"),
            };
            Err(format!("(a) {}; (b) {}", show(a), show(b)))
        }
    }
}

fn report(index: usize, name: &str, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail, ok) = match outcome {
        Ok(d) => ("PASS", d, true),
        Err(d) => ("FAIL", d, false),
    };
    println!("criterion {index} {tag} {name}: {detail} [{secs:.1}s]");
    ok
}

fn main() -> ExitCode {
    let mut all = true;
    all &= report(1, "cost exactness", cost_exactness);
    all &= report(2, "gate marginal", gate_marginal);
    all &= report(3, "gradient fidelity", gradient_fidelity);
    all &= report(4, "pass-through and extraction", pass_through_and_extraction);
    all &= report(5, "superclass dropout semantics", dropout_semantics);

    let start = Instant::now();
    let world = World::new();
    let seed0 = world.supernet(SEEDS[0], Q_SWEEP[0]);
    let pipe = catch_unwind(AssertUnwindSafe(|| pipeline(&world, seed0.clone())));
    let secs = start.elapsed().as_secs_f64();
    match &pipe {
        Ok(p) => {
            all &= report(6, "budget tracking", || budget_tracking(p, secs));
            all &= report(7, "generation latency", || latency(p));
        }
        Err(_) => {
            for (i, name) in [(6, "budget tracking"), (7, "generation latency")] {
                all &= report(i, name, || Err("pipeline failed".into()));
            }
        }
    }
    all &= report(8, "generator vs random and dropout vs no dropout", || {
        let a = match &pipe {
            Ok(p) => beats_random(&world, p),
            Err(_) => Err("pipeline failed".into()),
        };
        both(a, dropout_ablation(&world, &seed0))
    });
    match &pipe {
        Ok(p) => all &= report(9, "similarity curve", || similarity(&world, p)),
        Err(_) => all &= report(9, "similarity curve", || Err("pipeline failed".into())),
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
