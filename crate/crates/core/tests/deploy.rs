mod common;

use common::{small_space, tiny_space};
use eas_core::cost::CostTable;
use eas_core::data::{self, Splits, SuperclassPartition, SyntheticSpec};
use eas_core::deploy::{DeployConfig, Deployer, EvolutionConfig};
use eas_core::eval::Evaluator;
use eas_core::generator::{Generator, GeneratorConfig, Request};
use eas_core::harness::scaled_budget_range;
use eas_core::space::{enumerate, SearchSpaceConfig};
use eas_core::substrate::RngStream;
use eas_core::supernet::Supernet;
use eas_core::train::{train_supernet, TrainInputs, TrainSchedule};
use eas_core::EasError;

struct Fixture {
    net: Supernet,
    cost: CostTable,
    evaluator: Evaluator,
}

fn fixture(space: SearchSpaceConfig, per_super: usize, epochs: usize) -> Fixture {
    let classes = space.head.classes;
    let spec = SyntheticSpec {
        classes,
        classes_per_superclass: per_super,
        samples_per_class: 40,
        resolution: space.input_resolution,
        seed: 3,
        ..SyntheticSpec::default()
    };
    let splits: Splits = data::synthetic(&spec).unwrap();
    let partition = SuperclassPartition::contiguous(classes / per_super, per_super);
    let mut net = Supernet::init(&space, &mut RngStream::new(4)).unwrap();
    if epochs > 0 {
        let mut sched = TrainSchedule::progressive(epochs);
        sched.batch_size = 32;
        sched.lr = 0.05;
        let inputs = TrainInputs { train: &splits.train, partition: &partition, evaluator: None, divergence_dir: None };
        train_supernet(&mut net, &inputs, &sched, None, &RngStream::new(5)).unwrap();
    }
    let evaluator = Evaluator::new(&splits.train, &splits.val, &partition, 32, 64, &RngStream::new(6)).unwrap();
    Fixture { cost: CostTable::build(&space), net, evaluator }
}

impl Fixture {
    fn deployer(&self) -> Deployer<'_> {
        Deployer { net: &self.net, cost: &self.cost, evaluator: &self.evaluator }
    }
}

fn generator(f: &Fixture) -> Generator {
    let (lo, hi) = scaled_budget_range(&f.cost);
    let cfg = GeneratorConfig { budget_low: lo, budget_high: hi, ..Default::default() };
    Generator::new(cfg, &f.net.space, f.evaluator.superclasses(), &mut RngStream::new(7)).unwrap()
}

#[test]
fn budget_below_minimum_is_infeasible() {
    let f = fixture(small_space(), 3, 0);
    let gen = generator(&f);
    let req = Request { superclass: 0, budget_madds_m: f.cost.min_madds() * 0.5 };
    let d = f.deployer();
    let cfg = DeployConfig::default();
    assert!(matches!(d.generate(&gen, req, &cfg, &RngStream::new(1)), Err(EasError::InfeasibleBudget { .. })));
    assert!(matches!(d.random_search(req, 1, &cfg, &RngStream::new(1)), Err(EasError::InfeasibleBudget { .. })));
    assert!(matches!(
        d.evolutionary_search(req, &EvolutionConfig::default(), &RngStream::new(1)),
        Err(EasError::InfeasibleBudget { .. })
    ));
}

#[test]
fn generated_architectures_respect_the_budget() {
    let f = fixture(small_space(), 3, 0);
    let gen = generator(&f);
    let d = f.deployer();
    let reqs: Vec<Request> = (0..6)
        .map(|i| Request { superclass: i % 2, budget_madds_m: gen.config.budget_low + i as f64 * (gen.config.budget_high - gen.config.budget_low) / 5.0 })
        .collect();
    let cfg = DeployConfig::default();
    let out = d.generate_batch(&gen, &reqs, &cfg, &RngStream::new(2)).unwrap();
    for (req, res) in reqs.iter().zip(&out) {
        assert!(res.madds_m <= req.budget_madds_m, "{} > {}", res.madds_m, req.budget_madds_m);
        assert_eq!(res.madds, d.madds(&res.arch).unwrap());
        assert!(res.feasible >= 1 && res.attempts <= cfg.attempt_cap);
    }
    let again = d.generate_batch(&gen, &reqs, &cfg, &RngStream::new(2)).unwrap();
    assert_eq!(out.iter().map(|r| &r.arch).collect::<Vec<_>>(), again.iter().map(|r| &r.arch).collect::<Vec<_>>());
}

#[test]
fn unknown_superclass_is_rejected() {
    let f = fixture(small_space(), 3, 0);
    let gen = generator(&f);
    let req = Request { superclass: 9, budget_madds_m: f.cost.max_madds() };
    assert!(matches!(
        f.deployer().generate(&gen, req, &DeployConfig::default(), &RngStream::new(1)),
        Err(EasError::UnknownSuperclass { .. })
    ));
}

#[test]
fn uniform_sampling_marginals() {
    let f = fixture(small_space(), 3, 0);
    let d = f.deployer();
    let mut r = RngStream::new(8);
    let n = 6000;
    let (mut depth, mut kernel, mut blocks) = ([0usize; 3], [0usize; 3], 0usize);
    for _ in 0..n {
        let a = d.uniform_arch(&mut r);
        for u in &a.units {
            depth[u.depth - 2] += 1;
            for b in &u.blocks {
                kernel[(b.kernel - 3) / 2] += 1;
                blocks += 1;
            }
        }
    }
    let units = (n * 2) as f64;
    for c in depth {
        assert!((c as f64 / units - 1.0 / 3.0).abs() < 0.02, "{depth:?}");
    }
    for c in kernel {
        assert!((c as f64 / blocks as f64 - 1.0 / 3.0).abs() < 0.02, "{kernel:?}");
    }
}

#[test]
fn evolution_approaches_exhaustive_optimum_on_tiny_space() {
    let f = fixture(tiny_space(), 2, 4);
    let d = f.deployer();
    let space = &f.net.space;
    let budget = (f.cost.min_madds() + f.cost.max_madds()) / 2.0;
    let mut feasible = Vec::new();
    for arch in enumerate(space, 1000).unwrap() {
        if d.madds(&arch).unwrap() as f64 <= budget * 1e6 {
            feasible.push(f.evaluator.accuracy(&f.net, &arch, 0).unwrap());
        }
    }
    feasible.sort_by(f64::total_cmp);
    let best = *feasible.last().unwrap();
    let p90 = feasible[feasible.len() * 9 / 10];
    let evo = EvolutionConfig { generations: 15, ..EvolutionConfig::default() };
    let res = d.evolutionary_search(Request { superclass: 0, budget_madds_m: budget }, &evo, &RngStream::new(9)).unwrap();
    assert!(res.madds_m <= budget);
    assert!(res.accuracy >= p90, "evolution {} below 90th percentile {p90} (best {best})", res.accuracy);
    let random = d.random_search(Request { superclass: 0, budget_madds_m: budget }, 1, &DeployConfig::default(), &RngStream::new(9)).unwrap();
    assert!(random.madds_m <= budget);
}
