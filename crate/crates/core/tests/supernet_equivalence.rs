mod common;

use common::{random_arch, random_batch, small_space};
use eas_core::space::{from_discrete, SearchSpaceConfig};
use eas_core::substrate::{Graph, RngStream, Tensor};
use eas_core::supernet::{calibrate, extract, forward_discrete, forward_gated, NormMode, Supernet};
use rand::Rng;

fn discrete_logits(net: &Supernet, x: &Tensor, arch: &eas_core::space::DiscreteArch, norm: NormMode) -> Vec<f32> {
    let mut g = Graph::<f32>::new();
    let xi = g.input(x.clone());
    let y = forward_discrete(&mut g, &net.weights, &net.space, xi, arch, norm, false).unwrap();
    g.value(y).data().to_vec()
}

fn gated_logits(net: &Supernet, x: &Tensor, gates: &[f32]) -> Vec<f32> {
    let mut g = Graph::<f32>::new();
    let xi = g.input(x.clone());
    let gi = g.constant(Tensor::from_vec(gates.to_vec()));
    let y = forward_gated(&mut g, &net.weights, &net.space, xi, gi, NormMode::Batch, false).unwrap();
    g.value(y).data().to_vec()
}

fn assert_close(a: &[f32], b: &[f32], atol: f32) {
    assert_eq!(a.len(), b.len());
    for (p, q) in a.iter().zip(b) {
        assert!((p - q).abs() <= atol, "{p} vs {q}");
    }
}

#[test]
fn standalone_matches_supernet_on_20_pairs() {
    let space = SearchSpaceConfig::mini(12);
    let net = Supernet::init(&space, &mut RngStream::new(1)).unwrap();
    let mut r = RngStream::new(2);
    for _ in 0..20 {
        let arch = random_arch(&space, &mut r);
        let x = random_batch(&space, 4, &mut r);
        let sub = extract(&net, &arch).unwrap();
        let want = discrete_logits(&net, &x, &arch, NormMode::Batch);
        assert_close(sub.forward(&x, None).unwrap().data(), &want, 1e-5);
    }
}

#[test]
fn standalone_matches_with_calibrated_statistics() {
    let space = small_space();
    let net = Supernet::init(&space, &mut RngStream::new(3)).unwrap();
    let mut r = RngStream::new(4);
    for _ in 0..5 {
        let arch = random_arch(&space, &mut r);
        let calib = random_batch(&space, 16, &mut r);
        let stats = calibrate(&net, &arch, &calib, 5).unwrap();
        let x = random_batch(&space, 3, &mut r);
        let want = discrete_logits(&net, &x, &arch, NormMode::Fixed(&stats));
        assert_close(extract(&net, &arch).unwrap().forward(&x, Some(&stats)).unwrap().data(), &want, 1e-5);
    }
}

#[test]
fn binary_gates_match_discrete_forward() {
    let space = SearchSpaceConfig::mini(12);
    let net = Supernet::init(&space, &mut RngStream::new(5)).unwrap();
    let mut r = RngStream::new(6);
    for _ in 0..5 {
        let arch = random_arch(&space, &mut r);
        let x = random_batch(&space, 2, &mut r);
        let gates: Vec<f32> = from_discrete(&arch, &space).unwrap().as_f64().iter().map(|&v| v as f32).collect();
        assert_close(&gated_logits(&net, &x, &gates), &discrete_logits(&net, &x, &arch, NormMode::Batch), 1e-5);
    }
}

#[test]
fn closed_depth_gate_passes_features_through_bitwise() {
    let space = small_space();
    let mut net = Supernet::init(&space, &mut RngStream::new(7)).unwrap();
    let layout = space.layout();
    let mut r = RngStream::new(8);
    let x = random_batch(&space, 3, &mut r);
    let mut gates: Vec<f32> = (0..layout.len()).map(|_| if r.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
    // unit 1 runs only its two mandatory blocks
    for i in layout.units[1].depth.clone() {
        gates[i] = 0.0;
    }
    let base = gated_logits(&net, &x, &gates);

    for b in 2..4 {
        let (k, e) = layout.units[1].blocks[b].clone();
        for i in k.chain(e) {
            gates[i] = 1.0 - gates[i];
        }
        for layer in ["expand.w", "dw.w", "project.w", "expand.bn.g", "project.bn.b"] {
            let t = net.weights.get_mut(&format!("u1.b{b}.{layer}")).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = r.random_range(-3.0..3.0));
        }
    }
    let after = gated_logits(&net, &x, &gates);
    assert!(base.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()), "{base:?} vs {after:?}");

    // opening the gate does change the output
    gates[layout.units[1].depth.start] = 1.0;
    assert_ne!(gated_logits(&net, &x, &gates), base);
}
