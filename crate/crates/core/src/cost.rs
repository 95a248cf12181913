//! Analytic multiply-add counts.
//!
//! The cost of an architecture is a multilinear polynomial in the raw gates.
//! Within a block, with effective (running-product) expansion gates `E_i` and
//! kernel gates `K_j` (`E_0 = K_0 = 1`),
//!
//! ```text
//! cost = switch * sum_ij c_ij * E_i * K_j
//! c_ij = de_i * (A * [j == 0] + D * dk_j)
//! A    = h*w*c_in^2 + h'*w'*c_in*c_out      (expand + project per unit ratio)
//! D    = h'*w'*c_in                          (depthwise per unit ratio per tap)
//! ```
//!
//! where `de_i`, `dk_j` are increments between consecutive expansion ratios and
//! squared kernel sizes, and `switch` is the effective depth gate that turns the
//! block on (or 1 for always-present blocks). Every coefficient is a
//! non-negative integer.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{EasError, Result};
use crate::space::{ArchEncoding, SearchSpaceConfig};
use crate::substrate::{Graph, Monomial, NodeId, Real};

/// Multiply-adds of one inverted residual block: pointwise expand at the input
/// resolution, depthwise `k x k` with stride, pointwise project.
pub fn block_madds(h: usize, w: usize, c_in: usize, expand: usize, kernel: usize, c_out: usize, stride: usize) -> u64 {
    let (h, w, c_in, e, k, c_out, s) =
        (h as u64, w as u64, c_in as u64, expand as u64, kernel as u64, c_out as u64, stride as u64);
    let mid = e * c_in;
    let (ho, wo) = (h / s, w / s);
    h * w * c_in * mid + ho * wo * mid * k * k + ho * wo * mid * c_out
}

/// Budget in millions of multiply-adds.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Budget(pub f64);

impl Budget {
    pub fn millions(self) -> f64 {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockCost {
    /// Raw gate indices of the depth prefix that must all be on, empty when the
    /// block always runs.
    pub switch: Vec<usize>,
    /// Block slot can never be active for this space.
    pub unreachable: bool,
    pub expand_gates: Vec<usize>,
    pub kernel_gates: Vec<usize>,
    /// `coef[i][j]` multiplies `E_i * K_j`.
    pub coef: Vec<Vec<u64>>,
}

impl BlockCost {
    pub fn base(&self) -> u64 {
        self.coef[0][0]
    }

    /// Cost of the block at a given expansion/kernel choice index, ignoring the switch.
    pub fn at(&self, expand_idx: usize, kernel_idx: usize) -> u64 {
        let mut total = 0;
        for i in 0..=expand_idx {
            for j in 0..=kernel_idx {
                total += self.coef[i][j];
            }
        }
        total
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostTable {
    pub stem: u64,
    pub head: u64,
    pub blocks: Vec<BlockCost>,
    gate_count: usize,
    terms: Arc<Vec<Monomial>>,
}

impl CostTable {
    pub fn build(space: &SearchSpaceConfig) -> CostTable {
        let [h0, w0, c0] = space.input_resolution;
        let s = space.stem.stride;
        let stem = ((h0 / s) * (w0 / s) * c0 * space.stem.kernel * space.stem.kernel * space.stem.channels) as u64;
        let (hh, hw, hc) = space.head_input();
        let head = (hh * hw * hc * space.head.hidden + space.head.hidden * space.head.classes) as u64;

        let de = increments(&space.expand_choices.iter().map(|&e| e as u64).collect::<Vec<_>>());
        let dk = increments(&space.kernel_choices.iter().map(|&k| (k * k) as u64).collect::<Vec<_>>());
        let layout = space.layout();
        let mut blocks = Vec::new();
        for geom in space.block_geometry() {
            let unit = &layout.units[geom.unit];
            let (kr, er) = unit.blocks[geom.block].clone();
            let (h, w, ci, co) = (geom.h as u64, geom.w as u64, geom.c_in as u64, geom.c_out as u64);
            let (ho, wo) = (h / geom.stride as u64, w / geom.stride as u64);
            let a = h * w * ci * ci + ho * wo * ci * co;
            let d = ho * wo * ci;
            let coef = de
                .iter()
                .map(|&dei| dk.iter().enumerate().map(|(j, &dkj)| dei * (if j == 0 { a } else { 0 } + d * dkj)).collect())
                .collect();
            let (switch, unreachable) = match unit.block_switch[geom.block] {
                None => (Vec::new(), false),
                Some(usize::MAX) => (Vec::new(), true),
                Some(j) => (unit.depth.clone().take(j + 1).collect(), false),
            };
            blocks.push(BlockCost { switch, unreachable, expand_gates: er.collect(), kernel_gates: kr.collect(), coef });
        }
        let mut table = CostTable { stem, head, blocks, gate_count: layout.len(), terms: Arc::new(Vec::new()) };
        table.terms = Arc::new(table.monomials(1e-6));
        table
    }

    pub fn gate_count(&self) -> usize {
        self.gate_count
    }

    /// Polynomial terms with coefficients multiplied by `scale`.
    pub fn monomials(&self, scale: f64) -> Vec<Monomial> {
        let mut terms = vec![Monomial { coef: (self.stem + self.head) as f64 * scale, vars: Vec::new() }];
        for b in self.blocks.iter().filter(|b| !b.unreachable) {
            for (i, row) in b.coef.iter().enumerate() {
                for (j, &c) in row.iter().enumerate() {
                    if c == 0 {
                        continue;
                    }
                    let mut vars = b.switch.clone();
                    vars.extend_from_slice(&b.expand_gates[..i]);
                    vars.extend_from_slice(&b.kernel_gates[..j]);
                    terms.push(Monomial { coef: c as f64 * scale, vars });
                }
            }
        }
        terms
    }

    /// Exact integer cost of a gate assignment (raw gates; conjunctions are part
    /// of the polynomial).
    pub fn eval_bits(&self, gates: &[bool]) -> u64 {
        let mut total = self.stem + self.head;
        for b in self.blocks.iter().filter(|b| !b.unreachable) {
            if !b.switch.iter().all(|&g| gates[g]) {
                continue;
            }
            let ei = b.expand_gates.iter().take_while(|&&g| gates[g]).count();
            let kj = b.kernel_gates.iter().take_while(|&&g| gates[g]).count();
            total += b.at(ei, kj);
        }
        total
    }

    /// Exact multiply-adds of a normalized encoding.
    pub fn madds_exact(&self, enc: &ArchEncoding, space: &SearchSpaceConfig) -> Result<u64> {
        if !enc.is_normalized(space) {
            return Err(EasError::Encoding("cost requires a normalized encoding".into()));
        }
        Ok(self.eval_bits(&enc.gates))
    }

    /// Millions of multiply-adds of a normalized encoding.
    pub fn madds(&self, enc: &ArchEncoding, space: &SearchSpaceConfig) -> Result<f64> {
        Ok(self.madds_exact(enc, space)? as f64 / 1e6)
    }

    /// The polynomial at real-valued gate activations, in millions.
    pub fn eval_real(&self, activations: &[f64]) -> f64 {
        self.terms.iter().map(|t| t.coef * t.vars.iter().map(|&v| activations[v]).product::<f64>()).sum()
    }

    /// Cost in millions as a differentiable graph node over a `[gate_count]` node.
    pub fn madds_differentiable<T: Real>(&self, g: &mut Graph<T>, activations: NodeId) -> Result<NodeId> {
        if g.shape(activations) != [self.gate_count] {
            return Err(EasError::Shape(format!(
                "cost expects {} gate activations, got {:?}",
                self.gate_count,
                g.shape(activations)
            )));
        }
        g.polynomial(activations, self.terms.clone())
    }

    pub fn min_madds(&self) -> f64 {
        self.eval_bits(&vec![false; self.gate_count]) as f64 / 1e6
    }

    pub fn max_madds(&self) -> f64 {
        self.eval_bits(&vec![true; self.gate_count]) as f64 / 1e6
    }
}

fn increments(v: &[u64]) -> Vec<u64> {
    let mut out = vec![v[0]];
    out.extend(v.windows(2).map(|w| w[1] - w[0]));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{from_discrete, normalize};
    use crate::substrate::{gradient_check, GradCheckOptions, ParamMap, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn block_formula_examples() {
        assert_eq!(block_madds(8, 8, 16, 3, 3, 16, 1), 49152 + 27648 + 49152);
        assert_eq!(block_madds(8, 8, 16, 3, 5, 16, 1) - block_madds(8, 8, 16, 3, 3, 16, 1), 49152);
        assert_eq!(block_madds(1, 1, 1, 1, 1, 1, 1), 3);
    }

    #[test]
    fn table_agrees_with_block_formula() {
        let space = SearchSpaceConfig::default_desk(12);
        let table = CostTable::build(&space);
        for (geom, b) in space.block_geometry().iter().zip(&table.blocks) {
            for (ei, &e) in space.expand_choices.iter().enumerate() {
                for (kj, &k) in space.kernel_choices.iter().enumerate() {
                    assert_eq!(b.at(ei, kj), block_madds(geom.h, geom.w, geom.c_in, e, k, geom.c_out, geom.stride));
                }
            }
        }
    }

    #[test]
    fn minimal_cost_is_base_terms_plus_fixed() {
        let space = SearchSpaceConfig::default_desk(12);
        let t = CostTable::build(&space);
        let expected: u64 = t.stem + t.head + t.blocks.iter().filter(|b| b.switch.is_empty() && !b.unreachable).map(|b| b.base()).sum::<u64>();
        assert_eq!(t.madds_exact(&ArchEncoding::zeros(&space), &space).unwrap(), expected);
    }

    #[test]
    fn depth_gate_adds_whole_block() {
        let space = SearchSpaceConfig::default_desk(12);
        let t = CostTable::build(&space);
        let mut d = space.minimal_arch();
        d.units[1].blocks[0].kernel = 5;
        d.units[1].blocks[1].expand = 6;
        let before = t.madds_exact(&from_discrete(&d, &space).unwrap(), &space).unwrap();
        d.units[1].depth = 3;
        d.units[1].blocks.push(crate::space::BlockArch { kernel: 7, expand: 4 });
        let after = t.madds_exact(&from_discrete(&d, &space).unwrap(), &space).unwrap();
        let g = space.block_geometry()[6];
        assert_eq!((g.unit, g.block), (1, 2));
        assert_eq!(after - before, block_madds(g.h, g.w, g.c_in, 4, 7, g.c_out, 1));
    }

    #[test]
    fn unnormalized_encoding_rejected() {
        let space = SearchSpaceConfig::default_desk(12);
        let t = CostTable::build(&space);
        let mut raw = vec![false; 90];
        raw[1] = true;
        assert!(t.madds(&ArchEncoding::from_raw(raw), &space).is_err());
    }

    #[test]
    fn adding_a_gate_never_lowers_cost() {
        let space = SearchSpaceConfig::default_desk(12);
        let t = CostTable::build(&space);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let raw: Vec<bool> = (0..90).map(|_| rng.random_bool(0.5)).collect();
            let i = rng.random_range(0..90);
            let mut more = raw.clone();
            more[i] = true;
            let a = normalize(&raw, &space).unwrap();
            let b = normalize(&more, &space).unwrap();
            assert!(t.madds_exact(&b, &space).unwrap() >= t.madds_exact(&a, &space).unwrap());
        }
    }

    #[test]
    fn polynomial_matches_exact_on_binary_points() {
        let space = SearchSpaceConfig::default_desk(12);
        let t = CostTable::build(&space);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let raw: Vec<bool> = (0..90).map(|_| rng.random_bool(0.5)).collect();
            let enc = normalize(&raw, &space).unwrap();
            let exact = t.madds(&enc, &space).unwrap();
            // raw and normalized gates give the same polynomial value
            assert!((t.eval_real(&ArchEncoding::from_raw(raw).as_f64()) - exact).abs() < 1e-9);
            let mut g = Graph::<f64>::new();
            let x = g.input(Tensor::from_vec(enc.as_f64()));
            let c = t.madds_differentiable(&mut g, x).unwrap();
            assert!((g.value(c).item() - exact).abs() < 1e-9);
        }
    }

    #[test]
    fn lone_kernel_gate_gradient_is_its_delta() {
        let space = SearchSpaceConfig::default_desk(12);
        let t = CostTable::build(&space);
        let mut g = Graph::<f64>::new();
        let x = g.param("x", &Tensor::zeros(&[90]));
        let c = t.madds_differentiable(&mut g, x).unwrap();
        let grads = g.backward(c).unwrap();
        let d = grads.get("x").unwrap().data();
        let b0 = &t.blocks[0];
        assert!((d[b0.kernel_gates[0]] - b0.coef[0][1] as f64 * 1e-6).abs() < 1e-12);
        assert!((d[b0.expand_gates[0]] - b0.coef[1][0] as f64 * 1e-6).abs() < 1e-12);
        // second gates only act through the first
        assert_eq!(d[b0.kernel_gates[1]], 0.0);
    }

    #[test]
    fn differentiable_cost_matches_finite_differences() {
        let space = SearchSpaceConfig::default_desk(12);
        let t = CostTable::build(&space);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = ParamMap::new();
        p.insert("a".into(), Tensor::from_vec((0..90).map(|_| rng.random_range(0.05..0.95)).collect()));
        let report = gradient_check(
            &p,
            |g, p| {
                let a = g.param("a", &p["a"]);
                t.madds_differentiable(g, a)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_error() <= 1e-6, "{}", report.max_error());
    }
}
