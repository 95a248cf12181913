//! Central finite-difference checks of reverse-mode gradients, run in f64.

use std::collections::BTreeMap;

use super::graph::{Graph, NodeId};
use super::optim::ParamMap;
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Check at most this many evenly spaced entries per parameter.
    pub max_entries_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-4, floor: 1e-6, max_entries_per_param: None }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// Max relative error per parameter.
    pub per_param: BTreeMap<String, f64>,
    /// Straight-through nodes in the graph. Their backward is an estimator, not the
    /// derivative of the forward value, so a graph containing any is excluded from
    /// the exactness check.
    pub estimators: Vec<String>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_param.values().copied().fold(0.0, f64::max)
    }

    pub fn is_exactness_checkable(&self) -> bool {
        self.estimators.is_empty()
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.is_exactness_checkable() && self.max_error() <= tolerance
    }

    pub fn lines(&self) -> Vec<String> {
        let mut out: Vec<String> =
            self.per_param.iter().map(|(k, v)| format!("{k}: max rel err {v:.3e}")).collect();
        out.extend(self.estimators.iter().map(|e| format!("{e}: estimator, excluded from exactness check")));
        out
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the backward pass of `build` against central differences for every
/// parameter in `params`. `build` must register parameters by name with
/// [`Graph::param`] and return the scalar loss; any noise it uses must be fixed.
pub fn gradient_check<F>(params: &ParamMap<f64>, build: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamMap<f64>) -> Result<NodeId>,
{
    let mut g = Graph::<f64>::new();
    let loss = build(&mut g, params)?;
    let estimators = g.estimators().into_iter().map(|(_, l)| l).collect();
    let grads = g.backward(loss)?;

    let eval = |p: &ParamMap<f64>| -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let l = build(&mut g, p)?;
        Ok(g.value(l).item())
    };

    let mut per_param = BTreeMap::new();
    let mut work = params.clone();
    for (name, tensor) in params {
        let analytic = grads.get(name).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; tensor.len()]);
        let n = tensor.len();
        let stride = match opts.max_entries_per_param {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let mut worst = 0.0f64;
        for i in (0..n).step_by(stride) {
            let orig = tensor.data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + opts.step;
            let up = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig - opts.step;
            let down = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            worst = worst.max(relative_error(analytic[i], numeric, opts.floor));
        }
        per_param.insert(name.clone(), worst);
    }
    Ok(GradCheckReport { per_param, estimators })
}
