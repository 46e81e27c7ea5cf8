use std::collections::HashMap;

use super::graph::{Graph, NodeId};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for relative errors; entries whose analytic and
/// numeric gradients are both below this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradTarget {
    Param,
    Input,
}

#[derive(Clone, Debug)]
pub struct GradcheckEntry {
    pub name: String,
    pub target: GradTarget,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
}

/// Analytic vs central-difference comparison for every parameter and
/// differentiable input of a scalar graph.
#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub epsilon: f64,
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() < tol
    }

    /// Entries whose error meets or exceeds `tol`.
    pub fn flagged(&self, tol: f64) -> Vec<&GradcheckEntry> {
        self.entries
            .iter()
            .filter(|e| e.max_rel_error >= tol)
            .collect()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares backpropagated gradients of the scalar node `output` against
/// central differences with step `epsilon`. Neither `graph` nor `store` is
/// modified.
pub fn gradcheck(
    graph: &Graph,
    store: &ParamStore,
    inputs: &HashMap<String, Tensor>,
    output: NodeId,
    epsilon: f64,
) -> Result<GradcheckReport> {
    if !(epsilon > 1e-8 && epsilon < 1e-3) {
        return Err(Error::InvalidArgument(format!(
            "epsilon {epsilon} outside (1e-8, 1e-3)"
        )));
    }
    let mut g = graph.clone();
    let mut s = store.clone();
    s.zero_grad();
    g.forward(&s, inputs)?;
    if !g.value(output)?.is_scalar() {
        return Err(Error::InvalidArgument(
            "gradcheck requires a scalar output".into(),
        ));
    }
    let input_grads = g.backward(&mut s, output, None)?;

    let eval = |st: &ParamStore, inp: &HashMap<String, Tensor>| -> Result<f64> {
        let mut g2 = graph.clone();
        g2.forward(st, inp)?;
        Ok(g2.value(output)?.item())
    };

    let mut entries = Vec::new();
    for name in graph.param_names() {
        let analytic = s.grad(&name)?.clone();
        let mut probe = store.clone();
        let mut errs = Errors::default();
        for i in 0..analytic.len() {
            let orig = probe.get(&name)?.data()[i];
            probe.get_mut(&name)?.data_mut()[i] = orig + epsilon;
            let up = eval(&probe, inputs)?;
            probe.get_mut(&name)?.data_mut()[i] = orig - epsilon;
            let down = eval(&probe, inputs)?;
            probe.get_mut(&name)?.data_mut()[i] = orig;
            errs.record(i, analytic.data()[i], (up - down) / (2.0 * epsilon));
        }
        entries.push(errs.finish(name, GradTarget::Param));
    }
    for name in graph.value_inputs() {
        let Some(base) = inputs.get(&name) else {
            continue;
        };
        let analytic = input_grads
            .get(&name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(base.shape()));
        let mut inp = inputs.clone();
        let mut errs = Errors::default();
        for i in 0..base.len() {
            let orig = base.data()[i];
            inp.get_mut(&name).expect("present").data_mut()[i] = orig + epsilon;
            let up = eval(store, &inp)?;
            inp.get_mut(&name).expect("present").data_mut()[i] = orig - epsilon;
            let down = eval(store, &inp)?;
            inp.get_mut(&name).expect("present").data_mut()[i] = orig;
            errs.record(i, analytic.data()[i], (up - down) / (2.0 * epsilon));
        }
        entries.push(errs.finish(name, GradTarget::Input));
    }
    Ok(GradcheckReport { epsilon, entries })
}

#[derive(Default)]
struct Errors {
    rel: f64,
    abs: f64,
    worst: usize,
}

impl Errors {
    fn record(&mut self, i: usize, analytic: f64, numeric: f64) {
        let r = relative_error(analytic, numeric);
        if r > self.rel {
            self.rel = r;
            self.worst = i;
        }
        self.abs = self.abs.max((analytic - numeric).abs());
    }

    fn finish(self, name: String, target: GradTarget) -> GradcheckEntry {
        GradcheckEntry {
            name,
            target,
            max_rel_error: self.rel,
            max_abs_error: self.abs,
            worst_index: self.worst,
        }
    }
}
