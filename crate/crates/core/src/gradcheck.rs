//! Central finite-difference gradient checks in `f64`.
//!
//! The numerical side only ever runs forward passes, so it stays independent
//! of every backward rule it is used to verify.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Outcome of comparing analytic and numerical gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    /// Largest `max|analytic − numeric| / max(‖analytic‖∞, ‖numeric‖∞)`
    /// over the checked tensors (coordinates restricted to the sample).
    pub max_rel_err: f64,
    /// Number of scalar coordinates perturbed.
    pub coords: usize,
}

impl GradCheckReport {
    fn merge(&mut self, rel: f64, coords: usize) {
        self.max_rel_err = self.max_rel_err.max(rel);
        self.coords += coords;
    }
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-8);
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / scale
}

fn coords(rng: &mut impl Rng, len: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(k) if k < len => {
            let mut v = sample(rng, len, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..len).collect(),
    }
}

/// Checks gradients of `f` with respect to each tensor in `inputs`.
///
/// `f` builds a scalar loss on a fresh graph from leaf vars holding the
/// inputs. At most `limit` coordinates per input are perturbed (all when
/// `None`), each by `±step`.
pub fn check_inputs<F>(
    inputs: &[Tensor<f64>],
    f: F,
    step: f64,
    limit: Option<usize>,
    rng: &mut impl Rng,
) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let graph = Graph::new();
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| graph.input(t.clone())).collect();
    let loss = f(&graph, &vars)?;
    let grads = graph.backward(&loss)?;
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::no_grad();
        let vs: Vec<Var<f64>> = xs.iter().map(|t| g.constant(t.clone())).collect();
        Ok(f(&g, &vs)?.value().item())
    };
    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let zero = Tensor::zeros(v.shape());
        let analytic = grads.get(v).unwrap_or(&zero);
        let picked = coords(rng, inputs[i].len(), limit);
        let mut a = Vec::with_capacity(picked.len());
        let mut n = Vec::with_capacity(picked.len());
        for &c in &picked {
            let orig = work[i].data()[c];
            work[i].data_mut()[c] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[c] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[c] = orig;
            a.push(analytic.data()[c]);
            n.push((plus - minus) / (2.0 * step));
        }
        report.merge(relative_error(&a, &n), picked.len());
    }
    Ok(report)
}

/// Checks gradients of `f` with respect to stored parameters.
///
/// `f` runs a forward pass against the store (recording on the given graph)
/// and returns a scalar loss. Parameter leaves must come from
/// [`Graph::param`] so the sweep can attribute their gradients.
pub fn check_params<F>(
    store: &mut ParamStore<f64>,
    ids: &[ParamId],
    f: F,
    step: f64,
    limit: Option<usize>,
    rng: &mut impl Rng,
) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, &mut ParamStore<f64>) -> Result<Var<f64>>,
{
    let graph = Graph::new();
    let loss = f(&graph, store)?;
    let grads = graph.backward(&loss)?;
    let analytic: Vec<Tensor<f64>> = ids
        .iter()
        .map(|&id| {
            grads
                .param(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()))
        })
        .collect();
    drop(graph);
    let mut report = GradCheckReport::default();
    for (&id, an) in ids.iter().zip(&analytic) {
        let picked = coords(rng, an.len(), limit);
        let mut a = Vec::with_capacity(picked.len());
        let mut n = Vec::with_capacity(picked.len());
        for &c in &picked {
            let orig = store.value(id).data()[c];
            store.value_mut(id).data_mut()[c] = orig + step;
            let plus = f(&Graph::no_grad(), store)?.value().item();
            store.value_mut(id).data_mut()[c] = orig - step;
            let minus = f(&Graph::no_grad(), store)?.value().item();
            store.value_mut(id).data_mut()[c] = orig;
            a.push(an.data()[c]);
            n.push((plus - minus) / (2.0 * step));
        }
        report.merge(relative_error(&a, &n), picked.len());
    }
    Ok(report)
}

/// `Σ out ⊙ weights` with fixed random weights: a generic scalar readout
/// whose gradient exercises every output element.
pub fn random_readout(g: &Graph<f64>, out: &Var<f64>, rng: &mut impl Rng) -> Result<Var<f64>> {
    let w = crate::rng::uniform::<f64>(rng, out.shape(), -1.0, 1.0);
    let prod = g.mul(out, &g.constant(w))?;
    g.sum_all(&prod)
}
