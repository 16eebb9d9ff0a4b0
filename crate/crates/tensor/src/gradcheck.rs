//! Central finite-difference gradient checks.
//!
//! The reported error is norm-wise: `‖analytic − numeric‖ / max(‖analytic‖,
//! ‖numeric‖, 1e-8)` over the checked coordinates.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub eps: f64,
    /// Upper bound on coordinates checked per tensor; `None` checks all.
    pub max_coords: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { eps: 1e-6, max_coords: None }
    }
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub rel_error: f64,
    pub coords: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradReport {
    fn new(analytic: Vec<f64>, numeric: Vec<f64>) -> Self {
        let rel_error = relative_error(&analytic, &numeric);
        GradReport { rel_error, coords: analytic.len(), analytic, numeric }
    }
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied())).max(1e-8);
    diff / scale
}

fn coords(n: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < n => {
            // Evenly spread, always including both ends.
            (0..m).map(|i| if m == 1 { 0 } else { i * (n - 1) / (m - 1) }).collect()
        }
        _ => (0..n).collect(),
    }
}

/// Checks gradients of a scalar function with respect to each input tensor.
pub fn check_inputs<F>(cfg: GradCheck, inputs: &[Tensor], f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor], track: bool| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|t| g.leaf(Tensor::new(t.shape().to_vec(), t.data().to_vec()).unwrap().with_requires_grad(track)))
            .collect();
        let out = f(&mut g, &vars)?;
        Ok((g, vars, out))
    };
    let (g, vars, out) = eval(inputs, true)?;
    let grads = g.backward(out)?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let n = inputs[ti].numel();
        let g_an = grads.get(*var).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        for j in coords(n, cfg.max_coords) {
            let orig = work[ti].data()[j];
            work[ti].data_mut()[j] = orig + cfg.eps;
            let (gp, _, op) = eval(&work, false)?;
            let fp = gp.data(op)[0];
            work[ti].data_mut()[j] = orig - cfg.eps;
            let (gm, _, om) = eval(&work, false)?;
            let fm = gm.data(om)[0];
            work[ti].data_mut()[j] = orig;
            analytic.push(g_an[j]);
            numeric.push((fp - fm) / (2.0 * cfg.eps));
        }
    }
    Ok(GradReport::new(analytic, numeric))
}

/// Checks parameter gradients of a scalar function of a [`ParamStore`].
/// The store is perturbed in place and restored before returning.
pub fn check_params<F>(cfg: GradCheck, store: &mut ParamStore, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let grads = g.backward(out)?;
    let ids: Vec<ParamId> = store.ids().collect();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for id in ids {
        let n = store.get(id).numel();
        let g_an = grads.param(id).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        for j in coords(n, cfg.max_coords) {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + cfg.eps;
            let mut gp = Graph::inference();
            let op = f(&mut gp, store)?;
            let fp = gp.data(op)[0];
            store.get_mut(id).data_mut()[j] = orig - cfg.eps;
            let mut gm = Graph::inference();
            let om = f(&mut gm, store)?;
            let fm = gm.data(om)[0];
            store.get_mut(id).data_mut()[j] = orig;
            analytic.push(g_an[j]);
            numeric.push((fp - fm) / (2.0 * cfg.eps));
        }
    }
    Ok(GradReport::new(analytic, numeric))
}
