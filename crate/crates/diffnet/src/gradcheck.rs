//! Central finite-difference verification of reverse-mode gradients.
//!
//! Evaluation runs in 64-bit precision on perturbed copies of the
//! parameters, independent of the backward pass it checks.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub rel_error: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checks: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() <= tol
    }
}

/// Norms below this are treated as zero gradients; the difference is then
/// compared against the floor instead, since finite differences of an
/// invariant direction only produce round-off.
pub const NORM_FLOOR: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, NORM_FLOOR)` in the L2 sense.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(NORM_FLOOR)
}

fn eval_loss<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    Ok(g.scalar(loss))
}

/// Compares backward-pass parameter gradients with central differences for
/// every entry of every parameter in `store`.
pub fn check_params<F>(store: &ParamStore, step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let analytic = g.backward(loss)?.for_store(store);

    let mut probe = store.clone();
    let mut report = GradCheckReport::default();
    for (id, p) in store.iter() {
        let n = p.value.numel();
        let mut numeric = vec![0.0; n];
        for j in 0..n {
            let orig = probe.value(id).data()[j];
            probe.value_mut(id).data_mut()[j] = orig + step;
            let up = eval_loss(&probe, &f)?;
            probe.value_mut(id).data_mut()[j] = orig - step;
            let down = eval_loss(&probe, &f)?;
            probe.value_mut(id).data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * step);
        }
        let a = analytic.get(id);
        report.checks.push(TensorCheck {
            name: p.name.clone(),
            rel_error: relative_error(a, &numeric),
            analytic_norm: a.iter().map(|x| x * x).sum::<f64>().sqrt(),
            numeric_norm: numeric.iter().map(|x| x * x).sum::<f64>().sqrt(),
        });
    }
    Ok(report)
}

/// Same check for the gradient with respect to a tracked input tensor.
pub fn check_input<F>(input: &Tensor, step: f64, f: F) -> Result<TensorCheck>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.input(input.clone());
    let loss = f(&mut g, x)?;
    let grads = g.backward(loss)?;
    let analytic = grads
        .wrt(x)
        .map(|s| s.to_vec())
        .unwrap_or_else(|| vec![0.0; input.numel()]);

    let mut probe = input.clone();
    let mut numeric = vec![0.0; input.numel()];
    for j in 0..input.numel() {
        let orig = probe.data()[j];
        let eval = |v: f64, probe: &mut Tensor| -> Result<f64> {
            probe.data_mut()[j] = v;
            let mut g = Graph::new();
            let x = g.input(probe.clone());
            let loss = f(&mut g, x)?;
            Ok(g.scalar(loss))
        };
        let up = eval(orig + step, &mut probe)?;
        let down = eval(orig - step, &mut probe)?;
        probe.data_mut()[j] = orig;
        numeric[j] = (up - down) / (2.0 * step);
    }
    Ok(TensorCheck {
        name: "input".into(),
        rel_error: relative_error(&analytic, &numeric),
        analytic_norm: analytic.iter().map(|x| x * x).sum::<f64>().sqrt(),
        numeric_norm: numeric.iter().map(|x| x * x).sum::<f64>().sqrt(),
    })
}
