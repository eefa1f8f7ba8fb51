//! Central finite-difference checks of analytic gradients.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of the backward rules it verifies. Detached values
//! (`stop_gradient`) are replayed from the unperturbed pass, so the numeric
//! derivative is that of the surrogate the analytic gradient describes.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const FD_EPS: f64 = 1e-5;

/// `|a - b| / max(1, |a|, |b|)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0_f64.max(a.abs()).max(b.abs())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub label: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    fn record(&mut self, label: &str, index: usize, analytic: f64, numeric: f64) {
        self.checked += 1;
        let err = rel_error(analytic, numeric);
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = Some(Mismatch {
                label: label.to_string(),
                index,
                analytic,
                numeric,
            });
        }
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error <= tolerance
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
            self.worst = other.worst;
        }
    }
}

/// Compares gradients of `f` with respect to each input tensor.
pub fn check_inputs<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let stopped = g.stopped_values().to_vec();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::replaying(stopped.clone());
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for (j, &x0) in input.data().iter().enumerate() {
            work[i].data_mut()[j] = x0 + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = x0 - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (plus - minus) / (2.0 * eps);
            report.record(&format!("input{i}"), j, analytic[i][j], numeric);
        }
    }
    Ok(report)
}

/// Compares parameter gradients of a loss built by `f` from `store`.
///
/// At most `per_param` entries of each parameter are probed, chosen with a
/// seeded generator; `None` probes every entry.
pub fn check_params<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    per_param: Option<usize>,
    seed: u64,
    eps: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(store, &mut g)?;
    let grads = g.backward(loss)?;
    let stopped = g.stopped_values().to_vec();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    for &id in ids {
        let n = store.value(id).numel();
        let indices: Vec<usize> = match per_param {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let analytic = grads.get(id);
        for j in indices {
            let x0 = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = x0 + eps;
            let plus = forward_value(store, &stopped, &f)?;
            store.value_mut(id).data_mut()[j] = x0 - eps;
            let minus = forward_value(store, &stopped, &f)?;
            store.value_mut(id).data_mut()[j] = x0;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.map_or(0.0, |g| g[j]);
            let label = store.name(id).to_string();
            report.record(&label, j, a, numeric);
        }
    }
    Ok(report)
}

fn forward_value<F>(store: &ParamStore, stopped: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
{
    let mut g = Graph::replaying(stopped.to_vec());
    let out = f(store, &mut g)?;
    Ok(g.value(out).item())
}
