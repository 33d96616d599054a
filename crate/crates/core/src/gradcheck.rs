//! Central finite-difference gradient checks.
//!
//! The error of one tensor is `|a - n| / max(|a|, |n|, floor)` over the
//! checked entries, `a` analytic and `n` numerical, with Euclidean norms.
//! A tensor whose two gradients both sit below the roundoff level of the
//! difference quotient is reported as a zero gradient and passes; the
//! relative error of two noise vectors carries no information.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::nn::ParamStore;
use std::collections::BTreeMap;

pub const DEFAULT_EPS: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
const NORM_FLOOR: f64 = 1e-8;
/// Safety factor on the per-entry roundoff `EPSILON * |f| / eps`.
const ROUNDOFF_FACTOR: f64 = 100.0;

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub analytic_norm: f64,
    pub numerical_norm: f64,
    pub rel_error: f64,
    /// Both norms are below the roundoff bound of the quotient.
    pub zero_gradient: bool,
}

impl TensorCheck {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.zero_gradient || self.rel_error < tolerance
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradcheckReport {
    /// Largest relative error over tensors with a nonzero gradient.
    pub fn max_rel_error(&self) -> f64 {
        self.judged().map(|t| t.rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.judged().next().is_some() && self.tensors.iter().all(|t| t.passed(tolerance))
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.judged().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn zero_gradients(&self) -> impl Iterator<Item = &TensorCheck> {
        self.tensors.iter().filter(|t| t.zero_gradient)
    }

    fn judged(&self) -> impl Iterator<Item = &TensorCheck> {
        self.tensors.iter().filter(|t| !t.zero_gradient)
    }
}

/// Compare the gradients of the scalar built by `build` against central
/// differences for every parameter in `store`. At most `per_tensor` evenly
/// spaced entries of each tensor are perturbed. `build` must be a pure
/// function of the store.
pub fn check<F>(store: &ParamStore, train: bool, eps: f64, per_tensor: usize, build: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(train);
        let root = build(&mut g, s)?;
        Ok(g.value(root).data()[0])
    };
    let (f0, analytic): (f64, BTreeMap<String, crate::tensor::Tensor>) = {
        let mut g = Graph::new(train);
        let root = build(&mut g, store)?;
        (g.value(root).data()[0], g.backward(root).into_params())
    };
    let entry_noise = ROUNDOFF_FACTOR * f64::EPSILON * f0.abs().max(1.0) / eps;
    let mut work = store.clone();
    let mut tensors = Vec::new();
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let len = store.get(&name).expect("listed").len();
        let picks = sample_indices(len, per_tensor);
        let a_full = analytic.get(&name);
        let (mut diff2, mut a2, mut n2) = (0.0f64, 0.0f64, 0.0f64);
        for &i in &picks {
            let orig = store.get(&name).expect("listed").data()[i];
            work.get_mut(&name).expect("listed").data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work.get_mut(&name).expect("listed").data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work.get_mut(&name).expect("listed").data_mut()[i] = orig;
            let num = (up - down) / (2.0 * eps);
            let a = a_full.map_or(0.0, |t| t.data()[i]);
            diff2 += (a - num) * (a - num);
            a2 += a * a;
            n2 += num * num;
        }
        let (an, nn) = (a2.sqrt(), n2.sqrt());
        let bound = entry_noise * (picks.len() as f64).sqrt();
        tensors.push(TensorCheck {
            name,
            checked: picks.len(),
            analytic_norm: an,
            numerical_norm: nn,
            rel_error: diff2.sqrt() / an.max(nn).max(NORM_FLOOR),
            zero_gradient: an <= bound && nn <= bound,
        });
    }
    Ok(GradcheckReport { tensors })
}

fn sample_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    (0..max).map(|k| k * len / max).collect()
}
