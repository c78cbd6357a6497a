//! Central finite-difference gradient checking.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numeric::graph::{reverse_mode_gradients, Graph, Var};
use crate::numeric::optim::ParamSet;
use crate::numeric::scalar::{c as sc, Scalar};

/// Worst disagreement for one parameter.
#[derive(Debug, Clone)]
pub struct FdEntry {
    pub max_rel_err: f64,
    pub worst_flat: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

/// Outcome of a finite-difference sweep over all trainable parameters.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub per_param: BTreeMap<String, FdEntry>,
    pub max_rel_err: f64,
    pub h: f64,
    pub tol: f64,
    pub pass: bool,
}

impl FdReport {
    pub fn summary(&self) -> String {
        format!(
            "fd check: max rel err {:.3e} (h = {:.1e}, tol = {:.1e}) -> {}",
            self.max_rel_err,
            self.h,
            self.tol,
            if self.pass { "pass" } else { "FAIL" }
        )
    }
}

/// Compares analytic gradients of a scalar loss against central finite
/// differences, entry by entry, over every trainable parameter.
///
/// `build` must deterministically construct the loss graph from a parameter
/// set; it is re-invoked at each perturbed point. Relative error is
/// `|a − f| / max(|a|, |f|, 1e-8)`.
pub fn finite_difference_check<T, F>(
    build: F,
    params: &ParamSet<T>,
    h: f64,
    tol: f64,
) -> Result<FdReport>
where
    T: Scalar,
    F: Fn(&ParamSet<T>) -> Result<(Graph<T>, Var)>,
{
    if h <= 0.0 || tol <= 0.0 {
        return Err(Error::invalid(format!("fd check: h and tol must be positive, got {h}, {tol}")));
    }
    let (graph, root) = build(params)?;
    if graph.value(root).len() != 1 {
        return Err(Error::shape("fd check: loss must be scalar".to_string()));
    }
    let analytic = reverse_mode_gradients(&graph, root, params)?;

    let eval = |p: &ParamSet<T>| -> Result<f64> {
        let (g, r) = build(p)?;
        let v = g.scalar_value(r)?.to_f64().unwrap();
        if !v.is_finite() {
            return Err(Error::non_finite("loss at perturbed point".to_string()));
        }
        Ok(v)
    };

    let delta = sc::<T>(h);
    let mut per_param = BTreeMap::new();
    let mut overall: f64 = 0.0;
    for name in params.trainable_names() {
        let tensor = params.tensor(&name)?;
        let a = &analytic[&name];
        let mut entry = FdEntry {
            max_rel_err: 0.0,
            worst_flat: 0,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
        };
        for flat in 0..tensor.len() {
            let mut plus = params.clone();
            plus.set_tensor(&name, tensor.nudged(flat, delta)?)?;
            let mut minus = params.clone();
            minus.set_tensor(&name, tensor.nudged(flat, -delta)?)?;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let an = a.data()[flat].to_f64().unwrap();
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
            if rel >= entry.max_rel_err {
                entry.max_rel_err = rel;
                entry.worst_flat = flat;
                entry.analytic_at_worst = an;
                entry.numeric_at_worst = fd;
            }
            overall = overall.max(rel);
        }
        per_param.insert(name, entry);
    }
    Ok(FdReport {
        per_param,
        max_rel_err: overall,
        h,
        tol,
        pass: overall < tol,
    })
}
