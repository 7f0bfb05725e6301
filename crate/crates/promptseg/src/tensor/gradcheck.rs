//! Finite-difference verification of the backward pass.
//!
//! The analytic gradient is computed in the store's own element type; the
//! numeric side always runs central differences in f64 on a widened copy of
//! the parameters, so the reference is accurate even when checking an f32
//! model. Relative error uses a per-dtype floor in the denominator so that
//! near-zero gradients are compared at a sensible absolute scale.

use rand::seq::SliceRandom;

use super::elem::Elem;
use super::graph::{Graph, Tensor};
use super::param::ParamStore;
use crate::error::{Error, Result};
use crate::rng;

/// Anything whose scalar loss can be evaluated at any precision. The
/// evaluation must be a pure function of the parameters.
pub trait GradTarget {
    fn loss<E: Elem>(&self, g: &Graph<E>, params: &ParamStore<E>) -> Result<Tensor<E>>;
}

#[derive(Debug, Clone)]
pub struct GradCheckOpts {
    /// Base step; the actual step per probe is `eps * max(1, |x|)`.
    pub eps: f64,
    /// How many elements to probe per parameter (all, if fewer).
    pub probes_per_param: usize,
    /// Seed for probe selection.
    pub seed: u64,
    /// Denominator floor for relative error.
    pub rel_floor: f64,
}

impl GradCheckOpts {
    /// Defaults tuned for the element type being checked.
    pub fn for_dtype(dtype: &str) -> Self {
        let rel_floor = if dtype == "f64" { 1e-4 } else { 5e-2 };
        GradCheckOpts { eps: 1e-5, probes_per_param: 16, seed: 0, rel_floor }
    }
}

#[derive(Debug, Clone)]
pub struct ParamError {
    pub name: String,
    pub max_rel: f64,
    pub max_abs: f64,
    pub probes: usize,
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub dtype: &'static str,
    pub max_rel_error: f64,
    pub total_probes: usize,
    pub per_param: Vec<ParamError>,
}

impl GradReport {
    /// Name of the parameter with the worst relative error.
    pub fn worst(&self) -> Option<&ParamError> {
        self.per_param.iter().max_by(|a, b| a.max_rel.total_cmp(&b.max_rel))
    }
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "grad check [{}]: max relative error {:.3e} over {} probes",
            self.dtype, self.max_rel_error, self.total_probes
        )?;
        let mut by_err: Vec<&ParamError> = self.per_param.iter().collect();
        by_err.sort_by(|a, b| b.max_rel.total_cmp(&a.max_rel));
        for p in by_err.iter().take(5) {
            writeln!(f, "  {:<40} rel {:.3e}  abs {:.3e}  ({} probes)", p.name, p.max_rel, p.max_abs, p.probes)?;
        }
        Ok(())
    }
}

/// Compare analytic gradients against central finite differences.
pub fn grad_check<E: Elem>(target: &impl GradTarget, params: &ParamStore<E>, opts: &GradCheckOpts) -> Result<GradReport> {
    // Analytic side, in E.
    let g = Graph::<E>::new();
    let loss = target.loss(&g, params)?;
    if loss.numel() != 1 {
        return Err(Error::shape("grad_check", format!("loss must be scalar, got {:?}", loss.shape())));
    }
    g.backward(&loss)?;

    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    for p in params.iter() {
        if !p.trainable {
            continue;
        }
        let grad = match g.lifted_grad(&p.name) {
            Some(v) => v.iter().map(|&x| x.to_f64()).collect(),
            // Parameter never touched the loss; its gradient is zero.
            None => vec![0.0; p.numel()],
        };
        analytic.push((p.name.clone(), grad));
    }
    drop(g);

    // Numeric side, always in f64.
    let mut p64 = params.cast::<f64>();
    let mut per_param = Vec::with_capacity(analytic.len());
    let mut max_rel = 0.0f64;
    let mut total_probes = 0usize;

    for (name, agrad) in &analytic {
        let n = agrad.len();
        let mut idx: Vec<usize> = (0..n).collect();
        if n > opts.probes_per_param {
            let mut r = rng::stream(opts.seed, &format!("gradcheck/{name}"));
            idx.shuffle(&mut r);
            idx.truncate(opts.probes_per_param);
            idx.sort_unstable();
        }
        let mut p_max_rel = 0.0f64;
        let mut p_max_abs = 0.0f64;
        for &i in &idx {
            let x0 = p64.get(name)?.data[i];
            let eps = opts.eps * x0.abs().max(1.0);
            p64.data_mut(name)?[i] = x0 + eps;
            let lp = eval_f64(target, &p64)?;
            p64.data_mut(name)?[i] = x0 - eps;
            let lm = eval_f64(target, &p64)?;
            p64.data_mut(name)?[i] = x0;
            let numeric = (lp - lm) / (2.0 * eps);
            let a = agrad[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(opts.rel_floor);
            p_max_abs = p_max_abs.max(abs);
            p_max_rel = p_max_rel.max(rel);
        }
        total_probes += idx.len();
        max_rel = max_rel.max(p_max_rel);
        per_param.push(ParamError { name: name.clone(), max_rel: p_max_rel, max_abs: p_max_abs, probes: idx.len() });
    }

    Ok(GradReport { dtype: E::DTYPE, max_rel_error: max_rel, total_probes, per_param })
}

fn eval_f64(target: &impl GradTarget, params: &ParamStore<f64>) -> Result<f64> {
    let g = Graph::<f64>::new();
    let loss = target.loss(&g, params)?;
    if loss.numel() != 1 {
        return Err(Error::shape("grad_check", format!("loss must be scalar, got {:?}", loss.shape())));
    }
    let v = loss.item();
    if !v.is_finite() {
        return Err(Error::NonFinite { context: "grad_check".to_string(), detail: format!("f64 loss = {v}") });
    }
    Ok(v)
}
