//! Central finite-difference gradient checking.

use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst entry.
    pub worst_values: (f64, f64),
    pub entries: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many evenly spaced entries per tensor.
    pub max_entries_per_tensor: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            max_entries_per_tensor: None,
        }
    }
}

/// `|a - n| / max(1e-6, |a| + |n|)`. The floor sits above the rounding noise
/// of a central difference (about `1e-16 · |f| / eps`), so structurally zero
/// gradients do not register as failures.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6)
}

fn eval_scalar<F>(f: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let t = g.value(out);
    if t.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check: function must return a scalar, got {:?}",
            t.shape()
        )));
    }
    let v = t.data()[0];
    if !v.is_finite() {
        return Err(Error::Numeric(
            "grad_check: function returned a non-finite value".into(),
        ));
    }
    Ok(v)
}

/// Compare backprop gradients of `f` wrt every parameter in `store` that
/// `f` binds against central differences.
pub fn grad_check_store<F>(store: &ParamStore, f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    if !g.value(loss).is_finite() {
        return Err(Error::Numeric(
            "grad_check: function returned a non-finite value".into(),
        ));
    }
    let analytic = g.backward(loss)?.named(&g);
    drop(g);

    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        entries: 0,
    };
    for (name, grad) in &analytic {
        let n = grad.numel();
        let step = match opts.max_entries_per_tensor {
            Some(cap) if cap > 0 && n > cap => n.div_ceil(cap),
            _ => 1,
        };
        for idx in (0..n).step_by(step) {
            let orig = work.get(name).expect("bound parameter exists").data()[idx];
            work.get_mut(name).unwrap().data_mut()[idx] = orig + opts.eps;
            let plus = eval_scalar(&f, &work)?;
            work.get_mut(name).unwrap().data_mut()[idx] = orig - opts.eps;
            let minus = eval_scalar(&f, &work)?;
            work.get_mut(name).unwrap().data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let err = relative_error(grad.data()[idx], numeric);
            report.entries += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), idx));
                report.worst_values = (grad.data()[idx], numeric);
            }
        }
    }
    Ok(report)
}

/// Check `f` wrt a plain list of tensors; returns the max relative error.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    for (i, t) in params.iter().enumerate() {
        store.insert(format!("p{i}"), t.clone())?;
    }
    let n = params.len();
    let wrapped = |g: &mut Graph, s: &ParamStore| {
        let vars = (0..n)
            .map(|i| g.param(s, &format!("p{i}")))
            .collect::<Result<Vec<_>>>()?;
        f(g, &vars)
    };
    let opts = GradCheckOptions {
        eps,
        max_entries_per_tensor: None,
    };
    Ok(grad_check_store(&store, wrapped, opts)?.max_rel_error)
}
