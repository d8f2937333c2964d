//! Central finite-difference verification of analytic gradients.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tol: f64,
    /// Caps the entries probed per parameter; `None` probes all of them.
    /// Capped probes use an even stride through the flat index range.
    pub max_entries: Option<usize>,
    /// Restricts the check to these parameter names.
    pub only: Option<Vec<String>>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tol: 1e-3,
            max_entries: None,
            only: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn flagged(&self) -> impl Iterator<Item = &ParamReport> {
        self.params.iter().filter(move |p| p.max_rel_error > self.tol)
    }

    pub fn passed(&self) -> bool {
        self.flagged().next().is_none()
    }

    pub fn entries_checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<F, E>(f: &mut F, store: &ParamStore, frozen: &[Tensor]) -> Result<f64, E>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut g = Graph::replaying(frozen.to_vec());
    let loss = f(&mut g, store)?;
    let value = g.value(loss);
    if !value.is_scalar() {
        return Err(TensorError::NotScalar(value.shape().to_vec()).into());
    }
    Ok(value.item())
}

fn probe_indices(len: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(cap) if cap < len => (0..cap).map(|i| i * len / cap).collect(),
        _ => (0..len).collect(),
    }
}

/// Compares analytic gradients of the scalar program `f` against central
/// differences for every parameter in `store`.
///
/// `f` is evaluated twice up front; differing results are a hard error.
/// Errors raised by `f` come back unchanged.
///
/// Detached values are held at the unperturbed point, so the reference
/// is the derivative the tape is meant to compute.
pub fn grad_check<F, E>(store: &ParamStore, cfg: &GradCheckConfig, mut f: F) -> Result<GradCheckReport, E>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut work = store.clone();
    let first = evaluate(&mut f, &work, &[])?;
    let second = evaluate(&mut f, &work, &[])?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::Nondeterministic(first, second).into());
    }

    work.zero_grad();
    let mut g = Graph::new();
    let loss = f(&mut g, &work)?;
    g.backward(loss, &mut work)?;
    let frozen = g.take_detached();
    let analytic: Vec<(String, Vec<f64>)> = work
        .iter()
        .map(|(name, p)| (name.to_string(), p.grad.data().to_vec()))
        .collect();

    let mut params = Vec::new();
    for (name, grad) in analytic {
        if let Some(only) = &cfg.only {
            if !only.contains(&name) {
                continue;
            }
        }
        let mut report = ParamReport {
            name: name.clone(),
            checked: 0,
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for idx in probe_indices(grad.len(), cfg.max_entries) {
            let original = work.value(&name)?.data()[idx];
            work.get_mut(&name)?.value.data_mut()[idx] = original + cfg.step;
            let plus = evaluate(&mut f, &work, &frozen)?;
            work.get_mut(&name)?.value.data_mut()[idx] = original - cfg.step;
            let minus = evaluate(&mut f, &work, &frozen)?;
            work.get_mut(&name)?.value.data_mut()[idx] = original;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let err = relative_error(grad[idx], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.checked == 1 {
                report.max_rel_error = err;
                report.worst_index = idx;
                report.analytic = grad[idx];
                report.numeric = numeric;
            }
        }
        params.push(report);
    }
    Ok(GradCheckReport { tol: cfg.tol, params })
}
