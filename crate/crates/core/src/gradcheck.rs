//! Central finite-difference verification of tape gradients.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// A probe passes when either the relative or the absolute error is within bounds.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tolerance {
    pub rel: f64,
    pub abs: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self { rel: 1e-3, abs: 1e-6 }
    }
}

impl Tolerance {
    /// Returns `(relative error, absolute error, within tolerance)`.
    pub fn compare(&self, analytic: f64, numeric: f64) -> (f64, f64, bool) {
        let abs_err = libm::fabs(analytic - numeric);
        let scale = libm::fabs(analytic).max(libm::fabs(numeric));
        let rel_err = if scale > 0.0 { abs_err / scale } else { 0.0 };
        let ok = abs_err <= self.abs || rel_err <= self.rel;
        (rel_err, abs_err, ok)
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub probes: usize,
    /// Probes rejected because the perturbation changed a discrete decision.
    pub skipped: usize,
    pub failures: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GradReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.failures == 0)
    }

    pub fn total_probes(&self) -> usize {
        self.tensors.iter().map(|t| t.probes).sum()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }
}

/// Compare analytic gradients against central differences.
///
/// `eval` maps parameter values to `(loss, decisions)`. `decisions` captures
/// every discrete choice the forward pass made (top-k sets, masks); a probe
/// whose `+step` or `-step` evaluation changes them sits on a kink and is
/// counted as skipped rather than compared. `coords[i]` lists the flat
/// coordinates to probe in tensor `i`.
pub fn finite_diff_check<S, F>(
    names: &[String],
    params: &mut [Tensor],
    analytic: &[Vec<f64>],
    coords: &[Vec<usize>],
    step: f64,
    tol: Tolerance,
    mut eval: F,
) -> Result<GradReport>
where
    S: PartialEq,
    F: FnMut(&[Tensor]) -> Result<(f64, S)>,
{
    let (_, base) = eval(params)?;
    let mut report = GradReport::default();
    for (ti, probe_coords) in coords.iter().enumerate() {
        let mut check = TensorCheck {
            name: names.get(ti).cloned().unwrap_or_else(|| format!("param{ti}")),
            probes: 0,
            skipped: 0,
            failures: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        };
        for &c in probe_coords {
            let orig = params[ti].data()[c];
            params[ti].data_mut()[c] = orig + step;
            let (plus, s_plus) = eval(params)?;
            params[ti].data_mut()[c] = orig - step;
            let (minus, s_minus) = eval(params)?;
            params[ti].data_mut()[c] = orig;
            if s_plus != base || s_minus != base {
                check.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * step);
            let (rel, abs, ok) = tol.compare(analytic[ti][c], numeric);
            check.probes += 1;
            if !ok {
                check.failures += 1;
            }
            // Relative error is only meaningful where the absolute bound did not already pass.
            if abs > tol.abs {
                check.max_rel_error = check.max_rel_error.max(rel);
            }
            check.max_abs_error = check.max_abs_error.max(abs);
        }
        report.tensors.push(check);
    }
    Ok(report)
}

/// Check a scalar function built on a fresh [`Graph`] over every coordinate
/// of every input tensor.
pub fn check_graph_fn<F>(params: &[Tensor], build: F, step: f64, tol: Tolerance) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let run = |values: &[Tensor], with_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        let value = g.value(loss).data()[0];
        let mut grads = Vec::new();
        if with_grad {
            g.backward(loss)?;
            for (v, t) in vars.iter().zip(values) {
                grads.push(g.grad(*v).map_or_else(|| alloc::vec![0.0; t.len()], <[f64]>::to_vec));
            }
        }
        Ok((value, grads))
    };
    let (_, analytic) = run(params, true)?;
    let names: Vec<String> = (0..params.len()).map(|i| format!("input{i}")).collect();
    let coords: Vec<Vec<usize>> = params.iter().map(|t| (0..t.len()).collect()).collect();
    let mut values = params.to_vec();
    finite_diff_check(&names, &mut values, &analytic, &coords, step, tol, |p| run(p, false).map(|(v, _)| (v, ())))
}
