//! Central finite-difference checks against reverse-mode gradients.

use serde::Serialize;

use super::graph::{Graph, Var};
use super::tensor::ParamSet;
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Pass threshold on the per-parameter relative error.
    pub tolerance: f64,
    /// Check at most this many entries per parameter (evenly strided).
    pub max_entries: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_entries: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub analytic_norm: f64,
    pub rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn worst(&self) -> f64 {
        self.params.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }
}

/// Relative error between two gradient vectors:
/// `|a - n| / max(|a|, |n|, 1e-8)` in the Euclidean norm.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-8)
}

/// Checks every trainable entry of `params` for the scalar built by `loss`.
pub fn check_gradients<F>(params: &ParamSet, opts: GradCheckOptions, loss: F) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &ParamSet) -> Result<Var<'g>>,
{
    let mut work = params.clone();
    work.zero_grad();
    {
        let g = Graph::new();
        let l = loss(&g, &work)?;
        g.backward_into(l, &mut work, 1.0)?;
    }
    let eval = |ps: &ParamSet| -> Result<f64> {
        let g = Graph::new();
        loss(&g, ps)?.item()
    };
    let names: Vec<String> = work
        .iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(n, _)| n.clone())
        .collect();
    let mut report = Vec::new();
    for name in names {
        let analytic_full = work.get(&name)?.grad().unwrap_or(&[]).to_vec();
        let n = analytic_full.len();
        let stride = match opts.max_entries {
            Some(m) if m > 0 && m < n => n.div_ceil(m),
            _ => 1,
        };
        let idx: Vec<usize> = (0..n).step_by(stride).collect();
        let mut numeric = Vec::with_capacity(idx.len());
        let mut analytic = Vec::with_capacity(idx.len());
        let mut probe = params.clone();
        for &i in &idx {
            let orig = probe.get(&name)?.data()[i];
            probe.get_mut(&name)?.data_mut()[i] = orig + opts.step;
            let up = eval(&probe)?;
            probe.get_mut(&name)?.data_mut()[i] = orig - opts.step;
            let down = eval(&probe)?;
            probe.get_mut(&name)?.data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * opts.step));
            analytic.push(analytic_full[i]);
        }
        let rel = relative_error(&analytic, &numeric);
        report.push(ParamCheck {
            name,
            checked: idx.len(),
            analytic_norm: analytic.iter().map(|x| x * x).sum::<f64>().sqrt(),
            rel_error: rel,
            passed: rel <= opts.tolerance,
        });
    }
    Ok(GradCheckReport { params: report })
}
