//! Central finite-difference verification of reverse-mode gradients.

use std::fmt;

use crate::{Bound, Graph, ParamSet, TensorError, Var};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Check at most this many evenly spaced entries per tensor; `None` checks all.
    pub max_entries_per_param: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-3,
            max_entries_per_param: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Failure {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub failures: Vec<Failure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} entries checked, max relative error {:.3e}, {} failing",
            self.checked,
            self.max_rel_err,
            self.failures.len()
        )?;
        for x in &self.failures {
            writeln!(
                f,
                "  {}[{}]: analytic {:.6e} numeric {:.6e} (rel {:.3e})",
                x.param, x.index, x.analytic, x.numeric, x.rel_err
            )?;
        }
        Ok(())
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

fn selected(len: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < len => (0..m).map(|i| i * len / m).collect(),
        _ => (0..len).collect(),
    }
}

/// Compares the gradient of the scalar `f` w.r.t. every parameter against
/// `(f(θ + ε) − f(θ − ε)) / 2ε`, entry by entry. `f` may use any error type
/// that tensor errors convert into.
pub fn grad_check<F, E>(
    f: F,
    params: &ParamSet<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, E>
where
    F: for<'g> Fn(&'g Graph<f64>, &Bound<'g, f64>) -> Result<Var<'g, f64>, E>,
    E: From<TensorError>,
{
    let analytic = {
        let g = Graph::new();
        let bound = params.bind(&g);
        let loss = f(&g, &bound)?;
        g.backward(loss)?.into_params()
    };
    let eval = |p: &ParamSet<f64>| -> Result<f64, E> {
        let g = Graph::new();
        let bound = p.bind_frozen(&g);
        let loss = f(&g, &bound)?;
        g.check()?;
        Ok(loss.item())
    };

    let mut report = GradCheckReport::default();
    let mut work = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let len = params.get(&name).map_or(0, |t| t.len());
        for idx in selected(len, cfg.max_entries_per_param) {
            let orig = params.get(&name).expect("param").data()[idx];
            work.get_mut(&name).expect("param").data_mut()[idx] = orig + cfg.eps;
            let up = eval(&work)?;
            work.get_mut(&name).expect("param").data_mut()[idx] = orig - cfg.eps;
            let down = eval(&work)?;
            work.get_mut(&name).expect("param").data_mut()[idx] = orig;

            let numeric = (up - down) / (2.0 * cfg.eps);
            let a = analytic.get(&name).map_or(0.0, |t| t.data()[idx]);
            let rel = relative_error(a, numeric);
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(rel);
            if rel > cfg.tol {
                report.failures.push(Failure {
                    param: name.clone(),
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_err: rel,
                });
            }
        }
    }
    Ok(report)
}
