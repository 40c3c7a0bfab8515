//! Finite-difference verification of reverse-mode gradients.
//!
//! The checker rebuilds the graph from scratch for every probe, so the
//! function under test must be a pure closure from leaf values to a scalar
//! loss. Central differences with step 1e-5 against a relative-error
//! threshold of 1e-4 resolve every scale this codebase produces; coordinates
//! whose analytic and numeric gradients are both tiny are compared
//! absolutely to avoid dividing noise by noise.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Step size for central differences.
pub const FD_EPS: f64 = 1e-5;
/// Relative-error acceptance threshold.
pub const FD_TOL: f64 = 1e-4;
/// Resolution limit of the numeric oracle. Central differences on an O(1)
/// loss carry roundoff noise of about 1e-11, so a gradient must exceed
/// roughly 1e-7 before a 1e-4 relative comparison is meaningful; skipping
/// below 1e-6 leaves a 10x margin. Coordinates this small are compared by
/// the agreement of both estimates being tiny, not by their ratio.
const DEAD_ZONE: f64 = 1e-6;

/// Outcome of one gradient check: worst relative error seen and where.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < FD_TOL
    }
}

/// Check the gradient of `f` with respect to every input tensor.
///
/// `f` receives a fresh graph plus the leaf variables (in input order) and
/// returns the scalar loss variable. Inputs are cloned per probe, so `f`
/// must not capture mutable state.
pub fn grad_check_multi<F>(inputs: &[Tensor], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if inputs.is_empty() {
        return Err(Error::contract("grad_check", "no inputs"));
    }
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.detached())).collect();
        let loss = f(&mut g, &vars)?;
        if g.data(loss).len() != 1 {
            return Err(Error::contract("grad_check", "loss must be scalar"));
        }
        Ok(g.data(loss)[0])
    };

    // Analytic pass.
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            let mut c = t.detached();
            c.requires_grad = true;
            g.leaf(c)
        })
        .collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe: Vec<Tensor> = inputs.iter().map(|t| t.detached()).collect();
    for (ti, t) in inputs.iter().enumerate() {
        for ci in 0..t.len() {
            let orig = probe[ti].data()[ci];
            probe[ti].data_mut()[ci] = orig + FD_EPS;
            let up = eval(&probe)?;
            probe[ti].data_mut()[ci] = orig - FD_EPS;
            let down = eval(&probe)?;
            probe[ti].data_mut()[ci] = orig;
            let numeric = (up - down) / (2.0 * FD_EPS);
            let a = analytic[ti][ci];
            report.checked += 1;
            if a.abs() < DEAD_ZONE && numeric.abs() < DEAD_ZONE {
                continue;
            }
            let rel = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_input = ti;
                report.worst_coord = ci;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Convenience wrapper for a single input tensor.
pub fn grad_check<F>(input: &Tensor, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_multi(std::slice::from_ref(input), |g, vars| f(g, vars[0]))
}

/// Check a module forward against every parameter in `store` plus any
/// extra data inputs. The closure sees a `Bound` built from the probe
/// leaves, so it can call ordinary layer forwards. Probe leaves all require
/// gradient, frozen parameters included, so every derivative path through
/// the module gets verified.
pub fn grad_check_module<F>(
    store: &crate::params::ParamStore,
    extra: &[Tensor],
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &crate::params::Bound, &[Var]) -> Result<Var>,
{
    let names: Vec<String> = store.names().to_vec();
    let mut inputs: Vec<Tensor> = Vec::with_capacity(names.len() + extra.len());
    for name in &names {
        inputs.push(store.get(name)?.detached());
    }
    inputs.extend(extra.iter().map(|t| t.detached()));
    grad_check_multi(&inputs, |g, vars| {
        let bound = crate::params::Bound::from_pairs(
            names.iter().cloned().zip(vars[..names.len()].iter().copied()),
        );
        f(g, &bound, &vars[names.len()..])
    })
}
