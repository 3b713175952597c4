//! Central-difference verification of analytic gradients.
//!
//! The program under test is run once in recording mode to capture its
//! discrete decisions, then re-run in replay mode for every finite-difference
//! probe. Pinning the decisions means the difference quotient measures the
//! same piecewise-smooth branch that the analytic backward differentiates.

use crate::error::{Error, Result};
use crate::graph::{DecisionLog, Graph, NodeId};
use crate::param::Param;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamStatus {
    Pass,
    Fail,
    /// Non-trainable; analytic gradient verified zero, no numeric probe.
    Frozen,
    /// Value feeds a hard ordering decision. The probes still verify the
    /// analytic gradient of the remaining smooth paths (the decision is pinned
    /// during replay); the flag records that the gradient treats the ordering
    /// itself as constant.
    GradientStopped,
}

#[derive(Debug, Clone)]
pub struct ParamReport {
    pub name: String,
    pub status: ParamStatus,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.status != ParamStatus::Fail)
    }

    /// Worst relative error over numerically compared parameters.
    pub fn max_rel_err(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| {
                matches!(
                    p.status,
                    ParamStatus::Pass | ParamStatus::Fail | ParamStatus::GradientStopped
                )
            })
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn stopped_names(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|p| p.status == ParamStatus::GradientStopped)
            .map(|p| p.name.as_str())
            .collect()
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / f64::max(1e-8, a.abs() + n.abs())
}

fn run_replay<F>(build: &mut F, log: &DecisionLog) -> Result<f64>
where
    F: FnMut(&mut Graph) -> Result<NodeId>,
{
    let mut g = Graph::replaying(log.clone());
    let loss = build(&mut g)?;
    Ok(g.value(loss).item())
}

/// Compare analytic gradients of a scalar program against central
/// differences, elementwise over every parameter. `build` must construct the
/// loss in the graph it is handed; it runs many times.
pub fn grad_check<F>(mut build: F, params: &[Param], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph) -> Result<NodeId>,
{
    grad_check_impl(&mut build, params, step, tol, None)
}

/// As `grad_check` but probing at most `limit` evenly strided elements per
/// parameter; analytic gradients are still computed in full.
pub fn grad_check_sampled<F>(
    mut build: F,
    params: &[Param],
    step: f64,
    tol: f64,
    limit: usize,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph) -> Result<NodeId>,
{
    grad_check_impl(&mut build, params, step, tol, Some(limit.max(1)))
}

fn grad_check_impl<F>(
    build: &mut F,
    params: &[Param],
    step: f64,
    tol: f64,
    limit: Option<usize>,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph) -> Result<NodeId>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument {
            op: "grad_check",
            reason: format!("step must be positive, got {}", step),
        });
    }
    for p in params {
        p.zero_grad();
    }

    // Recording pass: capture decisions and analytic gradients.
    let mut g = Graph::recording();
    let loss = build(&mut g)?;
    let value = g.value(loss).item();
    let log = g.decisions();
    let stopped = g.stopped_param_ids().clone();
    g.backward(loss)?;

    // Determinism probe: an independent recording pass must reproduce both
    // the loss bits and the decision log.
    let mut g2 = Graph::recording();
    let loss2 = build(&mut g2)?;
    if g2.value(loss2).item().to_bits() != value.to_bits() || g2.decisions() != log {
        return Err(Error::NonDeterministicProgram);
    }
    drop(g2);
    drop(g);

    let mut reports = Vec::with_capacity(params.len());
    for p in params {
        let name = p.name();
        if !p.trainable() {
            let gmax = p.grad().data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            reports.push(ParamReport {
                name,
                // A frozen cell accumulating gradient would be a bug.
                status: if gmax == 0.0 {
                    ParamStatus::Frozen
                } else {
                    ParamStatus::Fail
                },
                max_rel_err: gmax,
                worst_index: 0,
                analytic_at_worst: gmax,
                numeric_at_worst: 0.0,
                checked: 0,
            });
            continue;
        }
        let is_stopped = stopped.contains(&p.id());
        let analytic = p.grad();
        let n = analytic.numel();
        let stride = match limit {
            Some(l) if n > l => n.div_ceil(l),
            _ => 1,
        };
        let mut worst = ParamReport {
            name,
            status: ParamStatus::Pass,
            max_rel_err: 0.0,
            worst_index: 0,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
            checked: 0,
        };
        let mut i = 0;
        while i < n {
            let orig = p.value_at(i);
            p.set_value_at(i, orig + step);
            let plus = run_replay(build, &log)?;
            p.set_value_at(i, orig - step);
            let minus = run_replay(build, &log)?;
            p.set_value_at(i, orig);
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[i];
            let e = rel_err(a, numeric);
            if e > worst.max_rel_err {
                worst.max_rel_err = e;
                worst.worst_index = i;
                worst.analytic_at_worst = a;
                worst.numeric_at_worst = numeric;
            }
            worst.checked += 1;
            i += stride;
        }
        worst.status = if worst.max_rel_err > tol {
            ParamStatus::Fail
        } else if is_stopped {
            ParamStatus::GradientStopped
        } else {
            ParamStatus::Pass
        };
        reports.push(worst);
    }
    Ok(GradCheckReport {
        params: reports,
        tol,
    })
}
