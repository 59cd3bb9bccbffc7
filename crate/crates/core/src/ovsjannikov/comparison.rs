//! Sub-solution comparison for `f(t) = z0 + ∫_0^t Q f(s) ds` with `Q >= 0`.

use serde::Serialize;

use super::picard::{solve_linear_evolution, EvolutionOptions, GridFunction};
use super::BandedOperator;
use crate::error::{invalid, Result};
use crate::spaces::WeightedSeq;

/// Slack on both the hypothesis and the conclusion inequality.
pub const COMPARISON_SLACK: f64 = 1e-9;

/// Tolerance for the reference solution.
const SOLVE_TOL: f64 = 1e-12;

/// A small weight keeps the stopping rule close to the plain `l^1` norm.
const SOLVE_WEIGHT: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ComparisonOutcome {
    /// `g` is not a sub-solution at this node; the conclusion was not checked.
    HypothesisViolated { site: usize, time_index: usize, excess: f64 },
    /// `worst_margin = min_{x,j} (f_x(t_j) - g_x(t_j))`.
    Verified { ok: bool, worst_margin: f64, worst_site: usize, worst_time_index: usize },
}

impl ComparisonOutcome {
    pub fn ok(&self) -> bool {
        matches!(self, ComparisonOutcome::Verified { ok: true, .. })
    }

    pub fn hypothesis_holds(&self) -> bool {
        matches!(self, ComparisonOutcome::Verified { .. })
    }
}

fn check_uniform_grid(times: &[f64]) -> Result<usize> {
    let steps = times.len() - 1;
    if steps == 0 || times[0] != 0.0 {
        return Err(invalid("comparison grid must start at 0 and have at least one step"));
    }
    let horizon = times[steps];
    for (j, t) in times.iter().enumerate() {
        if (t - horizon * j as f64 / steps as f64).abs() > 1e-12 * horizon {
            return Err(invalid("comparison grid must be uniform"));
        }
    }
    Ok(steps)
}

/// Checks `g_x(t) <= z0_x + [∫_0^t Q g]_x` by the trapezoid rule on the grid of
/// `g`, then compares `g` against the solution `f` at every node.
pub fn comparison_check(q: &BandedOperator, z0: &WeightedSeq, g: &GridFunction) -> Result<ComparisonOutcome> {
    if !q.is_nonnegative() {
        return Err(invalid("comparison needs a nonnegative operator"));
    }
    if z0.values().iter().any(|v| *v < 0.0) {
        return Err(invalid("comparison needs nonnegative initial data"));
    }
    z0.ensure_same_config(q.config())?;
    g.last().ensure_same_config(q.config())?;
    let steps = check_uniform_grid(g.times())?;
    let n = z0.len();

    let mut integral = vec![0.0; n];
    let mut prev_qg = vec![0.0; n];
    let mut cur_qg = vec![0.0; n];
    q.apply_into(g.at(0).values(), &mut prev_qg);
    let mut worst: Option<(f64, usize, usize)> = None;
    for (j, gj) in g.values().iter().enumerate() {
        if j > 0 {
            q.apply_into(gj.values(), &mut cur_qg);
            let h = g.times()[j] - g.times()[j - 1];
            for ((i, a), b) in integral.iter_mut().zip(&prev_qg).zip(&cur_qg) {
                *i += 0.5 * h * (a + b);
            }
            std::mem::swap(&mut prev_qg, &mut cur_qg);
        }
        for (x, ((gv, z), i)) in gj.values().iter().zip(z0.values()).zip(&integral).enumerate() {
            let excess = gv - z - i;
            if worst.is_none_or(|(e, _, _)| excess > e) {
                worst = Some((excess, x, j));
            }
        }
    }
    if let Some((excess, site, time_index)) = worst {
        if excess > COMPARISON_SLACK {
            return Ok(ComparisonOutcome::HypothesisViolated { site, time_index, excess });
        }
    }

    let opts = EvolutionOptions { a_low: SOLVE_WEIGHT, report_weight: SOLVE_WEIGHT, steps };
    let f = solve_linear_evolution(q, z0, g.horizon(), SOLVE_TOL, &opts)?.solution;
    let mut margin = (f64::INFINITY, 0, 0);
    for (j, (fj, gj)) in f.values().iter().zip(g.values()).enumerate() {
        for (x, (fv, gv)) in fj.values().iter().zip(gj.values()).enumerate() {
            if fv - gv < margin.0 {
                margin = (fv - gv, x, j);
            }
        }
    }
    Ok(ComparisonOutcome::Verified {
        ok: margin.0 >= -COMPARISON_SLACK,
        worst_margin: margin.0,
        worst_site: margin.1,
        worst_time_index: margin.2,
    })
}
