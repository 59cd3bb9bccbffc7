//! Picard iteration for the linear evolution `f(t) = z0 + ∫_0^t Q f(s) ds`.
//!
//! Starting from the constant function `f_0 = z0`, the `n`-th iterate is the
//! truncated exponential series `sum_{k<=n} (t^k / k!) Q^k z0`. The solver
//! keeps the scaled powers `w_k = (T^k / k!) Q^k z0` so nothing overflows
//! before the factorial wins, and evaluates grid times with `s = t / T`.

use std::io::Write;
use std::sync::Arc;

use serde::Serialize;

use super::{BandedOperator, OVS_ORDER};
use crate::error::{invalid, Error, Result};
use crate::geometry::Configuration;
use crate::spaces::{weighted_l1, WeightedSeq};

/// Values of a sequence-valued function on a time grid.
#[derive(Debug, Clone)]
pub struct GridFunction {
    times: Vec<f64>,
    values: Vec<WeightedSeq>,
}

impl GridFunction {
    pub fn new(times: Vec<f64>, values: Vec<WeightedSeq>) -> Result<Self> {
        if times.is_empty() || times.len() != values.len() {
            return Err(invalid("grid function needs one value per time and at least one time"));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid("grid times must be strictly increasing"));
        }
        let config = values[0].config().clone();
        for v in &values[1..] {
            v.ensure_same_config(&config)?;
        }
        Ok(Self { times, values })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[WeightedSeq] {
        &self.values
    }

    pub fn at(&self, j: usize) -> &WeightedSeq {
        &self.values[j]
    }

    pub fn last(&self) -> &WeightedSeq {
        self.values.last().expect("grid function is never empty")
    }

    pub fn config(&self) -> &Arc<Configuration> {
        self.values[0].config()
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().expect("grid function is never empty")
    }

    /// `sup_j ||f(t_j)||_{l^1_a}`.
    pub fn sup_l1_norm(&self, a: f64) -> f64 {
        let config = self.config();
        self.values.iter().map(|v| weighted_l1(config, v.values(), a)).fold(0.0, f64::max)
    }

    /// CSV rows `t,site_index,value`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "site_index", "value"])?;
        for (t, v) in self.times.iter().zip(&self.values) {
            for (i, x) in v.values().iter().enumerate() {
                w.write_record([t.to_string(), i.to_string(), x.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// `t_j = j T / steps`, `j = 0..=steps`.
pub fn uniform_grid(horizon: f64, steps: usize) -> Result<Vec<f64>> {
    if !(horizon > 0.0 && horizon.is_finite()) || steps == 0 {
        return Err(invalid("uniform grid needs T > 0 and at least one step"));
    }
    Ok((0..=steps).map(|j| horizon * j as f64 / steps as f64).collect())
}

fn scaled_powers(q: &BandedOperator, z0: &[f64], horizon: f64, n: usize) -> Vec<Vec<f64>> {
    let mut powers = Vec::with_capacity(n + 1);
    powers.push(z0.to_vec());
    for k in 0..n {
        let mut next = vec![0.0; z0.len()];
        q.apply_into(&powers[k], &mut next);
        let scale = horizon / (k + 1) as f64;
        next.iter_mut().for_each(|v| *v *= scale);
        powers.push(next);
    }
    powers
}

/// `n`-th Picard iterate of the constant function `z0`, on `steps + 1` uniform grid times.
pub fn picard_iterate(
    q: &BandedOperator,
    z0: &WeightedSeq,
    horizon: f64,
    n: usize,
    steps: usize,
) -> Result<GridFunction> {
    z0.ensure_same_config(q.config())?;
    let times = uniform_grid(horizon, steps)?;
    let powers = scaled_powers(q, z0.values(), horizon, n);
    let values = times
        .iter()
        .map(|&t| {
            let s = t / horizon;
            let mut acc = powers[n].clone();
            for w in powers[..n].iter().rev() {
                for (a, wk) in acc.iter_mut().zip(w) {
                    *a = wk + s * *a;
                }
            }
            WeightedSeq::new(q.config().clone(), acc)
        })
        .collect::<Result<Vec<_>>>()?;
    GridFunction::new(times, values)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvolutionOptions {
    /// Lower end of the weight interval; the iterate cap is computed with `alpha = a_low`.
    pub a_low: f64,
    /// Weight `beta` of the norm used for the stopping rule.
    pub report_weight: f64,
    /// Number of uniform grid steps over `[0, T]`.
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct LinearEvolution {
    pub solution: GridFunction,
    /// Number of Picard applications; the solution is `I^iterations(z0)`.
    pub iterations: usize,
    /// `sup_t ||I^{k+1} - I^k||_{l^1_beta}` for `k = 0..iterations`.
    pub increments: Vec<f64>,
    pub iteration_cap: usize,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct IterationCap {
    pub ovs_constant: f64,
    pub cap: usize,
}

/// Hard cap `10 (e L T / (beta - a_low)^{1/2} + 10)`, clamped to `[100, 10^6]`.
fn iteration_cap(q: &BandedOperator, horizon: f64, opts: &EvolutionOptions) -> Result<usize> {
    if q.config().is_empty() {
        return Ok(100);
    }
    let l = q.ovs_constant(opts.a_low)?;
    let gap = opts.report_weight - opts.a_low;
    let raw =
        if gap > 0.0 { 10.0 * (std::f64::consts::E * l * horizon / gap.powf(OVS_ORDER) + 10.0) } else { f64::INFINITY };
    Ok(raw.clamp(100.0, 1.0e6) as usize)
}

/// Iterates until the `l^1_beta` increment over the grid drops below `tol`.
pub fn solve_linear_evolution(
    q: &BandedOperator,
    z0: &WeightedSeq,
    horizon: f64,
    tol: f64,
    opts: &EvolutionOptions,
) -> Result<LinearEvolution> {
    z0.ensure_same_config(q.config())?;
    if !(tol > 0.0) {
        return Err(invalid(format!("tol must be > 0, got {tol}")));
    }
    if !(opts.report_weight >= opts.a_low && opts.a_low > 0.0) {
        return Err(invalid("report weight must be >= a_low > 0"));
    }
    let times = uniform_grid(horizon, opts.steps)?;
    let config = q.config().clone();
    let beta = opts.report_weight;
    let cap = iteration_cap(q, horizon, opts)?;

    let n = config.len();
    let fractions: Vec<f64> = times.iter().map(|t| t / horizon).collect();
    let mut coeff = vec![1.0; times.len()];
    let mut acc: Vec<Vec<f64>> = vec![z0.values().to_vec(); times.len()];
    let mut w = z0.values().to_vec();
    let mut next = vec![0.0; n];
    let mut increments = Vec::new();

    let mut k = 0usize;
    loop {
        q.apply_into(&w, &mut next);
        let scale = horizon / (k + 1) as f64;
        next.iter_mut().for_each(|v| *v *= scale);
        std::mem::swap(&mut w, &mut next);

        for ((a, c), s) in acc.iter_mut().zip(coeff.iter_mut()).zip(&fractions) {
            *c *= s;
            if *c != 0.0 {
                a.iter_mut().zip(&w).for_each(|(ai, wi)| *ai += *c * wi);
            }
        }
        // increment is largest at t = T, where the coefficient is 1
        let inc = weighted_l1(&config, &w, beta);
        increments.push(inc);
        k += 1;
        if !inc.is_finite() {
            return Err(Error::NonConvergence { iterations: k, increment: inc });
        }
        if inc < tol {
            break;
        }
        if k >= cap {
            return Err(Error::NonConvergence { iterations: k, increment: inc });
        }
    }

    let values = acc.into_iter().map(|v| WeightedSeq::new(config.clone(), v)).collect::<Result<Vec<_>>>()?;
    Ok(LinearEvolution { solution: GridFunction::new(times, values)?, iterations: k, increments, iteration_cap: cap })
}
