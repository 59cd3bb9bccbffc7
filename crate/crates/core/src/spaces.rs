//! Weighted sequence spaces `l^p_a` over a configuration.
//!
//! The norm is `(sum_x e^{-a|x|} |z_x|^p)^{1/p}` with `|x|` Euclidean.
//! Increasing the weight `a` can only decrease the norm, which is the scale
//! structure every bound in this crate relies on.

use std::io::{Read, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{estimate_growth_constant, Configuration};
use crate::numeric::{compensated_sum, CompensatedSum};

/// Absolute slack for norm comparisons.
pub const NORM_SLACK: f64 = 1e-12;

/// Real values indexed by the sites of a configuration.
#[derive(Debug, Clone)]
pub struct WeightedSeq {
    config: Arc<Configuration>,
    values: Vec<f64>,
}

impl WeightedSeq {
    pub fn new(config: Arc<Configuration>, values: Vec<f64>) -> Result<Self> {
        if values.len() != config.len() {
            return Err(invalid(format!("{} values for a configuration of {} sites", values.len(), config.len())));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite entry {v}")));
        }
        Ok(Self { config, values })
    }

    pub fn zeros(config: Arc<Configuration>) -> Self {
        let n = config.len();
        Self { config, values: vec![0.0; n] }
    }

    pub fn from_fn(config: Arc<Configuration>, mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let values = (0..config.len()).map(&mut f).collect();
        Self::new(config, values)
    }

    pub fn config(&self) -> &Arc<Configuration> {
        &self.config
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { config: self.config.clone(), values: self.values.iter().map(|v| c * v).collect() }
    }

    pub fn try_add(&self, other: &Self) -> Result<Self> {
        self.ensure_same_config(other.config())?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect();
        Ok(Self { config: self.config.clone(), values })
    }

    pub(crate) fn ensure_same_config(&self, other: &Arc<Configuration>) -> Result<()> {
        same_config(&self.config, other)
    }

    /// CSV with header `site_index,value`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["site_index", "value"])?;
        for (i, v) in self.values.iter().enumerate() {
            w.write_record([i.to_string(), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(config: Arc<Configuration>, reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let mut values = vec![None; config.len()];
        for rec in r.records() {
            let rec = rec?;
            let idx: usize = rec.get(0).unwrap_or("").parse().map_err(|e| Error::Parse(format!("site_index: {e}")))?;
            let v: f64 = rec.get(1).unwrap_or("").parse().map_err(|e| Error::Parse(format!("value: {e}")))?;
            let slot = values.get_mut(idx).ok_or_else(|| Error::Parse(format!("site index {idx} out of range")))?;
            *slot = Some(v);
        }
        let values = values
            .into_iter()
            .enumerate()
            .map(|(i, v)| v.ok_or_else(|| Error::Parse(format!("missing site {i}"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(config, values)
    }
}

pub(crate) fn same_config(a: &Arc<Configuration>, b: &Arc<Configuration>) -> Result<()> {
    if Arc::ptr_eq(a, b) || **a == **b {
        Ok(())
    } else {
        Err(Error::ConfigurationMismatch)
    }
}

/// Weight interval `[a_low, a_high]`, moment order and horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleParams {
    pub a_low: f64,
    pub a_high: f64,
    pub p: f64,
    pub horizon: f64,
}

impl ScaleParams {
    pub fn new(a_low: f64, a_high: f64, p: f64, horizon: f64) -> Result<Self> {
        let s = Self { a_low, a_high, p, horizon };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a_low > 0.0 && self.a_low <= self.a_high && self.a_high.is_finite()) {
            return Err(invalid(format!("need 0 < a_low <= a_high, got [{}, {}]", self.a_low, self.a_high)));
        }
        if !(self.p >= 1.0 && self.p.is_finite()) {
            return Err(invalid(format!("need p >= 1, got {}", self.p)));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(invalid(format!("need T > 0, got {}", self.horizon)));
        }
        Ok(())
    }

    pub fn contains(&self, a: f64) -> bool {
        a >= self.a_low && a <= self.a_high
    }
}

fn check_weight_and_order(a: f64, p: f64) -> Result<()> {
    if !(a > 0.0 && a.is_finite()) {
        return Err(invalid(format!("weight must be > 0, got {a}")));
    }
    if !(p >= 1.0 && p.is_finite()) {
        return Err(invalid(format!("order must be >= 1, got {p}")));
    }
    Ok(())
}

/// Weighted sum `sum_x e^{-a|x|} |v_x|^p` over raw values (no root taken).
pub(crate) fn weighted_power_sum(config: &Configuration, values: &[f64], a: f64, p: f64) -> f64 {
    let mut acc = CompensatedSum::new();
    for (v, r) in values.iter().zip(config.radii()) {
        if *v != 0.0 {
            let m = if p == 1.0 { v.abs() } else { v.abs().powf(p) };
            acc.add((-a * r).exp() * m);
        }
    }
    acc.value()
}

/// `l^1_a` norm over raw values.
pub(crate) fn weighted_l1(config: &Configuration, values: &[f64], a: f64) -> f64 {
    weighted_power_sum(config, values, a, 1.0)
}

/// `(sum_x e^{-a|x|} |z_x|^p)^{1/p}`.
pub fn lp_norm(z: &WeightedSeq, a: f64, p: f64) -> Result<f64> {
    check_weight_and_order(a, p)?;
    let s = weighted_power_sum(z.config(), z.values(), a, p);
    Ok(if p == 1.0 { s } else { s.powf(1.0 / p) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScaleCheck {
    pub norm_alpha: f64,
    pub norm_beta: f64,
    pub ok: bool,
}

/// Checks `||z||_beta <= ||z||_alpha` for `alpha < beta`.
pub fn verify_scale_monotonicity(z: &WeightedSeq, alpha: f64, beta: f64, p: f64) -> Result<ScaleCheck> {
    if alpha >= beta {
        return Err(invalid(format!("need alpha < beta, got {alpha} >= {beta}")));
    }
    let norm_alpha = lp_norm(z, alpha, p)?;
    let norm_beta = lp_norm(z, beta, p)?;
    Ok(ScaleCheck { norm_alpha, norm_beta, ok: norm_beta <= norm_alpha + NORM_SLACK })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SummabilityReport {
    /// `sum_x e^{-a|x|} n_x` over the window.
    pub partial_sum: f64,
    /// `N 2^{k+2} sum_{n>m} e^{-K a n} n^3`.
    pub tail_bound: f64,
    pub grid_level: i32,
    pub m: u64,
    pub kappa: f64,
    pub growth_constant: f64,
}

/// Window sum of weighted degrees plus the lattice-shell tail estimate.
///
/// The growth constant is measured on the configuration; an empty
/// configuration uses 0, which keeps the tail finite.
pub fn degree_summability_check(config: &Configuration, a_low: f64) -> Result<SummabilityReport> {
    if !(a_low > 0.0 && a_low.is_finite()) {
        return Err(invalid(format!("a_low must be > 0, got {a_low}")));
    }
    let growth_constant = match estimate_growth_constant(config) {
        Ok(n) => n,
        Err(Error::EmptyConfiguration) => 0.0,
        Err(e) => return Err(e),
    };
    let partial_sum =
        compensated_sum(config.radii().iter().enumerate().map(|(i, r)| (-a_low * r).exp() * config.degree(i) as f64));

    // smallest k >= 0 with sqrt(d) / 2^k < rho
    let sqrt_d = (config.dim() as f64).sqrt();
    let mut grid_level = 0i32;
    while sqrt_d / 2f64.powi(grid_level) >= config.rho() {
        grid_level += 1;
    }
    let m = (1.0 / a_low).max(2.0).ceil() as u64;
    let kappa = (m as f64 - 1.0) / m as f64;
    let rate = kappa * a_low;
    let peak = (3.0 / rate).ceil() as u64;

    let mut series = CompensatedSum::new();
    let mut n = m + 1;
    loop {
        let nf = n as f64;
        let term = (-rate * nf).exp() * nf.powi(3);
        series.add(term);
        if term < 1e-15 && n > peak {
            break;
        }
        n += 1;
    }
    let tail_bound = growth_constant * 2f64.powi(grid_level + 2) * series.value();
    Ok(SummabilityReport { partial_sum, tail_bound, grid_level, m, kappa, growth_constant })
}
