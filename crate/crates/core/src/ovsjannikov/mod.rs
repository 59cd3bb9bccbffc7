//! Banded operators on the weighted `l^1` scale and the machinery around
//! the linear evolution `f(t) = z0 + ∫_0^t Q f(s) ds`.
//!
//! * [`BandedOperator`] stores `Q` row by row, aligned with the neighbour
//!   lists of its configuration, so the sparsity pattern can never leave
//!   the neighbour relation.
//! * [`ovs_constant`] is the explicit order-½ constant
//!   `L = 4 e^{a_low ρ} C N^{q+1} (1+ρ)^{1/2}`.
//! * [`picard`] holds the Picard solver, [`series`] the norm-bound series
//!   and [`comparison`] the sub-solution comparison check.

pub mod comparison;
pub mod picard;
pub mod series;

use std::io::{Read, Write};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::geometry::{estimate_growth_constant, Configuration};
use crate::spaces::{weighted_l1, WeightedSeq};

pub use comparison::{comparison_check, ComparisonOutcome};
pub use picard::{picard_iterate, solve_linear_evolution, EvolutionOptions, GridFunction, LinearEvolution};
pub use series::{iterate_bound_factor, norm_bound_series, printed_norm_series, SeriesBound};

/// Order of the Ovsjannikov bound for banded operators.
pub const OVS_ORDER: f64 = 0.5;

/// Relative slack when validating `|Q_xy| <= C n_x^q`.
const BAND_SLACK: f64 = 1e-12;

/// Sparse matrix with `Q_xy != 0` only for `y ∈ B_x`.
#[derive(Debug, Clone)]
pub struct BandedOperator {
    config: Arc<Configuration>,
    rows: Vec<Vec<f64>>,
    band_constant: f64,
    band_exponent: f64,
}

impl BandedOperator {
    /// Fills `Q_xy = f(x, y)` for every `y ∈ B_x` and checks the band bound.
    pub fn from_fn(
        config: Arc<Configuration>,
        band_constant: f64,
        band_exponent: f64,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let rows = (0..config.len()).map(|x| config.neighbors(x).iter().map(|&y| f(x, y)).collect()).collect();
        Self::from_rows(config, rows, band_constant, band_exponent)
    }

    /// Like [`from_fn`](Self::from_fn) but with the smallest `C` satisfying the band bound.
    pub fn with_measured_band(
        config: Arc<Configuration>,
        band_exponent: f64,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let rows: Vec<Vec<f64>> =
            (0..config.len()).map(|x| config.neighbors(x).iter().map(|&y| f(x, y)).collect()).collect();
        let band_constant = rows
            .iter()
            .enumerate()
            .flat_map(|(x, row)| {
                let scale = (config.degree(x) as f64).powf(band_exponent);
                row.iter().map(move |v| v.abs() / scale)
            })
            .fold(0.0, f64::max);
        Self::from_rows(config, rows, band_constant, band_exponent)
    }

    fn from_rows(
        config: Arc<Configuration>,
        rows: Vec<Vec<f64>>,
        band_constant: f64,
        band_exponent: f64,
    ) -> Result<Self> {
        if !(band_constant >= 0.0 && band_constant.is_finite()) {
            return Err(invalid(format!("band constant must be finite and >= 0, got {band_constant}")));
        }
        if !(band_exponent >= 1.0 && band_exponent.is_finite()) {
            return Err(invalid(format!("band exponent must be >= 1, got {band_exponent}")));
        }
        for (x, row) in rows.iter().enumerate() {
            let cap = band_constant * (config.degree(x) as f64).powf(band_exponent);
            for (&y, &v) in config.neighbors(x).iter().zip(row) {
                if !v.is_finite() {
                    return Err(invalid(format!("non-finite entry at ({x}, {y})")));
                }
                if v.abs() > cap * (1.0 + BAND_SLACK) {
                    return Err(invalid(format!("|Q[{x},{y}]| = {} exceeds C n_x^q = {cap}", v.abs())));
                }
            }
        }
        Ok(Self { config, rows, band_constant, band_exponent })
    }

    /// Builds from `(x, y, value)` triplets; entries outside `B_x` are rejected.
    pub fn from_triplets(
        config: Arc<Configuration>,
        band_constant: f64,
        band_exponent: f64,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self> {
        let mut rows: Vec<Vec<f64>> = (0..config.len()).map(|x| vec![0.0; config.degree(x)]).collect();
        for &(x, y, v) in triplets {
            if x >= config.len() || y >= config.len() {
                return Err(invalid(format!("triplet ({x}, {y}) out of range")));
            }
            let slot = config
                .neighbors(x)
                .binary_search(&y)
                .map_err(|_| invalid(format!("entry ({x}, {y}) outside the neighbour relation")))?;
            rows[x][slot] += v;
        }
        Self::from_rows(config, rows, band_constant, band_exponent)
    }

    pub fn zero(config: Arc<Configuration>) -> Self {
        let rows = (0..config.len()).map(|x| vec![0.0; config.degree(x)]).collect();
        Self { config, rows, band_constant: 0.0, band_exponent: 1.0 }
    }

    /// `Q_xx = 1`, all other entries zero.
    pub fn identity(config: Arc<Configuration>) -> Self {
        let rows = (0..config.len())
            .map(|x| config.neighbors(x).iter().map(|&y| if y == x { 1.0 } else { 0.0 }).collect())
            .collect();
        Self { config, rows, band_constant: 1.0, band_exponent: 1.0 }
    }

    pub fn config(&self) -> &Arc<Configuration> {
        &self.config
    }

    pub fn band_constant(&self) -> f64 {
        self.band_constant
    }

    pub fn band_exponent(&self) -> f64 {
        self.band_exponent
    }

    /// Row `x`, aligned with `config.neighbors(x)`.
    pub fn row(&self, x: usize) -> &[f64] {
        &self.rows[x]
    }

    pub fn entry(&self, x: usize, y: usize) -> f64 {
        match self.config.neighbors(x).binary_search(&y) {
            Ok(k) => self.rows[x][k],
            Err(_) => 0.0,
        }
    }

    pub fn is_nonnegative(&self) -> bool {
        self.rows.iter().flatten().all(|v| *v >= 0.0)
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(move |(x, row)| self.config.neighbors(x).iter().zip(row).map(move |(&y, &v)| (x, y, v)))
    }

    /// Dense copy, row-major.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.config.len();
        let mut out = vec![vec![0.0; n]; n];
        for (x, y, v) in self.triplets() {
            out[x][y] = v;
        }
        out
    }

    /// `out_x = sum_{y ∈ B_x} Q_xy z_y` on raw slices.
    pub fn apply_into(&self, z: &[f64], out: &mut [f64]) {
        for (x, (row, o)) in self.rows.iter().zip(out.iter_mut()).enumerate() {
            *o = self.config.neighbors(x).iter().zip(row).map(|(&y, q)| q * z[y]).sum();
        }
    }

    pub fn apply(&self, z: &WeightedSeq) -> Result<WeightedSeq> {
        z.ensure_same_config(&self.config)?;
        let mut out = vec![0.0; self.config.len()];
        self.apply_into(z.values(), &mut out);
        WeightedSeq::new(self.config.clone(), out)
    }

    /// Exact `l^1_alpha -> l^1_beta` operator norm (largest weighted column sum).
    pub fn operator_norm(&self, alpha: f64, beta: f64) -> f64 {
        let mut columns = vec![0.0; self.config.len()];
        for (x, y, v) in self.triplets() {
            columns[y] += v.abs() * (-beta * self.config.radius(x)).exp();
        }
        columns.iter().enumerate().map(|(y, c)| c * (alpha * self.config.radius(y)).exp()).fold(0.0, f64::max)
    }

    /// `L` for this operator, using the measured growth constant of its configuration.
    pub fn ovs_constant(&self, a_low: f64) -> Result<f64> {
        let n_hat = estimate_growth_constant(&self.config)?;
        Ok(ovs_constant(self.band_constant, self.band_exponent, n_hat, self.config.rho(), a_low))
    }

    /// Sparse triplets CSV: `x_index,y_index,value`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["x_index", "y_index", "value"])?;
        for (x, y, v) in self.triplets() {
            w.write_record([x.to_string(), y.to_string(), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(
        config: Arc<Configuration>,
        band_constant: f64,
        band_exponent: f64,
        reader: R,
    ) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let mut triplets = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or("").to_string();
            let x: usize = field(0).parse().map_err(|e| Error::Parse(format!("x_index: {e}")))?;
            let y: usize = field(1).parse().map_err(|e| Error::Parse(format!("y_index: {e}")))?;
            let v: f64 = field(2).parse().map_err(|e| Error::Parse(format!("value: {e}")))?;
            triplets.push((x, y, v));
        }
        Self::from_triplets(config, band_constant, band_exponent, &triplets)
    }
}

/// `L = 4 e^{a_low ρ} C N^{q+1} (1+ρ)^{1/2}`.
pub fn ovs_constant(band_constant: f64, band_exponent: f64, growth_constant: f64, rho: f64, a_low: f64) -> f64 {
    4.0 * (a_low * rho).exp() * band_constant * growth_constant.powf(band_exponent + 1.0) * (1.0 + rho).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OvsBoundReport {
    /// Largest sampled `||Qz||_beta / ||z||_alpha`.
    pub max_ratio: f64,
    /// `L / (beta - alpha)^{1/2}`.
    pub bound: f64,
    pub ovs_constant: f64,
    /// Exact operator norm between the two levels, for reference.
    pub operator_norm: f64,
    pub ok: bool,
}

/// Samples random nonzero `z` and compares `||Qz||_beta / ||z||_alpha`
/// against `L / (beta - alpha)^{1/2}`.
///
/// Odd trials use a single-site unit mass, even trials a dense vector with
/// uniform entries in `[-1, 1]`. Each trial owns its own RNG stream, so the
/// result does not depend on the thread count.
pub fn verify_ovs_bound(
    q: &BandedOperator,
    a_low: f64,
    alpha: f64,
    beta: f64,
    trials: usize,
    seed: u64,
) -> Result<OvsBoundReport> {
    if alpha >= beta {
        return Err(invalid(format!("need alpha < beta, got {alpha} >= {beta}")));
    }
    if alpha < a_low {
        return Err(invalid(format!("alpha {alpha} below a_low {a_low}")));
    }
    let config = q.config();
    let n = config.len();
    let l = if n == 0 { 0.0 } else { q.ovs_constant(a_low)? };
    let bound = l / (beta - alpha).sqrt();

    let ratios: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            if n == 0 {
                return 0.0;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(trial as u64);
            let z: Vec<f64> = if trial % 2 == 1 {
                let site = rng.random_range(0..n);
                (0..n).map(|i| if i == site { 1.0 } else { 0.0 }).collect()
            } else {
                (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect()
            };
            let denom = weighted_l1(config, &z, alpha);
            if denom == 0.0 {
                return 0.0;
            }
            let mut qz = vec![0.0; n];
            q.apply_into(&z, &mut qz);
            weighted_l1(config, &qz, beta) / denom
        })
        .collect();
    let max_ratio = ratios.into_iter().fold(0.0, f64::max);

    Ok(OvsBoundReport {
        max_ratio,
        bound,
        ovs_constant: l,
        operator_norm: q.operator_norm(alpha, beta),
        ok: max_ratio <= bound,
    })
}
