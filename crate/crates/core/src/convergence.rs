//! Monte Carlo estimators for the `Z^p_α` norms of truncated systems,
//! the uniform moment ceiling, the Cauchy diagnostic across truncation
//! levels and the time-step refinement cross-check.
//!
//! The `Z^p` estimator takes the supremum over time site by site before
//! summing, so it is an upper-bound estimator of the true norm.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::geometry::{estimate_growth_constant, Configuration};
use crate::numeric::{compensated_sum, log_add_exp};
use crate::ovsjannikov::{norm_bound_series, BandedOperator, SeriesBound, OVS_ORDER};
use crate::sde::{simulate_truncated, ModelSpec, PathEnsemble, SimulationParams};
use crate::spaces::WeightedSeq;

/// Width of the Monte Carlo bands used in every pass/fail comparison.
pub const STDERR_BAND: f64 = 3.0;

/// Stopping tolerance for the norm-bound series.
const SERIES_TOL: f64 = 1e-12;

/// Relative change below which the level sums count as a plateau.
pub const PLATEAU_TOL: f64 = 0.05;

/// Exponent of `n_x` in the moment operators.
const MOMENT_BAND_EXPONENT: f64 = 4.0;

#[derive(Debug, Clone, Serialize)]
pub struct MomentField {
    #[serde(skip)]
    config: Arc<Configuration>,
    pub p: f64,
    pub n_paths: usize,
    /// `sup_t` of the sample mean of `|ξ_{x,t}|^p`.
    pub per_site: Vec<f64>,
    /// Standard error of the sample mean at the maximising time.
    pub stderr: Vec<f64>,
}

impl MomentField {
    pub fn config(&self) -> &Arc<Configuration> {
        &self.config
    }

    /// `sum_x e^{-α|x|} per_site_x`.
    pub fn weighted_sum(&self, alpha: f64) -> f64 {
        weighted(&self.config, &self.per_site, alpha)
    }

    /// Standard error of [`MomentField::weighted_sum`], treating sites as independent.
    pub fn weighted_stderr(&self, alpha: f64) -> f64 {
        let c = &self.config;
        compensated_sum(self.stderr.iter().enumerate().map(|(x, s)| ((-alpha * c.radius(x)).exp() * s).powi(2))).sqrt()
    }

    /// CSV rows `site,per_site,stderr`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["site", "per_site", "stderr"])?;
        for (x, (m, s)) in self.per_site.iter().zip(&self.stderr).enumerate() {
            w.write_record([x.to_string(), m.to_string(), s.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn weighted(config: &Configuration, values: &[f64], alpha: f64) -> f64 {
    compensated_sum(values.iter().enumerate().map(|(x, v)| (-alpha * config.radius(x)).exp() * v))
}

fn ensure_clean(e: &PathEnsemble) -> Result<()> {
    match e.blow_ups().first() {
        Some(b) => Err(Error::BlowUp { path: b.path, site: b.site, step: b.step }),
        None => Ok(()),
    }
}

/// Per-site `sup_t` of the sample mean of `f(path, time, site)` and its standard error.
fn site_sup_means(
    n_sites: usize,
    n_times: usize,
    n_paths: usize,
    f: impl Fn(usize, usize, usize) -> f64 + Sync,
) -> (Vec<f64>, Vec<f64>) {
    (0..n_sites)
        .into_par_iter()
        .map(|x| {
            let mut best = (0.0, 0.0);
            for j in 0..n_times {
                let mut sum = 0.0;
                let mut sq = 0.0;
                for path in 0..n_paths {
                    let v = f(path, j, x);
                    sum += v;
                    sq += v * v;
                }
                let n = n_paths as f64;
                let mean = sum / n;
                if j == 0 || mean > best.0 {
                    let var = if n_paths > 1 { ((sq - n * mean * mean) / (n - 1.0)).max(0.0) } else { 0.0 };
                    best = (mean, (var / n).sqrt());
                }
            }
            best
        })
        .unzip()
}

/// Per-site `sup_t E|ξ_{x,t}|^p`.
pub fn moment_field(ensemble: &PathEnsemble, p: f64) -> Result<MomentField> {
    ensure_clean(ensemble)?;
    if !(p >= 1.0) {
        return Err(invalid(format!("moment order must be >= 1, got {p}")));
    }
    let (per_site, stderr) =
        site_sup_means(ensemble.n_sites(), ensemble.n_times(), ensemble.n_paths(), |path, j, x| {
            ensemble.value(path, j, x).abs().powf(p)
        });
    Ok(MomentField { config: ensemble.config().clone(), p, n_paths: ensemble.n_paths(), per_site, stderr })
}

/// `(sum_x e^{-α|x|} per_site_x)^{1/p}`.
pub fn z_norm(field: &MomentField, alpha: f64) -> f64 {
    field.weighted_sum(alpha).powf(1.0 / field.p)
}

/// Constants of the moment inequality and of the difference inequality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentConstants {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub a4: f64,
    pub b1: f64,
    pub b2: f64,
    /// `p^2 (A1 + A2) + A3`, so that `|Q_xy| <= C n_x^4`.
    pub moment_band_constant: f64,
    /// `p^2 B1 + B2` for the difference operator.
    pub cauchy_band_constant: f64,
}

/// `A1..A4` and `B1, B2` for horizon `T`. The dissipativity constant enters
/// through `max(b, 0)` so that both operators are nonnegative.
pub fn moment_constants(model: &ModelSpec, horizon: f64) -> MomentConstants {
    let k = model.constants;
    let p = model.p;
    let b = k.b.max(0.0);
    let c2 = k.c * k.c;
    let abar2 = model.kernel.cap * model.kernel.cap;
    let pow = 2f64.powf(p - 1.0);
    let a1 = b + 1.0 + pow * c2;
    let a2 = 4.0 * k.m1 * k.m1 + 4.0 * c2 * pow;
    let a3 = p * abar2 + p * p * 4.0 * k.m2 * k.m2;
    let a4 = 5.0 * p * p * 2f64.powf(p) * c2 * horizon;
    let b1 = b + 1.0 + 2.0 * k.m1 * k.m1;
    let b2 = p * abar2 + 2.0 * p * p * k.m2 * k.m2;
    MomentConstants {
        a1,
        a2,
        a3,
        a4,
        b1,
        b2,
        moment_band_constant: p * p * (a1 + a2) + a3,
        cauchy_band_constant: p * p * b1 + b2,
    }
}

fn band_operator(config: Arc<Configuration>, diagonal: f64, off: f64, band_constant: f64) -> Result<BandedOperator> {
    let degrees = config.degrees();
    BandedOperator::from_fn(config, band_constant, MOMENT_BAND_EXPONENT, |x, y| {
        let n4 = (degrees[x] as f64).powi(4);
        if x == y {
            diagonal + off * n4
        } else {
            off * n4
        }
    })
}

/// Operator of the moment inequality: `Q_xx = p^2 (A1 + A2) + A3 n_x^4`, `Q_xy = A3 n_x^4`.
pub fn moment_operator(model: &ModelSpec, config: Arc<Configuration>, horizon: f64) -> Result<BandedOperator> {
    let k = moment_constants(model, horizon);
    let p2 = model.p * model.p;
    band_operator(config, p2 * (k.a1 + k.a2), k.a3, k.moment_band_constant)
}

/// Operator of the difference inequality: `Q_xx = p^2 B1 + B2 n_x^4`, `Q_xy = B2 n_x^4`.
pub fn cauchy_operator(model: &ModelSpec, config: Arc<Configuration>, horizon: f64) -> Result<BandedOperator> {
    let k = moment_constants(model, horizon);
    band_operator(config, model.p * model.p * k.b1, k.b2, k.cauchy_band_constant)
}

#[derive(Debug, Clone, Serialize)]
pub struct MomentCeiling {
    pub constants: MomentConstants,
    pub growth_constant: f64,
    pub ovs_constant: f64,
    /// `K(a_low, α)`.
    pub series: SeriesBound,
    /// `sum_x e^{-a_low |x|} (|ζ_x|^p + A4)`.
    pub source_sum: f64,
    /// Natural log of the ceiling `K · source_sum`.
    pub ln_ceiling: f64,
}

impl MomentCeiling {
    pub fn value(&self) -> f64 {
        self.ln_ceiling.exp()
    }
}

/// `K(a_low, α) sum_x e^{-a_low |x|} (|ζ_x|^p + A4)`.
pub fn moment_ceiling(
    model: &ModelSpec,
    zeta: &WeightedSeq,
    a_low: f64,
    alpha: f64,
    horizon: f64,
) -> Result<MomentCeiling> {
    let config = zeta.config().clone();
    if config.is_empty() {
        return Err(Error::EmptyConfiguration);
    }
    let constants = moment_constants(model, horizon);
    let q = moment_operator(model, config.clone(), horizon)?;
    let growth_constant = estimate_growth_constant(&config)?;
    let ovs_constant = q.ovs_constant(a_low)?;
    let series = norm_bound_series(ovs_constant, horizon, OVS_ORDER, a_low, alpha, SERIES_TOL)?;
    let sources: Vec<f64> = zeta.values().iter().map(|z| z.abs().powf(model.p) + constants.a4).collect();
    let source_sum = weighted(&config, &sources, a_low);
    Ok(MomentCeiling {
        constants,
        growth_constant,
        ovs_constant,
        series,
        source_sum,
        ln_ceiling: series.ln_value + source_sum.ln(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TailBoundReport {
    pub alpha: f64,
    /// `sum_x e^{-α|x|} max_{m <= n} per_site^{(m)}_x` for each level `n`.
    pub level_sums: Vec<f64>,
    pub sup_over_levels: f64,
    /// Standard error of the final level sum.
    pub stderr: f64,
    pub relative_change: f64,
    pub plateau_ok: bool,
    pub ln_ceiling: f64,
    pub below_ceiling: bool,
}

impl TailBoundReport {
    pub fn ok(&self) -> bool {
        self.plateau_ok && self.below_ceiling
    }
}

/// Sums the running per-site maximum over levels and compares the last
/// two levels and the ceiling (with a three-standard-error band).
pub fn tail_bound_check(fields: &[MomentField], alpha: f64, ceiling: &MomentCeiling) -> Result<TailBoundReport> {
    if fields.len() < 3 {
        return Err(invalid("tail bound check needs at least three levels"));
    }
    let config = fields[0].config().clone();
    for f in &fields[1..] {
        crate::spaces::same_config(f.config(), &config)?;
    }
    let n = config.len();
    let mut running = vec![0.0f64; n];
    let mut running_se = vec![0.0f64; n];
    let mut level_sums = Vec::with_capacity(fields.len());
    for f in fields {
        for x in 0..n {
            if f.per_site[x] >= running[x] {
                running[x] = f.per_site[x];
                running_se[x] = f.stderr[x];
            }
        }
        level_sums.push(weighted(&config, &running, alpha));
    }
    let sup = *level_sums.last().expect("at least three levels");
    let prev = level_sums[level_sums.len() - 2];
    let relative_change = if sup > 0.0 { (sup - prev) / sup } else { 0.0 };
    let stderr =
        compensated_sum(running_se.iter().enumerate().map(|(x, s)| ((-alpha * config.radius(x)).exp() * s).powi(2)))
            .sqrt();
    let upper = sup + STDERR_BAND * stderr;
    Ok(TailBoundReport {
        alpha,
        level_sums,
        sup_over_levels: sup,
        stderr,
        relative_change,
        plateau_ok: relative_change < PLATEAU_TOL,
        ln_ceiling: ceiling.ln_ceiling,
        below_ceiling: upper.ln() <= ceiling.ln_ceiling,
    })
}

/// Simulates every truncation level with the same seed, hence coupled noise.
pub fn simulate_levels(
    model: &ModelSpec,
    levels: &[Vec<usize>],
    zeta: &WeightedSeq,
    params: &SimulationParams,
) -> Result<Vec<PathEnsemble>> {
    levels.iter().map(|lambda| simulate_truncated(model, lambda, zeta, params)).collect()
}

/// Per-site `sup_t` of the sample mean of `|ξ^a - ξ^b|^p` on two coupled ensembles.
fn difference_field(a: &PathEnsemble, b: &PathEnsemble, p: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    ensure_clean(a)?;
    ensure_clean(b)?;
    crate::spaces::same_config(a.config(), b.config())?;
    if a.params().seed != b.params().seed || a.n_paths() != b.n_paths() || a.times() != b.times() {
        return Err(invalid("coupled ensembles need equal seeds, path counts and time grids"));
    }
    Ok(site_sup_means(a.n_sites(), a.n_times(), a.n_paths(), |path, j, x| {
        (a.value(path, j, x) - b.value(path, j, x)).abs().powf(p)
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CauchyRow {
    /// One-based level indices with `n <= m`.
    pub n: usize,
    pub m: usize,
    /// `sum_x e^{-α|x|} sup_t E|ξ^n_x - ξ^m_x|^p`.
    pub d: f64,
    pub stderr: f64,
    /// Natural log of `2^p K(α̃, α) sum_{Λ_m \ Λ_n} e^{-α̃|x|} M_x`.
    pub ln_dominator: f64,
}

impl CauchyRow {
    pub fn dominator(&self) -> f64 {
        self.ln_dominator.exp()
    }

    pub fn dominated(&self) -> bool {
        let upper = self.d + STDERR_BAND * self.stderr;
        upper == 0.0 || upper.ln() <= self.ln_dominator
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CauchyReport {
    pub alpha: f64,
    pub alpha_tilde: f64,
    pub cauchy_ovs_constant: f64,
    pub series: SeriesBound,
    /// `D(n, k)` for `n = 1..=k`, then the consecutive pairs `D(n, n+1)`.
    pub rows: Vec<CauchyRow>,
    /// `D(n, k)` strictly decreasing in `n`.
    pub decreasing_ok: bool,
    pub dominated_ok: bool,
}

impl CauchyReport {
    pub fn ok(&self) -> bool {
        self.decreasing_ok && self.dominated_ok
    }

    /// CSV rows `n,m,D,dominator,ln_dominator`; the dominator routinely overflows `f64`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["n", "m", "D", "dominator", "ln_dominator"])?;
        for r in &self.rows {
            w.write_record([
                r.n.to_string(),
                r.m.to_string(),
                r.d.to_string(),
                r.dominator().to_string(),
                r.ln_dominator.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Compares `D(n, m)` on coupled ensembles of nested levels against the tail
/// dominator. `M_x` is the measured `max_n sup_t E|ξ^n_{x,t}|^p` plus three
/// standard errors.
pub fn cauchy_diagnostic(
    model: &ModelSpec,
    levels: &[Vec<usize>],
    ensembles: &[PathEnsemble],
    a_low: f64,
    alpha: f64,
) -> Result<CauchyReport> {
    if levels.len() != ensembles.len() || levels.is_empty() {
        return Err(invalid("need one ensemble per level"));
    }
    if !(alpha > a_low && a_low > 0.0) {
        return Err(invalid(format!("need alpha > a_low > 0, got {alpha}, {a_low}")));
    }
    for (lvl, e) in levels.iter().zip(ensembles) {
        let mut sorted = lvl.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != e.truncation() {
            return Err(invalid("ensemble truncation does not match its level"));
        }
    }
    for w in levels.windows(2) {
        if !w[0].iter().all(|x| w[1].contains(x)) {
            return Err(invalid("truncation levels must be nested"));
        }
    }
    let config = ensembles[0].config().clone();
    if config.is_empty() {
        return Err(Error::EmptyConfiguration);
    }
    let p = model.p;
    let horizon = ensembles[0].params().horizon;
    let alpha_tilde = 0.5 * (a_low + alpha);

    let mut bound = vec![0.0f64; config.len()];
    for e in ensembles {
        let f = moment_field(e, p)?;
        for (b, (m, s)) in bound.iter_mut().zip(f.per_site.iter().zip(&f.stderr)) {
            *b = b.max(m + STDERR_BAND * s);
        }
    }
    let q = cauchy_operator(model, config.clone(), horizon)?;
    let l = q.ovs_constant(a_low)?;
    let series = norm_bound_series(l, horizon, OVS_ORDER, alpha_tilde, alpha, SERIES_TOL)?;
    let ln_prefactor = p * std::f64::consts::LN_2 + series.ln_value;

    let k = levels.len();
    let row = |n: usize, m: usize| -> Result<CauchyRow> {
        let (per_site, stderr) = difference_field(&ensembles[n], &ensembles[m], p)?;
        let d = weighted(&config, &per_site, alpha);
        let se =
            compensated_sum(stderr.iter().enumerate().map(|(x, s)| ((-alpha * config.radius(x)).exp() * s).powi(2)))
                .sqrt();
        let inner = &levels[n];
        let mut ln_tail = f64::NEG_INFINITY;
        for &x in &levels[m] {
            if !inner.contains(&x) && bound[x] > 0.0 {
                ln_tail = log_add_exp(ln_tail, -alpha_tilde * config.radius(x) + bound[x].ln());
            }
        }
        Ok(CauchyRow { n: n + 1, m: m + 1, d, stderr: se, ln_dominator: ln_prefactor + ln_tail })
    };

    let mut rows = Vec::new();
    for n in 0..k {
        rows.push(row(n, k - 1)?);
    }
    for n in 0..k.saturating_sub(2) {
        rows.push(row(n, n + 1)?);
    }
    let decreasing_ok = rows[..k].windows(2).all(|w| w[1].d < w[0].d);
    let dominated_ok = rows.iter().all(CauchyRow::dominated);
    Ok(CauchyReport { alpha, alpha_tilde, cauchy_ovs_constant: l, series, rows, decreasing_ok, dominated_ok })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UniquenessReport {
    /// `Z^p_α` distance between the `dt` and `dt/2` solutions.
    pub coarse: f64,
    /// `Z^p_α` distance between the `dt/2` and `dt/4` solutions.
    pub fine: f64,
    /// `coarse / fine`.
    pub ratio: f64,
}

/// Runs the same truncated system at `dt`, `dt/2` and `dt/4` on shared
/// finest-grid noise and reports the weighted discrepancies at the common
/// recorded times.
pub fn uniqueness_crosscheck(
    model: &ModelSpec,
    truncation: &[usize],
    zeta: &WeightedSeq,
    params: &SimulationParams,
    alpha: f64,
) -> Result<UniquenessReport> {
    params.validate()?;
    let run = |factor: usize| {
        let p = SimulationParams {
            dt: params.dt / factor as f64,
            refinement: params.refinement * 4 / factor,
            record_stride: params.record_stride * factor,
            ..*params
        };
        simulate_truncated(model, truncation, zeta, &p)
    };
    let (e1, e2, e4) = (run(1)?, run(2)?, run(4)?);
    let distance = |a: &PathEnsemble, b: &PathEnsemble| -> Result<f64> {
        ensure_clean(a)?;
        ensure_clean(b)?;
        let config = a.config();
        let weights: Vec<f64> = (0..config.len()).map(|x| (-alpha * config.radius(x)).exp()).collect();
        let mut sup: f64 = 0.0;
        for j in 0..a.n_times() {
            let mean = compensated_sum((0..a.n_paths()).map(|path| {
                let (sa, sb) = (a.state(path, j), b.state(path, j));
                compensated_sum(
                    weights.iter().zip(sa.iter().zip(sb)).map(|(w, (u, v))| w * (u - v).abs().powf(model.p)),
                )
            })) / a.n_paths() as f64;
            sup = sup.max(mean);
        }
        Ok(sup.powf(1.0 / model.p))
    };
    let coarse = distance(&e1, &e2)?;
    let fine = distance(&e2, &e4)?;
    let ratio = if fine > 0.0 {
        coarse / fine
    } else if coarse == 0.0 {
        1.0
    } else {
        f64::INFINITY
    };
    Ok(UniquenessReport { coarse, fine, ratio })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::exhaustion_sequence;
    use crate::sde::{Diffusion, Kernel, Potential, Scheme};

    fn line(n: usize, spacing: f64) -> Arc<Configuration> {
        let pts: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64 * spacing]).collect();
        Arc::new(Configuration::from_points(&pts, 1, 1.0, n as f64 * spacing + 1.0).unwrap())
    }

    fn linear(lambda: f64, sigma0: f64) -> ModelSpec {
        ModelSpec::new(Potential::Linear { lambda }, Kernel::none(), Diffusion { sigma0, ..Default::default() }, 2.0)
            .unwrap()
    }

    #[test]
    fn zero_model_zero_field() {
        let c = line(3, 0.5);
        let zeta = WeightedSeq::zeros(c);
        let e = simulate_truncated(
            &linear(1.0, 0.0),
            &[0, 1, 2],
            &zeta,
            &SimulationParams::new(0.1, 0.01, 5, 1, Scheme::Explicit),
        )
        .unwrap();
        let f = moment_field(&e, 2.0).unwrap();
        assert!(f.per_site.iter().all(|v| *v == 0.0));
        assert_eq!(z_norm(&f, 1.0), 0.0);
    }

    #[test]
    fn frozen_sites_give_exact_moments() {
        let c = line(3, 0.5);
        let zeta = WeightedSeq::new(c, vec![1.5, -2.0, 0.5]).unwrap();
        let e = simulate_truncated(
            &linear(1.0, 1.0),
            &[1],
            &zeta,
            &SimulationParams::new(0.1, 0.01, 5, 1, Scheme::Explicit),
        )
        .unwrap();
        let f = moment_field(&e, 3.0).unwrap();
        assert_eq!(f.per_site[0], 1.5f64.powf(3.0));
        assert_eq!(f.per_site[2], 0.5f64.powf(3.0));
        assert_eq!(f.stderr[0], 0.0);
    }

    #[test]
    fn z_norm_two_sites() {
        let c = line(2, 1.0);
        let f = MomentField { config: c, p: 2.0, n_paths: 1, per_site: vec![1.0, 1.0], stderr: vec![0.0, 0.0] };
        assert!((z_norm(&f, 1.0) - (1.0 + (-1.0f64).exp()).sqrt()).abs() < 1e-15);
        assert!(z_norm(&f, 2.0) <= z_norm(&f, 1.0));
    }

    #[test]
    fn constants_match_hand_evaluation() {
        let m = ModelSpec::new(
            Potential::Cubic { b: 1.0 },
            Kernel { shape: crate::sde::KernelShape::Constant, cap: 0.5 },
            Diffusion { sigma0: 1.0, sigma1: 0.5, sigma2: 0.25 },
            4.0,
        )
        .unwrap();
        let k = moment_constants(&m, 2.0);
        // c = 2, p = 4
        assert_eq!(k.a1, 1.0 + 1.0 + 8.0 * 4.0);
        assert_eq!(k.a2, 4.0 * 0.25 + 4.0 * 4.0 * 8.0);
        assert_eq!(k.a3, 4.0 * 0.25 + 16.0 * 4.0 * 0.0625);
        assert_eq!(k.a4, 5.0 * 16.0 * 16.0 * 4.0 * 2.0);
        assert_eq!(k.b1, 2.0 + 2.0 * 0.25);
        assert_eq!(k.b2, 1.0 + 2.0 * 16.0 * 0.0625);
    }

    #[test]
    fn frozen_levels_are_level_independent() {
        let c = line(5, 0.7);
        let zeta = WeightedSeq::from_fn(c, |i| 0.3 * i as f64).unwrap();
        let m = linear(1.0, 1.0);
        let params = SimulationParams::new(0.2, 0.02, 4, 3, Scheme::Explicit);
        let levels = vec![vec![]; 3];
        let ens = simulate_levels(&m, &levels, &zeta, &params).unwrap();
        let fields: Vec<MomentField> = ens.iter().map(|e| moment_field(e, 2.0).unwrap()).collect();
        let ceiling = moment_ceiling(&m, &zeta, 0.5, 1.0, 0.2).unwrap();
        let r = tail_bound_check(&fields, 1.0, &ceiling).unwrap();
        let exact = weighted(zeta.config(), &zeta.values().iter().map(|z| z * z).collect::<Vec<_>>(), 1.0);
        assert!(r.level_sums.iter().all(|s| (s - exact).abs() < 1e-15));
        assert!(r.ok());
        assert!(tail_bound_check(&fields[..2], 1.0, &ceiling).is_err());
    }

    #[test]
    fn decoupled_sites_only_thawed_sites_contribute() {
        let c = line(6, 0.8);
        let zeta = WeightedSeq::from_fn(c.clone(), |_| 0.5).unwrap();
        let m = linear(1.0, 1.0);
        let params = SimulationParams::new(0.5, 0.01, 200, 8, Scheme::Explicit);
        let levels = exhaustion_sequence(&c, 3).unwrap();
        let ens = simulate_levels(&m, &levels, &zeta, &params).unwrap();
        let report = cauchy_diagnostic(&m, &levels, &ens, 0.5, 1.0).unwrap();
        let last = report.rows[levels.len() - 1];
        assert_eq!(last.d, 0.0);
        // D(1, 3) from per-site simulation of the thawed sites alone
        let thawed: Vec<usize> = levels[2].iter().filter(|x| !levels[0].contains(x)).copied().collect();
        let solo = simulate_truncated(&m, &thawed, &zeta, &params).unwrap();
        let frozen = simulate_truncated(&m, &[], &zeta, &params).unwrap();
        let (per_site, _) = difference_field(&solo, &frozen, 2.0).unwrap();
        let expected = weighted(&c, &per_site, 1.0);
        assert!((report.rows[0].d - expected).abs() < 1e-12 * expected.max(1.0));
        assert!(report.ok(), "{report:?}");
    }

    #[test]
    fn deterministic_refinement_ratio_is_two() {
        let c = line(2, 0.5);
        let zeta = WeightedSeq::from_fn(c, |_| 1.0).unwrap();
        let params = SimulationParams { record_stride: 1, ..SimulationParams::new(1.0, 0.01, 1, 1, Scheme::Explicit) };
        let r = uniqueness_crosscheck(&linear(1.0, 0.0), &[0, 1], &zeta, &params, 1.0).unwrap();
        assert!((r.ratio - 2.0).abs() < 0.05, "{r:?}");
        let frozen = uniqueness_crosscheck(&linear(1.0, 1.0), &[], &zeta, &params, 1.0).unwrap();
        assert_eq!(frozen.coarse, 0.0);
    }
}
