//! Euler–Maruyama simulation of the truncated systems.
//!
//! Sites in the truncation set evolve; every other site stays at its
//! initial value. Each `(path, site)` pair owns a ChaCha8 stream selected by
//! `(path << 32) | site` under the run seed, so the Wiener increments at a
//! site do not depend on which other sites evolve, on the thread count, or
//! (through `refinement`) on how many fine increments make up one step.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ModelSpec, Potential};
use crate::error::{invalid, Result};
use crate::geometry::Configuration;
use crate::spaces::WeightedSeq;

/// Values beyond this magnitude are treated as a blow-up.
const BLOWUP_LIMIT: f64 = 1e100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Explicit,
    /// Drift increment `Φ dt / (1 + dt |Φ|)`.
    Tamed,
}

impl Scheme {
    pub fn default_for(potential: &Potential) -> Self {
        if potential.is_superlinear() {
            Scheme::Tamed
        } else {
            Scheme::Explicit
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationParams {
    pub horizon: f64,
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub scheme: Scheme,
    /// Record every `record_stride`-th step (must divide the step count).
    pub record_stride: usize,
    /// Standard normals drawn per step; the step increment is
    /// `sqrt(dt / refinement)` times their sum.
    pub refinement: usize,
}

impl SimulationParams {
    pub fn new(horizon: f64, dt: f64, n_paths: usize, seed: u64, scheme: Scheme) -> Self {
        Self { horizon, dt, n_paths, seed, scheme, record_stride: 1, refinement: 1 }
    }

    /// Number of time steps; errors unless `dt` divides `T`.
    pub fn steps(&self) -> Result<usize> {
        if !(self.horizon > 0.0 && self.horizon.is_finite() && self.dt > 0.0 && self.dt <= self.horizon) {
            return Err(invalid(format!("need 0 < dt <= T, got dt = {}, T = {}", self.dt, self.horizon)));
        }
        let steps = (self.horizon / self.dt).round();
        if (steps * self.dt - self.horizon).abs() > 1e-9 * self.horizon {
            return Err(invalid(format!("dt = {} does not divide T = {}", self.dt, self.horizon)));
        }
        Ok(steps as usize)
    }

    pub fn validate(&self) -> Result<usize> {
        let steps = self.steps()?;
        if self.n_paths == 0 {
            return Err(invalid("need at least one path"));
        }
        if self.record_stride == 0 || steps % self.record_stride != 0 {
            return Err(invalid(format!("record stride {} must divide the step count {steps}", self.record_stride)));
        }
        if self.refinement == 0 {
            return Err(invalid("refinement must be >= 1"));
        }
        Ok(steps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BlowUpRecord {
    pub path: usize,
    pub site: usize,
    pub step: usize,
}

/// Monte Carlo sample of one truncated system.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    config: Arc<Configuration>,
    truncation: Vec<usize>,
    active: Vec<bool>,
    zeta: Vec<f64>,
    times: Vec<f64>,
    params: SimulationParams,
    /// `[path][time][site]`.
    values: Vec<f64>,
    /// `[path][site]`: `max_t |ξ_{x,t}|` over every step, not only recorded ones.
    running_max: Vec<f64>,
    blow_ups: Vec<BlowUpRecord>,
}

impl PathEnsemble {
    pub fn config(&self) -> &Arc<Configuration> {
        &self.config
    }

    pub fn truncation(&self) -> &[usize] {
        &self.truncation
    }

    pub fn is_active(&self, site: usize) -> bool {
        self.active[site]
    }

    pub fn zeta(&self) -> &[f64] {
        &self.zeta
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn params(&self) -> &SimulationParams {
        &self.params
    }

    pub fn n_paths(&self) -> usize {
        self.params.n_paths
    }

    pub fn n_sites(&self) -> usize {
        self.config.len()
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn value(&self, path: usize, time: usize, site: usize) -> f64 {
        self.values[(path * self.n_times() + time) * self.n_sites() + site]
    }

    /// All site values of one path at one recorded time.
    pub fn state(&self, path: usize, time: usize) -> &[f64] {
        let n = self.n_sites();
        let start = (path * self.n_times() + time) * n;
        &self.values[start..start + n]
    }

    pub fn running_max(&self, path: usize, site: usize) -> f64 {
        self.running_max[path * self.n_sites() + site]
    }

    pub fn blow_ups(&self) -> &[BlowUpRecord] {
        &self.blow_ups
    }

    pub fn has_blow_up(&self) -> bool {
        !self.blow_ups.is_empty()
    }

    /// CSV rows `path,t,site_index,value` for the first `max_paths` paths.
    pub fn write_trajectories_csv<W: Write>(&self, writer: W, max_paths: usize) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["path", "t", "site_index", "value"])?;
        for path in 0..self.n_paths().min(max_paths) {
            for (j, t) in self.times.iter().enumerate() {
                for (x, v) in self.state(path, j).iter().enumerate() {
                    w.write_record([path.to_string(), t.to_string(), x.to_string(), v.to_string()])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> EnsembleSummary {
        let n = self.n_paths() as f64;
        let last = self.n_times() - 1;
        let sites = (0..self.n_sites())
            .map(|x| {
                let mut mean = 0.0;
                let mut second = 0.0;
                let mut max_abs: f64 = 0.0;
                for path in 0..self.n_paths() {
                    let v = self.value(path, last, x);
                    mean += v;
                    second += v * v;
                    max_abs = max_abs.max(self.running_max(path, x));
                }
                SiteSummary {
                    site: x,
                    active: self.active[x],
                    terminal_mean: mean / n,
                    terminal_second_moment: second / n,
                    max_abs,
                }
            })
            .collect();
        EnsembleSummary {
            seed: self.params.seed,
            scheme: self.params.scheme,
            dt: self.params.dt,
            horizon: self.params.horizon,
            n_paths: self.n_paths(),
            n_sites: self.n_sites(),
            active_sites: self.truncation.len(),
            recorded_times: self.n_times(),
            blow_ups: self.blow_ups.clone(),
            sites,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SiteSummary {
    pub site: usize,
    pub active: bool,
    pub terminal_mean: f64,
    pub terminal_second_moment: f64,
    pub max_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleSummary {
    pub seed: u64,
    pub scheme: Scheme,
    pub dt: f64,
    pub horizon: f64,
    pub n_paths: usize,
    pub n_sites: usize,
    pub active_sites: usize,
    pub recorded_times: usize,
    pub blow_ups: Vec<BlowUpRecord>,
    pub sites: Vec<SiteSummary>,
}

/// Noise generator of one `(path, site)` pair.
pub fn site_stream(seed: u64, path: usize, site: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((path as u64) << 32) | site as u64);
    rng
}

struct ActiveSite {
    site: usize,
    degree: usize,
    /// `(y, a(|x - y|))` for `y ∈ B_x`.
    couplings: Vec<(usize, f64)>,
}

/// Simulates `n_paths` independent copies of the system truncated to `lambda_n`.
pub fn simulate_truncated(
    model: &ModelSpec,
    lambda_n: &[usize],
    zeta: &WeightedSeq,
    params: &SimulationParams,
) -> Result<PathEnsemble> {
    model.validate()?;
    let steps = params.validate()?;
    let config = zeta.config().clone();
    let n = config.len();
    let mut truncation = lambda_n.to_vec();
    truncation.sort_unstable();
    truncation.dedup();
    if truncation.last().is_some_and(|&x| x >= n) {
        return Err(invalid("truncation set contains a site outside the configuration"));
    }
    let mut active = vec![false; n];
    truncation.iter().for_each(|&x| active[x] = true);

    let rho = config.rho();
    let sites: Vec<ActiveSite> = truncation
        .iter()
        .map(|&x| ActiveSite {
            site: x,
            degree: config.degree(x),
            couplings: config
                .neighbors(x)
                .iter()
                .map(|&y| (y, model.kernel.eval(config.distance(x, y), rho)))
                .collect(),
        })
        .collect();

    let n_times = steps / params.record_stride + 1;
    let times: Vec<f64> = (0..n_times).map(|j| (j * params.record_stride) as f64 * params.dt).collect();
    let zeta_values = zeta.values().to_vec();
    let mut values = vec![0.0; params.n_paths * n_times * n];
    let mut running_max = vec![0.0; params.n_paths * n];

    let blow_ups: Vec<BlowUpRecord> = values
        .par_chunks_mut(n_times * n.max(1))
        .zip(running_max.par_chunks_mut(n.max(1)))
        .enumerate()
        .filter_map(|(path, (out, maxima))| {
            simulate_path(model, params, steps, &sites, &zeta_values, path, out, maxima)
        })
        .collect();

    Ok(PathEnsemble {
        config,
        truncation,
        active,
        zeta: zeta_values,
        times,
        params: *params,
        values,
        running_max,
        blow_ups,
    })
}

#[allow(clippy::too_many_arguments)]
fn simulate_path(
    model: &ModelSpec,
    params: &SimulationParams,
    steps: usize,
    sites: &[ActiveSite],
    zeta: &[f64],
    path: usize,
    out: &mut [f64],
    maxima: &mut [f64],
) -> Option<BlowUpRecord> {
    let n = zeta.len();
    if n == 0 {
        return None;
    }
    let mut state = zeta.to_vec();
    let mut next = state.clone();
    for (m, z) in maxima.iter_mut().zip(&state) {
        *m = z.abs();
    }
    out[..n].copy_from_slice(&state);
    let mut rngs: Vec<ChaCha8Rng> = sites.iter().map(|s| site_stream(params.seed, path, s.site)).collect();
    let dt = params.dt;
    let fine_scale = (dt / params.refinement as f64).sqrt();
    let mut blow_up = None;

    for step in 0..steps {
        if blow_up.is_none() {
            for (s, rng) in sites.iter().zip(rngs.iter_mut()) {
                let q = state[s.site];
                let mut coupling = 0.0;
                let mut sum = 0.0;
                for &(y, a) in &s.couplings {
                    coupling += a * state[y];
                    sum += state[y];
                }
                let phi = model.potential.eval(q) + coupling;
                let psi = model.diffusion.eval(q, s.degree, sum);
                let mut normals = 0.0;
                for _ in 0..params.refinement {
                    let eta: f64 = rng.sample(StandardNormal);
                    normals += eta;
                }
                let drift = match params.scheme {
                    Scheme::Explicit => phi * dt,
                    Scheme::Tamed => phi * dt / (1.0 + dt * phi.abs()),
                };
                let v = q + drift + psi * fine_scale * normals;
                if !v.is_finite() || v.abs() > BLOWUP_LIMIT {
                    blow_up = Some(BlowUpRecord { path, site: s.site, step: step + 1 });
                    break;
                }
                next[s.site] = v;
            }
            if blow_up.is_none() {
                for s in sites {
                    state[s.site] = next[s.site];
                    maxima[s.site] = maxima[s.site].max(state[s.site].abs());
                }
            }
        }
        if (step + 1) % params.record_stride == 0 {
            let j = (step + 1) / params.record_stride;
            out[j * n..(j + 1) * n].copy_from_slice(&state);
        }
    }
    blow_up
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExitTimeReport {
    pub thresholds: Vec<f64>,
    /// `[level][site]`: fraction of paths with `max_t |ξ_{x,t}| >= n`.
    pub per_site: Vec<Vec<f64>>,
    /// Largest per-site probability at each level.
    pub worst: Vec<f64>,
}

/// Empirical `P(τ_n < T)` with `τ_n` the first time `|ξ_x| >= n`.
pub fn exit_time_diagnostic(ensemble: &PathEnsemble, thresholds: &[f64]) -> Result<ExitTimeReport> {
    if ensemble.n_sites() == 0 {
        return Err(invalid("exit-time diagnostic needs a nonempty ensemble"));
    }
    if thresholds.windows(2).any(|w| !(w[1] > w[0])) || thresholds.iter().any(|t| !(*t >= 0.0)) {
        return Err(invalid("thresholds must be nonnegative and increasing"));
    }
    let paths = ensemble.n_paths();
    let per_site: Vec<Vec<f64>> = thresholds
        .iter()
        .map(|&level| {
            (0..ensemble.n_sites())
                .map(|x| {
                    let hits = (0..paths).filter(|&p| ensemble.running_max(p, x) >= level).count();
                    hits as f64 / paths as f64
                })
                .collect()
        })
        .collect();
    let worst = per_site.iter().map(|row| row.iter().copied().fold(0.0, f64::max)).collect();
    Ok(ExitTimeReport { thresholds: thresholds.to_vec(), per_site, worst })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::{Diffusion, Kernel};

    fn sites(n: usize) -> Arc<Configuration> {
        let pts: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64 * 0.8]).collect();
        Arc::new(Configuration::from_points(&pts, 1, 1.0, n as f64).unwrap())
    }

    fn linear(sigma0: f64) -> ModelSpec {
        ModelSpec::new(
            Potential::Linear { lambda: 1.0 },
            Kernel::none(),
            Diffusion { sigma0, ..Default::default() },
            2.0,
        )
        .unwrap()
    }

    #[test]
    fn deterministic_decay_matches_exponential() {
        let c = sites(3);
        let zeta = WeightedSeq::from_fn(c, |_| 1.0).unwrap();
        let params = SimulationParams::new(1.0, 1e-3, 2, 5, Scheme::Explicit);
        let e = simulate_truncated(&linear(0.0), &[0, 1, 2], &zeta, &params).unwrap();
        for (j, t) in e.times().iter().enumerate() {
            let exact = (1.0 - 1e-3f64).powi(j as i32);
            for x in 0..3 {
                assert!((e.value(1, j, x) - exact).abs() < 1e-12);
                assert!((e.value(1, j, x) - (-t).exp()).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn empty_truncation_freezes_everything() {
        let c = sites(4);
        let zeta = WeightedSeq::from_fn(c, |i| i as f64 - 1.5).unwrap();
        let params = SimulationParams::new(0.5, 0.01, 3, 1, Scheme::Tamed);
        let e = simulate_truncated(&linear(1.0), &[], &zeta, &params).unwrap();
        for p in 0..3 {
            for j in 0..e.n_times() {
                assert_eq!(e.state(p, j), zeta.values());
            }
        }
    }

    #[test]
    fn frozen_sites_stay_put_and_noise_is_sitewise() {
        let c = sites(5);
        let zeta = WeightedSeq::from_fn(c, |i| 0.1 * i as f64).unwrap();
        let params = SimulationParams::new(0.2, 0.01, 4, 9, Scheme::Explicit);
        let m = linear(1.0);
        let small = simulate_truncated(&m, &[1, 3], &zeta, &params).unwrap();
        let large = simulate_truncated(&m, &[1, 2, 3], &zeta, &params).unwrap();
        for p in 0..4 {
            for j in 0..small.n_times() {
                assert_eq!(small.value(p, j, 0), zeta.values()[0]);
                assert_eq!(small.value(p, j, 2), zeta.values()[2]);
                // no coupling, so shared sites see identical increments
                assert_eq!(small.value(p, j, 1), large.value(p, j, 1));
            }
        }
    }

    #[test]
    fn refinement_reproduces_fine_noise() {
        let c = sites(1);
        let zeta = WeightedSeq::zeros(c);
        let m = ModelSpec::new(
            Potential::Linear { lambda: 1e-9 },
            Kernel::none(),
            Diffusion { sigma0: 1.0, ..Default::default() },
            2.0,
        )
        .unwrap();
        let fine = SimulationParams::new(1.0, 0.01, 3, 11, Scheme::Explicit);
        let coarse = SimulationParams { dt: 0.02, refinement: 2, ..fine };
        let f = simulate_truncated(&m, &[0], &zeta, &fine).unwrap();
        let g = simulate_truncated(&m, &[0], &zeta, &coarse).unwrap();
        for p in 0..3 {
            // pure Brownian motion up to the 1e-9 drift
            assert!((f.value(p, 100, 0) - g.value(p, 50, 0)).abs() < 1e-6);
        }
    }

    #[test]
    fn stride_and_divisibility() {
        let c = sites(1);
        let zeta = WeightedSeq::zeros(c);
        let mut params = SimulationParams::new(1.0, 0.3, 1, 1, Scheme::Explicit);
        assert!(simulate_truncated(&linear(1.0), &[0], &zeta, &params).is_err());
        params.dt = 0.01;
        params.record_stride = 7;
        assert!(simulate_truncated(&linear(1.0), &[0], &zeta, &params).is_err());
        params.record_stride = 10;
        let e = simulate_truncated(&linear(1.0), &[0], &zeta, &params).unwrap();
        assert_eq!(e.n_times(), 11);
        assert!((e.times()[10] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn explicit_cubic_blow_up_is_flagged() {
        let c = sites(1);
        let zeta = WeightedSeq::new(c, vec![50.0]).unwrap();
        let m = ModelSpec::new(Potential::Cubic { b: 0.0 }, Kernel::none(), Diffusion::default(), 4.0).unwrap();
        let params = SimulationParams::new(1.0, 0.1, 2, 1, Scheme::Explicit);
        let e = simulate_truncated(&m, &[0], &zeta, &params).unwrap();
        assert!(e.has_blow_up());
        assert!((0..e.n_times()).all(|j| e.value(0, j, 0).is_finite()));
        let tamed = simulate_truncated(&m, &[0], &zeta, &SimulationParams { scheme: Scheme::Tamed, ..params }).unwrap();
        assert!(!tamed.has_blow_up());
    }

    #[test]
    fn thread_count_does_not_change_paths() {
        let c = sites(6);
        let zeta = WeightedSeq::from_fn(c, |i| i as f64 * 0.2).unwrap();
        let m = ModelSpec::new(
            Potential::Cubic { b: 0.5 },
            Kernel { shape: crate::sde::KernelShape::Triangular, cap: 0.3 },
            Diffusion { sigma0: 0.5, sigma1: 0.1, sigma2: 0.05 },
            4.0,
        )
        .unwrap();
        let params = SimulationParams::new(0.5, 0.01, 16, 3, Scheme::Tamed);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| simulate_truncated(&m, &[0, 1, 2, 3, 4, 5], &zeta, &params).unwrap())
        };
        let (a, b) = (run(1), run(4));
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn exit_probabilities() {
        let c = sites(1);
        let zeta = WeightedSeq::new(c, vec![1.0]).unwrap();
        let params = SimulationParams::new(1.0, 0.01, 10, 1, Scheme::Explicit);
        let e = simulate_truncated(&linear(0.0), &[0], &zeta, &params).unwrap();
        let r = exit_time_diagnostic(&e, &[0.0, 0.5, 2.0]).unwrap();
        assert_eq!(r.worst, vec![1.0, 1.0, 0.0]);
        assert!(exit_time_diagnostic(&e, &[2.0, 1.0]).is_err());
    }
}
