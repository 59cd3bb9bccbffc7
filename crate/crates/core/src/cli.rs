//! Command-line driver: `generate`, `simulate`, `verify` and `picard`.
//!
//! Every command reads one TOML experiment file, writes CSV/JSON into the
//! output directory and returns exit code 0 (all checks pass), 1 (a check
//! failed; the report is still written) or 2 (invalid input or I/O error).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::convergence::{
    cauchy_diagnostic, moment_ceiling, moment_field, simulate_levels, tail_bound_check, z_norm, MomentField,
};
use crate::error::{invalid, Error, Result};
use crate::geometry::{
    estimate_growth_constant, exhaustion_sequence, growth_argmax, sample_configuration, Configuration, SamplingParams,
};
use crate::ovsjannikov::{
    comparison_check, iterate_bound_factor, norm_bound_series, printed_norm_series, solve_linear_evolution,
    verify_ovs_bound, BandedOperator, EvolutionOptions, GridFunction,
};
use crate::sde::{
    check_dissipativity, exit_time_diagnostic, Diffusion, Kernel, ModelConstants, ModelSpec, Potential, Scheme,
    SimulationParams,
};
use crate::spaces::{degree_summability_check, lp_norm, ScaleParams, WeightedSeq};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_INVALID: i32 = 2;

const SERIES_TOL: f64 = 1e-12;

#[derive(Debug, Parser)]
#[command(name = "lattice-sde", version, about = "Truncated dissipative SDE lattice systems on random configurations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a configuration and report its degree growth.
    Generate(CommonArgs),
    /// Simulate every truncation level and write trajectories and moments.
    Simulate(CommonArgs),
    /// Run the bound checks and write a pass/fail report.
    Verify(CommonArgs),
    /// Solve the linear evolution by Picard iteration.
    Picard(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Experiment file (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `output_dir` in the file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Master seed; overrides `seed` in the file.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySection {
    pub intensity: f64,
    pub box_halfwidth: f64,
    pub dim: usize,
    pub rho: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub potential: Potential,
    #[serde(default = "Kernel::none")]
    pub kernel: Kernel,
    #[serde(default)]
    pub diffusion: Diffusion,
    /// Declared constants; derived from the functional forms when absent.
    #[serde(default)]
    pub constants: Option<ModelConstants>,
    /// Constant initial value `ζ_x`.
    #[serde(default)]
    pub initial_value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    pub dt: f64,
    pub n_paths: usize,
    #[serde(default)]
    pub scheme: Option<Scheme>,
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(default = "one")]
    pub record_stride: usize,
    /// Paths written to the trajectory dump.
    #[serde(default = "default_dump_paths")]
    pub dump_paths: usize,
    #[serde(default = "default_thresholds")]
    pub exit_thresholds: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    /// `Q_xy = C`.
    Uniform,
    /// `Q_xy = C n_x^q`.
    Degree,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PicardSection {
    #[serde(default = "default_band_constant")]
    pub band_constant: f64,
    #[serde(default = "one_f64")]
    pub band_exponent: f64,
    #[serde(default = "default_pattern")]
    pub pattern: Pattern,
    /// Order used in the norm-bound series; must be below 1.
    #[serde(default = "default_order")]
    pub order: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

impl Default for PicardSection {
    fn default() -> Self {
        Self {
            band_constant: default_band_constant(),
            band_exponent: 1.0,
            pattern: default_pattern(),
            order: default_order(),
            steps: default_steps(),
            tol: default_tol(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    #[serde(default = "default_trials")]
    pub ovs_trials: usize,
    #[serde(default = "default_samples")]
    pub dissipativity_samples: usize,
    #[serde(default = "default_qbar")]
    pub dissipativity_range: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            ovs_trials: default_trials(),
            dissipativity_samples: default_samples(),
            dissipativity_range: default_qbar(),
        }
    }
}

fn default_levels() -> usize {
    4
}
fn one() -> usize {
    1
}
fn one_f64() -> f64 {
    1.0
}
fn default_dump_paths() -> usize {
    5
}
fn default_thresholds() -> Vec<f64> {
    vec![2.0, 4.0, 8.0]
}
fn default_band_constant() -> f64 {
    0.2
}
fn default_pattern() -> Pattern {
    Pattern::Degree
}
fn default_order() -> f64 {
    0.5
}
fn default_steps() -> usize {
    20
}
fn default_tol() -> f64 {
    1e-10
}
fn default_trials() -> usize {
    200
}
fn default_samples() -> usize {
    1000
}
fn default_qbar() -> f64 {
    10.0
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// One experiment. The master `seed` drives the geometry; simulation noise
/// and random trials use `seed + 1` and `seed + 2`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub geometry: GeometrySection,
    pub scale: ScaleParams,
    pub model: ModelSection,
    pub simulation: SimulationSection,
    /// Report weights `α` with `a_low < α <= a_high`.
    pub report_alphas: Vec<f64>,
    #[serde(default)]
    pub picard: PicardSection,
    #[serde(default)]
    pub verify: VerifySection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.scale.validate()?;
        if self.report_alphas.is_empty() {
            return Err(invalid("report_alphas must not be empty"));
        }
        for &a in &self.report_alphas {
            if !(a > self.scale.a_low && a <= self.scale.a_high) {
                return Err(invalid(format!(
                    "report weight {a} outside ({}, {}]",
                    self.scale.a_low, self.scale.a_high
                )));
            }
        }
        self.model_spec()?;
        self.simulation_params()?.validate()?;
        if self.simulation.levels == 0 {
            return Err(invalid("levels must be >= 1"));
        }
        let pc = &self.picard;
        if !(0.0..1.0).contains(&pc.order) {
            return Err(invalid(format!(
                "series order q = {} must satisfy 0 <= q < 1; the series may diverge otherwise",
                pc.order
            )));
        }
        if !(pc.band_constant >= 0.0 && pc.band_exponent >= 1.0 && pc.steps > 0 && pc.tol > 0.0) {
            return Err(invalid("picard section needs band_constant >= 0, band_exponent >= 1, steps > 0, tol > 0"));
        }
        if self.verify.ovs_trials == 0 || self.verify.dissipativity_samples == 0 {
            return Err(invalid("verify trial counts must be >= 1"));
        }
        Ok(())
    }

    pub fn sampling(&self) -> SamplingParams {
        let g = &self.geometry;
        SamplingParams {
            intensity: g.intensity,
            box_halfwidth: g.box_halfwidth,
            dim: g.dim,
            rho: g.rho,
            seed: self.seed,
        }
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let m = &self.model;
        match m.constants {
            Some(c) => ModelSpec::with_constants(m.potential, m.kernel, m.diffusion, c, self.scale.p),
            None => ModelSpec::new(m.potential, m.kernel, m.diffusion, self.scale.p),
        }
    }

    pub fn simulation_params(&self) -> Result<SimulationParams> {
        let s = &self.simulation;
        let scheme = s.scheme.unwrap_or_else(|| Scheme::default_for(&self.model.potential));
        Ok(SimulationParams {
            record_stride: s.record_stride,
            ..SimulationParams::new(self.scale.horizon, s.dt, s.n_paths, self.seed.wrapping_add(1), scheme)
        })
    }
}

/// Parses arguments and runs one command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_CHECK_FAILED,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_INVALID
        }
    }
}

/// Runs a parsed command; `Ok(false)` means a check failed.
pub fn execute(command: &Command) -> Result<bool> {
    let args = match command {
        Command::Generate(a) | Command::Simulate(a) | Command::Verify(a) | Command::Picard(a) => a,
    };
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    fs::create_dir_all(&cfg.output_dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.threads.unwrap_or(0))
        .build()
        .map_err(|e| invalid(format!("thread pool: {e}")))?;
    pool.install(|| match command {
        Command::Generate(_) => cmd_generate(&cfg),
        Command::Simulate(_) => cmd_simulate(&cfg),
        Command::Verify(_) => cmd_verify(&cfg),
        Command::Picard(_) => cmd_picard(&cfg),
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn csv_file(dir: &Path, name: &str) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(dir.join(name))?))
}

fn build_configuration(cfg: &ExperimentConfig) -> Result<Arc<Configuration>> {
    let config = Arc::new(sample_configuration(&cfg.sampling())?);
    fs::write(cfg.output_dir.join("configuration.txt"), config.to_text())?;
    Ok(config)
}

fn initial_data(cfg: &ExperimentConfig, config: &Arc<Configuration>) -> Result<WeightedSeq> {
    WeightedSeq::from_fn(config.clone(), |_| cfg.model.initial_value)
}

fn growth_value(config: &Configuration) -> Value {
    match estimate_growth_constant(config) {
        Ok(n) => json!(n),
        Err(_) => json!("n/a"),
    }
}

pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<bool> {
    let config = build_configuration(cfg)?;
    let mut histogram: BTreeMap<usize, usize> = BTreeMap::new();
    for d in config.degrees() {
        *histogram.entry(d).or_default() += 1;
    }
    let argmax = growth_argmax(&config).ok().map(|(site, _)| site);
    let summability = degree_summability_check(&config, cfg.scale.a_low)?;
    let report = json!({
        "config": cfg,
        "n_sites": config.len(),
        "growth_constant": growth_value(&config),
        "growth_argmax_site": argmax,
        "degree_histogram": histogram,
        "summability": summability,
    });
    write_json(&cfg.output_dir.join("growth_report.json"), &report)?;
    Ok(true)
}

type LevelRuns = (ModelSpec, WeightedSeq, Vec<Vec<usize>>, Vec<crate::sde::PathEnsemble>);

fn level_fields(cfg: &ExperimentConfig, config: &Arc<Configuration>) -> Result<LevelRuns> {
    let model = cfg.model_spec()?;
    let zeta = initial_data(cfg, config)?;
    let levels = exhaustion_sequence(config, cfg.simulation.levels)?;
    let params = cfg.simulation_params()?;
    let ensembles = simulate_levels(&model, &levels, &zeta, &params)?;
    Ok((model, zeta, levels, ensembles))
}

pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<bool> {
    let config = build_configuration(cfg)?;
    let (model, _zeta, levels, ensembles) = level_fields(cfg, &config)?;
    let dir = &cfg.output_dir;
    let mut level_reports = Vec::new();
    let mut clean = true;
    for (j, e) in ensembles.iter().enumerate() {
        let level = j + 1;
        e.write_trajectories_csv(csv_file(dir, &format!("trajectories_level{level}.csv"))?, cfg.simulation.dump_paths)?;
        write_json(&dir.join(format!("ensemble_level{level}.json")), &e.summary())?;
        if e.has_blow_up() {
            clean = false;
            level_reports.push(json!({ "level": level, "active_sites": levels[j].len(), "blow_ups": e.blow_ups() }));
            continue;
        }
        let field = moment_field(e, model.p)?;
        field.write_csv(csv_file(dir, &format!("moments_level{level}.csv"))?)?;
        let norms: Vec<Value> =
            cfg.report_alphas.iter().map(|&a| json!({ "alpha": a, "z_norm": z_norm(&field, a) })).collect();
        level_reports.push(json!({ "level": level, "active_sites": levels[j].len(), "z_norms": norms }));
    }
    let exit = match ensembles.last() {
        Some(e) if !config.is_empty() => Some(exit_time_diagnostic(e, &cfg.simulation.exit_thresholds)?),
        _ => None,
    };
    let report = json!({
        "config": cfg,
        "n_sites": config.len(),
        "estimator": "upper-bound (sitewise sup over time)",
        "levels": level_reports,
        "exit_times": exit,
        "ok": clean,
    });
    write_json(&dir.join("simulate_report.json"), &report)?;
    Ok(clean)
}

fn picard_operator(cfg: &ExperimentConfig, config: &Arc<Configuration>) -> Result<BandedOperator> {
    let pc = &cfg.picard;
    let degrees = config.degrees();
    BandedOperator::from_fn(config.clone(), pc.band_constant, pc.band_exponent, |x, _| match pc.pattern {
        Pattern::Uniform => pc.band_constant,
        Pattern::Degree => pc.band_constant * (degrees[x] as f64).powf(pc.band_exponent),
    })
}

#[derive(Debug, Serialize)]
struct Check {
    name: String,
    ok: bool,
    detail: Value,
}

pub fn cmd_verify(cfg: &ExperimentConfig) -> Result<bool> {
    if cfg.simulation.levels < 3 {
        return Err(invalid("verify needs at least three truncation levels"));
    }
    let config = build_configuration(cfg)?;
    let dir = &cfg.output_dir;
    let s = &cfg.scale;
    let alpha = cfg.report_alphas[0];
    let mut checks = Vec::new();

    let model = cfg.model_spec()?;
    let diss = check_dissipativity(
        &model,
        cfg.verify.dissipativity_samples,
        cfg.verify.dissipativity_range,
        cfg.seed.wrapping_add(2),
    )?;
    checks.push(Check { name: "model_conditions".into(), ok: diss.ok(), detail: json!(diss) });

    let summability = degree_summability_check(&config, s.a_low)?;
    let summable = summability.partial_sum.is_finite() && summability.tail_bound.is_finite();
    checks.push(Check { name: "degree_summability".into(), ok: summable, detail: json!(summability) });

    let q = picard_operator(cfg, &config)?;
    let mut constants = json!({ "growth_constant": growth_value(&config) });
    if config.is_empty() {
        checks.push(Check { name: "ovs_bound".into(), ok: true, detail: json!("empty configuration") });
    } else {
        let ovs = verify_ovs_bound(&q, s.a_low, s.a_low, alpha, cfg.verify.ovs_trials, cfg.seed.wrapping_add(2))?;
        let k = norm_bound_series(ovs.ovs_constant, s.horizon, cfg.picard.order, s.a_low, alpha, SERIES_TOL)?;
        let printed = printed_norm_series(ovs.ovs_constant, s.horizon, cfg.picard.order, s.a_low, alpha, SERIES_TOL)?;
        constants["L"] = json!(ovs.ovs_constant);
        constants["K"] = json!(k);
        constants["K_printed_variant"] = json!(printed);
        checks.push(Check { name: "ovs_bound".into(), ok: ovs.ok, detail: json!(ovs) });

        let opts = EvolutionOptions { a_low: s.a_low, report_weight: alpha, steps: cfg.picard.steps };
        let z0 = WeightedSeq::from_fn(config.clone(), |x| cfg.model.initial_value.abs().powf(s.p) + (x % 3) as f64)?;
        let sol = solve_linear_evolution(&q, &z0, s.horizon, cfg.picard.tol, &opts)?;
        let lhs = crate::spaces::weighted_l1(&config, sol.solution.last().values(), alpha);
        let rhs = k.ln_value + crate::spaces::weighted_l1(&config, z0.values(), s.a_low).ln();
        let ok = lhs == 0.0 || lhs.ln() <= rhs;
        checks.push(Check {
            name: "norm_bound".into(),
            ok,
            detail: json!({ "norm_beta_final": lhs, "ln_bound": rhs, "iterations": sol.iterations }),
        });

        let zero = GridFunction::new(
            sol.solution.times().to_vec(),
            vec![WeightedSeq::zeros(config.clone()); sol.solution.times().len()],
        )?;
        let half = z0.scaled(0.5);
        let sub = solve_linear_evolution(&q, &half, s.horizon, cfg.picard.tol, &opts)?.solution;
        let mut outcomes = Vec::new();
        let mut all = true;
        for (name, g) in [("zero", &zero), ("half_initial_data", &sub), ("solution", &sol.solution)] {
            let out = comparison_check(&q, &z0, g)?;
            all &= out.ok();
            outcomes.push(json!({ "g": name, "outcome": out }));
        }
        checks.push(Check { name: "comparison".into(), ok: all, detail: json!(outcomes) });
    }

    let (model, zeta, levels, ensembles) = level_fields(cfg, &config)?;
    let blown: Vec<_> = ensembles.iter().flat_map(|e| e.blow_ups().iter().copied()).collect();
    if !blown.is_empty() {
        checks.push(Check { name: "simulation".into(), ok: false, detail: json!({ "blow_ups": blown }) });
    } else if !config.is_empty() {
        let fields: Vec<MomentField> = ensembles.iter().map(|e| moment_field(e, model.p)).collect::<Result<_>>()?;
        fields.last().expect("levels >= 3").write_csv(csv_file(dir, "moments.csv")?)?;
        let ceiling = moment_ceiling(&model, &zeta, s.a_low, alpha, s.horizon)?;
        let tail = tail_bound_check(&fields, alpha, &ceiling)?;
        constants["moment_constants"] = json!(ceiling.constants);
        constants["moment_L"] = json!(ceiling.ovs_constant);
        constants["moment_K"] = json!(ceiling.series);
        constants["ln_moment_ceiling"] = json!(ceiling.ln_ceiling);
        checks.push(Check { name: "tail_bound".into(), ok: tail.ok(), detail: json!(tail) });

        let cauchy = cauchy_diagnostic(&model, &levels, &ensembles, s.a_low, alpha)?;
        cauchy.write_csv(csv_file(dir, "cauchy_table.csv")?)?;
        constants["cauchy_L"] = json!(cauchy.cauchy_ovs_constant);
        checks.push(Check { name: "cauchy".into(), ok: cauchy.ok(), detail: json!(cauchy) });
    }

    let all_ok = checks.iter().all(|c| c.ok);
    let report = json!({
        "config": cfg,
        "n_sites": config.len(),
        "constants": constants,
        "checks": checks,
        "all_ok": all_ok,
    });
    write_json(&dir.join("report.json"), &report)?;
    Ok(all_ok)
}

pub fn cmd_picard(cfg: &ExperimentConfig) -> Result<bool> {
    let config = build_configuration(cfg)?;
    let dir = &cfg.output_dir;
    let s = &cfg.scale;
    let alpha = cfg.report_alphas[0];
    let q = picard_operator(cfg, &config)?;
    q.write_csv(csv_file(dir, "operator.csv")?)?;
    let z0 = initial_data(cfg, &config)?;
    let opts = EvolutionOptions { a_low: s.a_low, report_weight: alpha, steps: cfg.picard.steps };
    let sol = solve_linear_evolution(&q, &z0, s.horizon, cfg.picard.tol, &opts)?;
    sol.solution.write_csv(csv_file(dir, "picard.csv")?)?;

    let mut report = json!({
        "config": cfg,
        "n_sites": config.len(),
        "iterations": sol.iterations,
        "iteration_cap": sol.iteration_cap,
        "increments": sol.increments,
    });
    let mut ok = true;
    if !config.is_empty() {
        let l = q.ovs_constant(s.a_low)?;
        let k = norm_bound_series(l, s.horizon, cfg.picard.order, s.a_low, alpha, SERIES_TOL)?;
        let z0_alpha = lp_norm(&z0, s.a_low, 1.0)?;
        let gap = s.horizon * crate::spaces::weighted_l1(&config, q.apply(&z0)?.values(), s.a_low);
        let mut bounds = Vec::new();
        for (n, inc) in sol.increments.iter().enumerate() {
            let ln_bound = iterate_bound_factor(l, s.horizon, cfg.picard.order, s.a_low, alpha, n as u64)? + gap.ln();
            let within = *inc == 0.0 || inc.ln() <= ln_bound + 1e-12;
            ok &= within;
            bounds.push(json!({ "n": n, "increment": inc, "ln_bound": ln_bound, "ok": within }));
        }
        let final_norm = crate::spaces::weighted_l1(&config, sol.solution.last().values(), alpha);
        let norm_ok = final_norm == 0.0 || final_norm.ln() <= k.ln_value + z0_alpha.ln();
        ok &= norm_ok;
        report["growth_constant"] = growth_value(&config);
        report["L"] = json!(l);
        report["K"] = json!(k);
        report["iterate_bounds"] = json!(bounds);
        report["final_norm"] = json!({ "value": final_norm, "ln_bound": k.ln_value + z0_alpha.ln(), "ok": norm_ok });
    }
    report["ok"] = json!(ok);
    write_json(&dir.join("picard_report.json"), &report)?;
    Ok(ok)
}
