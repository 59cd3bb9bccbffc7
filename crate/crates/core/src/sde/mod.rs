//! The dissipative interacting model and its truncated Itô dynamics.
//!
//! Drift `Φ_x(q, Z) = V(q) + sum_{y ∈ B_x} a(|x - y|) z_y` (the self term
//! `y = x` included) and diffusion `Ψ_x(q, Z) = σ0 + σ1 q + σ2 n_x sum_{y ∈ B_x} z_y`.

pub mod simulate;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::Configuration;
use crate::spaces::WeightedSeq;

pub use simulate::{exit_time_diagnostic, simulate_truncated, ExitTimeReport, PathEnsemble, Scheme, SimulationParams};

/// One-particle potential `V`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Potential {
    /// `V(q) = -λ q`.
    Linear { lambda: f64 },
    /// `V(q) = b q - q^3`.
    Cubic { b: f64 },
    /// Any other potential; its constants must be declared explicitly.
    #[serde(skip)]
    Custom(fn(f64) -> f64),
}

impl Potential {
    pub fn eval(&self, q: f64) -> f64 {
        match *self {
            Potential::Linear { lambda } => -lambda * q,
            Potential::Cubic { b } => b * q - q * q * q,
            Potential::Custom(v) => v(q),
        }
    }

    pub fn is_superlinear(&self) -> bool {
        !matches!(self, Potential::Linear { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelShape {
    /// `a(r) = cap` on `[0, ρ]`.
    Constant,
    /// `a(r) = cap (1 - r/ρ)` on `[0, ρ]`.
    Triangular,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub shape: KernelShape,
    /// `ā`, an upper bound for `a`.
    pub cap: f64,
}

impl Kernel {
    pub fn none() -> Self {
        Self { shape: KernelShape::Constant, cap: 0.0 }
    }

    pub fn eval(&self, r: f64, rho: f64) -> f64 {
        if r > rho {
            return 0.0;
        }
        match self.shape {
            KernelShape::Constant => self.cap,
            KernelShape::Triangular => self.cap * (1.0 - r / rho),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Diffusion {
    pub sigma0: f64,
    pub sigma1: f64,
    pub sigma2: f64,
}

impl Diffusion {
    /// `σ0 + σ1 q + σ2 n_x s` where `s = sum_{y ∈ B_x} z_y`.
    pub fn eval(&self, q: f64, degree: usize, neighbor_sum: f64) -> f64 {
        self.sigma0 + self.sigma1 * q + self.sigma2 * degree as f64 * neighbor_sum
    }

    pub fn is_zero(&self) -> bool {
        self.sigma0 == 0.0 && self.sigma1 == 0.0 && self.sigma2 == 0.0
    }
}

/// Constants of the growth, dissipativity and Lipschitz conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConstants {
    /// `|V(q)| <= c (1 + |q|^R)` and `|Ψ(0,0)| <= c`.
    pub c: f64,
    /// Growth exponent `R`.
    pub growth_exponent: f64,
    /// `(q1 - q2)(V(q1) - V(q2)) <= b (q1 - q2)^2`.
    pub b: f64,
    pub m1: f64,
    pub m2: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ModelSpec {
    pub potential: Potential,
    pub kernel: Kernel,
    pub diffusion: Diffusion,
    pub constants: ModelConstants,
    /// Moment order `p >= 2`.
    pub p: f64,
}

impl ModelSpec {
    /// Builds a model with constants derived from the built-in functional forms.
    pub fn new(potential: Potential, kernel: Kernel, diffusion: Diffusion, p: f64) -> Result<Self> {
        let s0 = diffusion.sigma0;
        let (c, growth_exponent, b) = match potential {
            Potential::Linear { lambda } => (lambda.max(s0), 1.0, -lambda),
            Potential::Cubic { b } => ((1.0 + b.abs()).max(s0), 3.0, b),
            Potential::Custom(_) => {
                return Err(invalid("custom potentials need explicit constants (use with_constants)"))
            }
        };
        let constants = ModelConstants { c, growth_exponent, b, m1: diffusion.sigma1, m2: diffusion.sigma2 };
        Self::with_constants(potential, kernel, diffusion, constants, p)
    }

    /// Builds a model with declared constants; consistency is what
    /// [`check_dissipativity`] probes.
    pub fn with_constants(
        potential: Potential,
        kernel: Kernel,
        diffusion: Diffusion,
        constants: ModelConstants,
        p: f64,
    ) -> Result<Self> {
        let spec = Self { potential, kernel, diffusion, constants, p };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p >= 2.0 && self.p.is_finite()) {
            return Err(invalid(format!("moment order p must be >= 2, got {}", self.p)));
        }
        match self.potential {
            Potential::Linear { lambda } if !(lambda > 0.0 && lambda.is_finite()) => {
                return Err(invalid(format!("linear potential needs lambda > 0, got {lambda}")));
            }
            Potential::Cubic { b } if !b.is_finite() => return Err(invalid("cubic b must be finite")),
            _ => {}
        }
        if !(self.kernel.cap >= 0.0 && self.kernel.cap.is_finite()) {
            return Err(invalid("kernel cap must be finite and >= 0"));
        }
        let d = self.diffusion;
        if [d.sigma0, d.sigma1, d.sigma2].iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(invalid("diffusion coefficients must be finite and >= 0"));
        }
        let k = self.constants;
        if !(k.c >= 0.0 && k.growth_exponent > 0.0 && k.m1 >= 0.0 && k.m2 >= 0.0 && k.b.is_finite()) {
            return Err(invalid("model constants need c >= 0, R > 0, M1, M2 >= 0"));
        }
        if k.growth_exponent > self.p {
            return Err(invalid(format!(
                "growth exponent R = {} exceeds moment order p = {}",
                k.growth_exponent, self.p
            )));
        }
        Ok(())
    }

    /// `Φ_x(q, Z)`.
    pub fn drift(&self, z: &WeightedSeq, x: usize, q: f64) -> f64 {
        let config = z.config();
        let rho = config.rho();
        let coupling: f64 =
            config.neighbors(x).iter().map(|&y| self.kernel.eval(config.distance(x, y), rho) * z.values()[y]).sum();
        self.potential.eval(q) + coupling
    }

    /// `Ψ_x(q, Z)`.
    pub fn diffusion(&self, z: &WeightedSeq, x: usize, q: f64) -> f64 {
        let config = z.config();
        let sum: f64 = config.neighbors(x).iter().map(|&y| z.values()[y]).sum();
        self.diffusion.eval(q, config.degree(x), sum)
    }

    /// `ã_x = (sum_{y ∈ B_x} a(|x - y|)^2)^{1/2}` for every site.
    pub fn kernel_norms(&self, config: &Configuration) -> Vec<f64> {
        let rho = config.rho();
        (0..config.len())
            .map(|x| {
                config
                    .neighbors(x)
                    .iter()
                    .map(|&y| self.kernel.eval(config.distance(x, y), rho).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Witness {
    pub condition: char,
    pub q1: f64,
    pub q2: f64,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DissipativityReport {
    pub c_ok: bool,
    pub d_ok: bool,
    pub e_ok: bool,
    /// Closed-form verdict on condition D for built-in potentials.
    pub d_analytic: Option<bool>,
    pub witnesses: Vec<Witness>,
}

impl DissipativityReport {
    pub fn ok(&self) -> bool {
        self.c_ok && self.d_ok && self.e_ok
    }
}

const CONDITION_SLACK: f64 = 1e-9;

fn exceeds(lhs: f64, rhs: f64) -> bool {
    lhs > rhs + CONDITION_SLACK * rhs.abs().max(1.0)
}

/// Probes conditions C, D and E on deterministic corner pairs in `[-qbar, qbar]`
/// and then on `samples` random pairs. Violations are returned as witnesses
/// (at most one per condition).
pub fn check_dissipativity(model: &ModelSpec, samples: usize, qbar: f64, seed: u64) -> Result<DissipativityReport> {
    if !(qbar > 0.0 && qbar.is_finite()) || samples == 0 {
        return Err(invalid("check_dissipativity needs qbar > 0 and samples >= 1"));
    }
    let k = model.constants;
    let v = |q: f64| model.potential.eval(q);
    let mut pairs = vec![(qbar, 0.0), (-qbar, 0.0), (qbar, -qbar), (0.5 * qbar, 0.0), (qbar, 0.5 * qbar)];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs.extend((0..samples).map(|_| (rng.random_range(-qbar..=qbar), rng.random_range(-qbar..=qbar))));

    let mut witnesses = Vec::new();
    let mut record = |w: Witness, flag: &mut bool| {
        if *flag {
            witnesses.push(w);
        }
        *flag = false;
    };
    let (mut c_ok, mut d_ok, mut e_ok) = (true, true, true);

    let psi00 = model.diffusion.eval(0.0, 1, 0.0).abs();
    if exceeds(psi00, k.c) {
        record(Witness { condition: 'E', q1: 0.0, q2: 0.0, lhs: psi00, rhs: k.c }, &mut e_ok);
    }
    for &(q1, q2) in &pairs {
        for q in [q1, q2] {
            let lhs = v(q).abs();
            let rhs = k.c * (1.0 + q.abs().powf(k.growth_exponent));
            if exceeds(lhs, rhs) {
                record(Witness { condition: 'C', q1: q, q2: 0.0, lhs, rhs }, &mut c_ok);
            }
        }
        let dq = q1 - q2;
        let lhs = dq * (v(q1) - v(q2));
        let rhs = k.b * dq * dq;
        if exceeds(lhs, rhs) {
            record(Witness { condition: 'D', q1, q2, lhs, rhs }, &mut d_ok);
        }
    }
    // Lipschitz condition on random neighbourhoods of up to eight sites.
    for _ in 0..samples {
        let n = rng.random_range(1..=8usize);
        let q1 = rng.random_range(-qbar..=qbar);
        let q2 = rng.random_range(-qbar..=qbar);
        let z1: Vec<f64> = (0..n).map(|_| rng.random_range(-qbar..=qbar)).collect();
        let z2: Vec<f64> = (0..n).map(|_| rng.random_range(-qbar..=qbar)).collect();
        let lhs = (model.diffusion.eval(q1, n, z1.iter().sum()) - model.diffusion.eval(q2, n, z2.iter().sum())).abs();
        let dz: f64 = z1.iter().zip(&z2).map(|(a, b)| (a - b).abs()).sum();
        let rhs = k.m1 * (q1 - q2).abs() + k.m2 * n as f64 * dz;
        if exceeds(lhs, rhs) {
            record(Witness { condition: 'E', q1, q2, lhs, rhs }, &mut e_ok);
        }
    }

    let d_analytic = match model.potential {
        Potential::Linear { lambda } => Some(k.b >= -lambda),
        Potential::Cubic { b } => Some(k.b >= b),
        Potential::Custom(_) => None,
    };
    if d_analytic == Some(false) {
        d_ok = false;
    }
    Ok(DissipativityReport { c_ok, d_ok, e_ok, d_analytic, witnesses })
}

/// Mean and second moment of `dξ = -λ ξ dt + σ dW`, `ξ_0 = xi0`.
pub fn ou_moment_oracle(lambda: f64, sigma: f64, xi0: f64, t: f64) -> Result<(f64, f64)> {
    if !(lambda > 0.0) {
        return Err(invalid(format!("OU oracle needs lambda > 0, got {lambda}")));
    }
    if !(t >= 0.0 && sigma >= 0.0) {
        return Err(invalid("OU oracle needs t >= 0 and sigma >= 0"));
    }
    let decay = (-lambda * t).exp();
    let mean = xi0 * decay;
    let second = xi0 * xi0 * decay * decay + sigma * sigma * (-(-2.0 * lambda * t).exp_m1()) / (2.0 * lambda);
    Ok((mean, second))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;

    fn cubic(b: f64, cap: f64) -> ModelSpec {
        ModelSpec::new(Potential::Cubic { b }, Kernel { shape: KernelShape::Constant, cap }, Diffusion::default(), 4.0)
            .unwrap()
    }

    #[test]
    fn cubic_isolated_drift() {
        let c = Arc::new(Configuration::from_points(&[vec![0.0], vec![5.0]], 1, 1.0, 6.0).unwrap());
        let z = WeightedSeq::new(c, vec![0.7, 100.0]).unwrap();
        assert_eq!(cubic(0.0, 0.0).drift(&z, 0, 2.0), -8.0);
        assert!((cubic(0.0, 0.5).drift(&z, 0, 2.0) - (-8.0 + 0.5 * 0.7)).abs() < 1e-15);
    }

    #[test]
    fn zero_state_zero_drift() {
        let c = Arc::new(Configuration::from_points(&[vec![0.0], vec![0.5]], 1, 1.0, 6.0).unwrap());
        let z = WeightedSeq::zeros(c);
        let lin = ModelSpec::new(Potential::Linear { lambda: 1.0 }, Kernel::none(), Diffusion::default(), 2.0).unwrap();
        assert_eq!(lin.drift(&z, 0, 0.0), 0.0);
        assert_eq!(cubic(1.0, 0.3).drift(&z, 1, 0.0), 0.0);
    }

    #[test]
    fn linear_two_term_drift() {
        let c = Arc::new(Configuration::from_points(&[vec![0.0], vec![0.5]], 1, 1.0, 6.0).unwrap());
        let z = WeightedSeq::new(c, vec![0.0, 4.0]).unwrap();
        let m = ModelSpec::new(
            Potential::Linear { lambda: 1.0 },
            Kernel { shape: KernelShape::Constant, cap: 0.5 },
            Diffusion::default(),
            2.0,
        )
        .unwrap();
        assert_eq!(m.drift(&z, 0, 1.0), 1.0);
    }

    #[test]
    fn diffusion_examples() {
        let c = Arc::new(Configuration::from_points(&[vec![0.0]], 1, 1.0, 6.0).unwrap());
        let z = WeightedSeq::new(c, vec![1.0]).unwrap();
        let mk = |d: Diffusion| ModelSpec::new(Potential::Linear { lambda: 1.0 }, Kernel::none(), d, 2.0).unwrap();
        assert_eq!(mk(Diffusion { sigma0: 1.0, ..Default::default() }).diffusion(&z, 0, 3.0), 1.0);
        assert_eq!(mk(Diffusion::default()).diffusion(&z, 0, 3.0), 0.0);
        let d = Diffusion { sigma0: 0.0, sigma1: 2.0, sigma2: 0.1 };
        assert!((mk(d).diffusion(&z, 0, 3.0) - 6.1).abs() < 1e-15);
    }

    #[test]
    fn triangular_kernel_norm() {
        let c = Configuration::from_points(&[vec![0.0], vec![0.5]], 1, 1.0, 6.0).unwrap();
        let m = ModelSpec::new(
            Potential::Linear { lambda: 1.0 },
            Kernel { shape: KernelShape::Triangular, cap: 2.0 },
            Diffusion::default(),
            2.0,
        )
        .unwrap();
        let norms = m.kernel_norms(&c);
        assert!((norms[0] - (4.0f64 + 1.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn built_in_conditions_hold() {
        let r = check_dissipativity(&cubic(0.0, 0.0), 1000, 10.0, 1).unwrap();
        assert!(r.ok(), "{r:?}");
        assert_eq!(r.d_analytic, Some(true));
        let lin = ModelSpec::new(
            Potential::Linear { lambda: 2.0 },
            Kernel::none(),
            Diffusion { sigma0: 1.0, sigma1: 0.5, sigma2: 0.2 },
            2.0,
        )
        .unwrap();
        assert_eq!(lin.constants.b, -2.0);
        assert_eq!(lin.constants.c, 2.0);
        assert_eq!(lin.constants.growth_exponent, 1.0);
        assert!(check_dissipativity(&lin, 1000, 10.0, 2).unwrap().ok());
    }

    #[test]
    fn injected_square_potential_fails_d() {
        let constants = ModelConstants { c: 1.0, growth_exponent: 2.0, b: 0.5, m1: 0.0, m2: 0.0 };
        let m = ModelSpec::with_constants(
            Potential::Custom(|q| q * q),
            Kernel::none(),
            Diffusion::default(),
            constants,
            2.0,
        )
        .unwrap();
        let qbar = 3.0;
        let r = check_dissipativity(&m, 100, qbar, 3).unwrap();
        assert!(!r.d_ok);
        assert!(r.d_analytic.is_none());
        let w = r.witnesses.iter().find(|w| w.condition == 'D').unwrap();
        assert_eq!((w.q1, w.q2), (qbar, 0.0));
    }

    #[test]
    fn understated_constants_are_caught() {
        let mut m = cubic(1.0, 0.0);
        m.constants.b = 0.0;
        m.constants.c = 0.5;
        let r = check_dissipativity(&m, 200, 5.0, 4).unwrap();
        assert!(!r.c_ok && !r.d_ok);
        assert_eq!(r.d_analytic, Some(false));
    }

    #[test]
    fn growth_exponent_above_p_rejected() {
        let err = ModelSpec::new(Potential::Cubic { b: 0.0 }, Kernel::none(), Diffusion::default(), 2.0);
        assert!(err.is_err());
    }

    #[test]
    fn ou_oracle_values() {
        assert_eq!(ou_moment_oracle(1.0, 2.0, 3.0, 0.0).unwrap(), (3.0, 9.0));
        let (m, s) = ou_moment_oracle(2.0, 0.0, 1.5, 0.7).unwrap();
        assert!((m - 1.5 * (-1.4f64).exp()).abs() < 1e-15);
        assert!((s - 2.25 * (-2.8f64).exp()).abs() < 1e-15);
        let (_, s) = ou_moment_oracle(1.0, 2f64.sqrt(), 0.0, 50.0).unwrap();
        assert!((s - 1.0).abs() < 1e-15);
        assert!(ou_moment_oracle(0.0, 1.0, 0.0, 1.0).is_err());
    }
}
