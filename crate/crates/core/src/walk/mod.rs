//! The associated random walk, its renewal function, and the walk conditioned
//! to stay nonnegative.

mod conditioned;
mod renewal;

pub use conditioned::{ConditionedSampler, BUCKET_WIDTH, GRID_NODES, TAIL_SIGMAS};
pub use renewal::{
    estimate_renewal, harmonicity_residuals, monte_carlo_renewal, HarmonicityPoint, RenewalConfig, RenewalEstimate,
    RenewalTable,
};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DisplacementParams, ModelSpec};

/// Law of `S₁` under the many-to-one tilt `E[f(S₁)] = E[Σ f(V(u)) e^{−V(u)}]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepLaw {
    Gaussian { mean: f64, sd: f64 },
    /// `±step` with `P(+step) = up`.
    Lattice { step: f64, up: f64 },
}

impl StepLaw {
    pub fn mean(&self) -> f64 {
        match *self {
            StepLaw::Gaussian { mean, .. } => mean,
            StepLaw::Lattice { step, up } => step * (2.0 * up - 1.0),
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            StepLaw::Gaussian { sd, .. } => sd * sd,
            StepLaw::Lattice { step, .. } => {
                let m = self.mean();
                step * step - m * m
            }
        }
    }

    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            StepLaw::Gaussian { mean, sd } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + sd * z
            }
            StepLaw::Lattice { step, up } => {
                if rng.random::<f64>() < up {
                    step
                } else {
                    -step
                }
            }
        }
    }

    pub fn cdf(&self, z: f64) -> f64 {
        match *self {
            StepLaw::Gaussian { mean, sd } => crate::stats::normal_cdf((z - mean) / sd),
            StepLaw::Lattice { step, up } => {
                if z < -step {
                    0.0
                } else if z < step {
                    1.0 - up
                } else {
                    1.0
                }
            }
        }
    }

    pub fn span(&self) -> Option<f64> {
        match *self {
            StepLaw::Lattice { step, .. } => Some(step),
            StepLaw::Gaussian { .. } => None,
        }
    }
}

/// Closed-form tilted step law of a calibrated model.
pub fn step_law(model: &ModelSpec) -> StepLaw {
    let count = model.offspring_count as f64;
    match model.params {
        // e^{-x}-tilt of N(μ, σ²) is N(μ − σ², σ²) with mass e^{σ²/2 − μ}; times count = e^{Φ(1)} = 1
        DisplacementParams::Gaussian { mean, variance } => StepLaw::Gaussian { mean: mean - variance, sd: variance.sqrt() },
        DisplacementParams::Lattice { step, up_prob } => {
            let up = count * up_prob * (-step).exp();
            let down = count * (1.0 - up_prob) * step.exp();
            // normalise away the ~1e-16 calibration residual
            StepLaw::Lattice { step, up: up / (up + down) }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxSteps,
    Event,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkPath {
    pub positions: Vec<f64>,
    pub stopped_reason: StopReason,
}

/// Unconditioned walk path of `steps` steps from `start`.
pub fn simulate_walk<R: Rng + ?Sized>(step: &StepLaw, start: f64, steps: usize, rng: &mut R) -> WalkPath {
    let mut positions = Vec::with_capacity(steps + 1);
    let mut s = start;
    positions.push(s);
    for _ in 0..steps {
        s += step.sample(rng);
        positions.push(s);
    }
    WalkPath { positions, stopped_reason: StopReason::MaxSteps }
}

/// Path of the walk conditioned to stay nonnegative.
pub fn simulate_conditioned_walk<R: Rng + ?Sized>(
    sampler: &ConditionedSampler,
    start: f64,
    steps: usize,
    rng: &mut R,
) -> Result<WalkPath> {
    if start < 0.0 {
        return Err(Error::Domain(format!("conditioned walk needs start ≥ 0, got {start}")));
    }
    let mut positions = Vec::with_capacity(steps + 1);
    let mut s = start;
    positions.push(s);
    for _ in 0..steps {
        s = sampler.step(s, rng)?;
        positions.push(s);
    }
    Ok(WalkPath { positions, stopped_reason: StopReason::MaxSteps })
}

/// `P_x(∃n: S⁺_n < y) = 1 − R(x−y)/R(x)`.
pub fn hitting_probability(table: &RenewalTable, x: f64, y: f64) -> Result<f64> {
    if !(y >= 0.0 && y <= x) {
        return Err(Error::Domain(format!("hitting probability needs 0 ≤ y ≤ x, got x={x}, y={y}")));
    }
    Ok(1.0 - table.renewal_eval(x - y)? / table.renewal_eval(x)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::stats::MeanVar;
    use std::f64::consts::LN_2;

    #[test]
    fn gaussian_boundary_step_is_centred() {
        let s = step_law(&ModelSpec::gaussian_boundary());
        assert!(s.mean().abs() < 1e-12);
        assert!((s.variance() - 2.0 * LN_2).abs() < 1e-12);
    }

    #[test]
    fn lattice_boundary_step_is_symmetric() {
        let s = step_law(&ModelSpec::lattice_boundary());
        let StepLaw::Lattice { up, .. } = s else { unreachable!() };
        assert!((up - 0.5).abs() < 1e-12);
    }

    #[test]
    fn subcritical_step_has_positive_drift() {
        let s = step_law(&ModelSpec::gaussian_subcritical(1.0).unwrap());
        assert!((s.mean() - (LN_2 - 0.5)).abs() < 1e-12);
        let m = ModelSpec::gaussian_subcritical(1.0).unwrap();
        assert!((s.mean() + m.biggins_derivative(1.0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn gaussian_step_moments_by_quadrature() {
        // tilt N(μ,σ²) by 2e^{-x} and integrate numerically
        let m = ModelSpec::gaussian_boundary();
        let DisplacementParams::Gaussian { mean, variance } = m.params else { unreachable!() };
        let sd = variance.sqrt();
        let (lo, hi, n) = (mean - 15.0 * sd, mean + 15.0 * sd, 100_000);
        let h = (hi - lo) / n as f64;
        let (mut m0, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for i in 0..=n {
            let x = lo + i as f64 * h;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 } * h;
            let d = 2.0 * (-x).exp() * (-(x - mean).powi(2) / (2.0 * variance)).exp()
                / (sd * (2.0 * std::f64::consts::PI).sqrt());
            m0 += w * d;
            m1 += w * d * x;
            m2 += w * d * x * x;
        }
        let s = step_law(&m);
        assert!((m0 - 1.0).abs() < 1e-9);
        assert!((m1 - s.mean()).abs() < 1e-8);
        assert!((m2 - m1 * m1 - s.variance()).abs() < 1e-8);
    }

    #[test]
    fn step_sampling_matches_analytic_mean() {
        for m in [ModelSpec::gaussian_boundary(), ModelSpec::lattice_subcritical(0.8).unwrap()] {
            let s = step_law(&m);
            let mut r = rng::stream(2, "step", 0);
            let acc: MeanVar = (0..1_000_000).map(|_| s.sample(&mut r)).collect();
            assert!((acc.mean - s.mean()).abs() < 3.0 * acc.std_err());
        }
    }

    #[test]
    fn centred_walk_has_zero_mean_endpoint() {
        let s = step_law(&ModelSpec::lattice_boundary());
        let mut acc = MeanVar::default();
        for i in 0..20_000 {
            let mut r = rng::stream(4, "walk", i);
            acc.push(*simulate_walk(&s, 0.0, 1000, &mut r).positions.last().unwrap());
        }
        assert!(acc.mean.abs() < 3.0 * acc.std_err());
    }
}
