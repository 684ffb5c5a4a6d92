//! Offspring point-process families calibrated so that `Φ(1) = 0`.
//!
//! Both built-in families have exactly two children per particle with iid
//! displacements, which keeps the Biggins transform in closed form:
//!
//! * `GaussianBinary`: `Φ(θ) = ln 2 + θ²σ²/2 − θμ`
//! * `LatticeBinary`:  `Φ(θ) = ln 2 + ln(p e^{−θa} + (1−p) e^{θa})`

use std::f64::consts::LN_2;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;
use crate::stats::MeanVar;

/// Calibration tolerance on `|Φ(1)|` and, in the boundary case, `|Φ'(1)|`.
pub const CALIBRATION_TOL: f64 = 1e-12;
/// Tolerance on `|Φ(κ)|` for subcritical models.
pub const KAPPA_TOL: f64 = 1e-10;
/// Default lattice step for subcritical lattice models.
pub const DEFAULT_SUBCRITICAL_STEP: f64 = 0.8;
/// Default variance for subcritical Gaussian models.
pub const DEFAULT_SUBCRITICAL_VARIANCE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    GaussianBinary,
    LatticeBinary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// `Φ'(1) < 0`: a second root `κ > 1` exists (possibly `∞`).
    Subcritical,
    /// `Φ'(1) = 0`.
    Boundary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisplacementParams {
    Gaussian { mean: f64, variance: f64 },
    Lattice { step: f64, up_prob: f64 },
}

/// Second root of `Φ`; undefined in the boundary case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kappa {
    Finite(f64),
    Infinite,
    Undefined,
}

impl Kappa {
    pub fn value(self) -> Option<f64> {
        match self {
            Kappa::Finite(k) => Some(k),
            Kappa::Infinite => Some(f64::INFINITY),
            Kappa::Undefined => None,
        }
    }
}

/// Free parameters handed to [`calibrate`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreeParams {
    /// Per-child variance for `GaussianBinary`.
    pub variance: Option<f64>,
    /// Step magnitude for `LatticeBinary`.
    pub step: Option<f64>,
    /// Override for the tail exponent of the truncated martingales (subcritical only).
    pub gamma: Option<f64>,
    /// Override for the MGF-bound exponent (subcritical only).
    pub rho: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub offspring_count: usize,
    pub params: DisplacementParams,
    pub regime: Regime,
    pub kappa: Kappa,
    /// `γ ∈ (1, κ)`, subcritical models only.
    pub gamma: Option<f64>,
    /// `ρ ∈ (1, min(γ, 2)]`, subcritical models only.
    pub rho: Option<f64>,
}

/// One draw of the offspring point process: children positions relative to the parent.
#[derive(Debug, Clone, PartialEq)]
pub struct OffspringSample {
    pub displacements: Vec<f64>,
}

impl ModelSpec {
    pub fn gaussian_boundary() -> Self {
        calibrate(Family::GaussianBinary, FreeParams::default(), Regime::Boundary)
            .expect("built-in calibration")
    }

    pub fn gaussian_subcritical(variance: f64) -> Result<Self> {
        calibrate(
            Family::GaussianBinary,
            FreeParams { variance: Some(variance), ..Default::default() },
            Regime::Subcritical,
        )
    }

    pub fn lattice_boundary() -> Self {
        calibrate(Family::LatticeBinary, FreeParams::default(), Regime::Boundary)
            .expect("built-in calibration")
    }

    pub fn lattice_subcritical(step: f64) -> Result<Self> {
        calibrate(
            Family::LatticeBinary,
            FreeParams { step: Some(step), ..Default::default() },
            Regime::Subcritical,
        )
    }

    /// `Φ(θ)`. Both built-ins are finite on all of ℝ.
    pub fn biggins_transform(&self, theta: f64) -> Result<f64> {
        if !theta.is_finite() {
            return Err(Error::Domain(format!("theta = {theta} outside the finiteness region")));
        }
        Ok(self.phi(theta))
    }

    /// `Φ'(θ)` in closed form.
    pub fn biggins_derivative(&self, theta: f64) -> Result<f64> {
        if !theta.is_finite() {
            return Err(Error::Domain(format!("theta = {theta} outside the finiteness region")));
        }
        Ok(self.dphi(theta))
    }

    fn phi(&self, theta: f64) -> f64 {
        let ln_count = (self.offspring_count as f64).ln();
        match self.params {
            DisplacementParams::Gaussian { mean, variance } => {
                ln_count + theta * theta * variance / 2.0 - theta * mean
            }
            DisplacementParams::Lattice { step, up_prob } => {
                // log-sum-exp keeps large |θ| finite
                let a = ln_or_neg_inf(up_prob) - theta * step;
                let b = ln_or_neg_inf(1.0 - up_prob) + theta * step;
                let m = a.max(b);
                ln_count + m + ((a - m).exp() + (b - m).exp()).ln()
            }
        }
    }

    fn dphi(&self, theta: f64) -> f64 {
        match self.params {
            DisplacementParams::Gaussian { mean, variance } => theta * variance - mean,
            DisplacementParams::Lattice { step, up_prob } => {
                let up = up_prob * (-theta * step).exp();
                let down = (1.0 - up_prob) * (theta * step).exp();
                step * (down - up) / (up + down)
            }
        }
    }

    /// Draws one displacement from the per-child law.
    #[inline]
    pub fn sample_displacement<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.params {
            DisplacementParams::Gaussian { mean, variance } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + variance.sqrt() * z
            }
            DisplacementParams::Lattice { step, up_prob } => {
                if rng.random::<f64>() < up_prob {
                    step
                } else {
                    -step
                }
            }
        }
    }

    /// One iid draw of `Ξ`.
    pub fn sample_offspring<R: Rng + ?Sized>(&self, rng: &mut R) -> OffspringSample {
        OffspringSample {
            displacements: (0..self.offspring_count).map(|_| self.sample_displacement(rng)).collect(),
        }
    }

    /// CDF of one displacement.
    pub fn displacement_cdf(&self, z: f64) -> f64 {
        match self.params {
            DisplacementParams::Gaussian { mean, variance } => {
                crate::stats::normal_cdf((z - mean) / variance.sqrt())
            }
            DisplacementParams::Lattice { step, up_prob } => {
                if z < -step {
                    0.0
                } else if z < step {
                    1.0 - up_prob
                } else {
                    1.0
                }
            }
        }
    }

    pub fn lattice_span(&self) -> Option<f64> {
        match self.params {
            DisplacementParams::Lattice { step, .. } => Some(step),
            DisplacementParams::Gaussian { .. } => None,
        }
    }

    /// Content hash used to key persisted renewal tables and manifests.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("model serializes");
        hex::encode(Sha256::digest(&bytes))[..16].to_string()
    }

    fn check_invariants(&self) -> Result<()> {
        let phi1 = self.phi(1.0);
        let dphi1 = self.dphi(1.0);
        let fail = |message: String| Error::Calibration { message, phi_at_one: phi1, dphi_at_one: dphi1 };
        if phi1.abs() > CALIBRATION_TOL {
            return Err(fail("Φ(1) ≠ 0".into()));
        }
        match self.regime {
            Regime::Boundary => {
                if dphi1.abs() > CALIBRATION_TOL {
                    return Err(fail("boundary regime needs Φ'(1) = 0".into()));
                }
            }
            Regime::Subcritical => {
                if dphi1 >= 0.0 {
                    return Err(fail("subcritical regime needs Φ'(1) < 0".into()));
                }
                let kappa = self.kappa.value().unwrap_or(f64::NAN);
                if kappa.is_finite() && self.phi(kappa).abs() > KAPPA_TOL {
                    return Err(fail(format!("Φ(κ) = {:e} ≠ 0", self.phi(kappa))));
                }
                let (gamma, rho) = (self.gamma.unwrap_or(f64::NAN), self.rho.unwrap_or(f64::NAN));
                if !(gamma > 1.0 && gamma < kappa) {
                    return Err(fail(format!("γ = {gamma} must lie in (1, κ = {kappa})")));
                }
                if !(rho > 1.0 && rho <= gamma.min(2.0)) {
                    return Err(fail(format!("ρ = {rho} must lie in (1, min(γ, 2)]")));
                }
            }
        }
        Ok(())
    }
}

fn ln_or_neg_inf(p: f64) -> f64 {
    if p > 0.0 {
        p.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Solves the standing constraints for the family's remaining parameters.
pub fn calibrate(family: Family, free: FreeParams, regime: Regime) -> Result<ModelSpec> {
    let infeasible = |message: String, phi: f64, dphi: f64| Error::Calibration {
        message,
        phi_at_one: phi,
        dphi_at_one: dphi,
    };
    let (params, kappa) = match (family, regime) {
        (Family::GaussianBinary, Regime::Boundary) => {
            let variance = 2.0 * LN_2;
            if let Some(v) = free.variance {
                if (v - variance).abs() > 1e-12 {
                    let mean = LN_2 + v / 2.0;
                    return Err(infeasible(
                        format!("boundary Gaussian needs σ² = 2 ln 2, got {v}"),
                        0.0,
                        v - mean,
                    ));
                }
            }
            (DisplacementParams::Gaussian { mean: variance, variance }, Kappa::Undefined)
        }
        (Family::GaussianBinary, Regime::Subcritical) => {
            let v = free.variance.unwrap_or(DEFAULT_SUBCRITICAL_VARIANCE);
            let mean = LN_2 + v / 2.0;
            if !(v > 0.0 && v < 2.0 * LN_2) {
                return Err(infeasible(
                    format!("subcritical Gaussian needs 0 < σ² < 2 ln 2, got {v}"),
                    0.0,
                    v - mean,
                ));
            }
            // roots of σ²θ²/2 − μθ + ln 2 multiply to 2 ln 2 / σ²
            (DisplacementParams::Gaussian { mean, variance: v }, Kappa::Finite(2.0 * LN_2 / v))
        }
        (Family::LatticeBinary, Regime::Boundary) => {
            // p e^{-a} = (1-p) e^{a} = 1/4  ⟹  cosh a = 2
            let step = (2.0 + 3f64.sqrt()).ln();
            if let Some(a) = free.step {
                if (a - step).abs() > 1e-12 {
                    return Err(infeasible(
                        format!("boundary lattice needs a = arccosh 2, got {a}"),
                        f64::NAN,
                        f64::NAN,
                    ));
                }
            }
            (
                DisplacementParams::Lattice { step, up_prob: (2.0 + 3f64.sqrt()) / 4.0 },
                Kappa::Undefined,
            )
        }
        (Family::LatticeBinary, Regime::Subcritical) => {
            let a = free.step.unwrap_or(DEFAULT_SUBCRITICAL_STEP);
            let e = a.exp();
            let boundary_step = (2.0 + 3f64.sqrt()).ln();
            if !(a >= LN_2 && a < boundary_step) {
                return Err(infeasible(
                    format!("subcritical lattice needs ln 2 ≤ a < arccosh 2, got {a}"),
                    f64::NAN,
                    f64::NAN,
                ));
            }
            let p = ((e - 0.5) / (e - 1.0 / e)).min(1.0);
            // second root: (1-p) t² − t/2 + p = 0 with t = e^{θa}, other root t = e^{a}
            let kappa = if p >= 1.0 {
                Kappa::Infinite
            } else {
                Kappa::Finite((p / ((1.0 - p) * e)).ln() / a)
            };
            (DisplacementParams::Lattice { step: a, up_prob: p }, kappa)
        }
    };
    let (gamma, rho) = match (regime, kappa.value()) {
        (Regime::Subcritical, Some(k)) => {
            let gamma = free.gamma.unwrap_or(if k.is_finite() { (1.0 + k) / 2.0 } else { 2.0 });
            let rho = free.rho.unwrap_or(gamma.min(2.0));
            (Some(gamma), Some(rho))
        }
        _ => (None, None),
    };
    let spec = ModelSpec { family, offspring_count: 2, params, regime, kappa, gamma, rho };
    spec.check_invariants()?;
    Ok(spec)
}

/// Monte Carlo estimate of `Φ(θ)` with its delta-method standard error.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TransformEstimate {
    pub theta: f64,
    pub analytic: f64,
    pub estimate: f64,
    pub std_err: f64,
}

pub fn estimate_transform(model: &ModelSpec, theta: f64, draws: u64, seed: u64) -> Result<TransformEstimate> {
    let analytic = model.biggins_transform(theta)?;
    let mut rng = rng::stream(seed, "phi-hat", theta.to_bits());
    let acc: MeanVar = (0..draws)
        .map(|_| {
            (0..model.offspring_count)
                .map(|_| (-theta * model.sample_displacement(&mut rng)).exp())
                .sum::<f64>()
        })
        .collect();
    Ok(TransformEstimate {
        theta,
        analytic,
        estimate: acc.mean.ln(),
        std_err: acc.std_err() / acc.mean,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Finite,
    Inconclusive,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub mean: f64,
    pub std_err: f64,
    /// Running mean at half the sample size, for the Cauchy check.
    pub half_sample_mean: f64,
    /// Largest single term divided by the total.
    pub max_term_share: f64,
    pub verdict: Verdict,
}

impl MomentEstimate {
    fn from_terms(terms: &[f64]) -> Self {
        let acc = MeanVar::from_slice(terms);
        let half = MeanVar::from_slice(&terms[..terms.len() / 2]);
        let total: f64 = terms.iter().sum();
        let max_term = terms.iter().cloned().fold(0.0, f64::max);
        let max_term_share = if total > 0.0 { max_term / total } else { 0.0 };
        let drift = (acc.mean - half.mean).abs();
        let stable = drift <= 3.0 * half.std_err().max(acc.std_err()) + 1e-12 * acc.mean.abs();
        let verdict = if acc.mean.is_finite() && stable && max_term_share < 0.5 {
            Verdict::Finite
        } else {
            Verdict::Inconclusive
        };
        MomentEstimate { mean: acc.mean, std_err: acc.std_err(), half_sample_mean: half.mean, max_term_share, verdict }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentReport {
    pub delta: f64,
    pub samples: u64,
    /// `E[e^{δX}]` with `X = Σ [1 + V₊] e^{−V}`.
    pub mgf_x: MomentEstimate,
    /// `E[X e^{δX}]`.
    pub x_mgf_x: MomentEstimate,
    /// `E[e^{δ W₁(γ)}]`, `W₁(γ) = Σ e^{−γV}`; subcritical models only.
    pub mgf_w_gamma: Option<MomentEstimate>,
    /// Deterministic bound on `X` when one exists (lattice family).
    pub x_upper_bound: Option<f64>,
}

/// Monte Carlo exponential-moment diagnostics for the hypotheses on `X` and `W₁(γ)`.
pub fn moment_diagnostics(model: &ModelSpec, delta: f64, samples: u64, seed: u64) -> Result<MomentReport> {
    if !(delta >= 0.0) {
        return Err(Error::Domain(format!("delta must be ≥ 0, got {delta}")));
    }
    if samples < 2 {
        return Err(Error::Domain("need at least two samples".into()));
    }
    let mut rng = rng::stream(seed, "moments", 0);
    let n = samples as usize;
    let (mut e_x, mut x_e_x, mut e_w) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let draw = model.sample_offspring(&mut rng);
        let x: f64 = draw.displacements.iter().map(|&v| (1.0 + v.max(0.0)) * (-v).exp()).sum();
        let ex = (delta * x).exp();
        e_x.push(ex);
        x_e_x.push(x * ex);
        if let Some(g) = model.gamma {
            let w: f64 = draw.displacements.iter().map(|&v| (-g * v).exp()).sum();
            e_w.push((delta * w).exp());
        }
    }
    Ok(MomentReport {
        delta,
        samples,
        mgf_x: MomentEstimate::from_terms(&e_x),
        x_mgf_x: MomentEstimate::from_terms(&x_e_x),
        mgf_w_gamma: model.gamma.map(|_| MomentEstimate::from_terms(&e_w)),
        x_upper_bound: model.lattice_span().map(|a| 2.0 * (1.0 + a) * a.exp()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn transform_at_zero_is_ln_two() {
        for m in [
            ModelSpec::gaussian_boundary(),
            ModelSpec::lattice_boundary(),
            ModelSpec::gaussian_subcritical(1.0).unwrap(),
            ModelSpec::lattice_subcritical(0.8).unwrap(),
        ] {
            assert!((m.biggins_transform(0.0).unwrap() - LN_2).abs() < 1e-15);
            assert!(m.biggins_transform(1.0).unwrap().abs() <= CALIBRATION_TOL);
        }
    }

    #[test]
    fn gaussian_subcritical_second_root() {
        let m = ModelSpec::gaussian_subcritical(1.0).unwrap();
        let DisplacementParams::Gaussian { mean, .. } = m.params else { unreachable!() };
        assert!((mean - 1.1931).abs() < 1e-4);
        let kappa = m.kappa.value().unwrap();
        assert!((kappa - 2.0 * LN_2).abs() < 1e-15);
        assert!(m.biggins_transform(kappa).unwrap().abs() < 1e-12);
        assert!(m.biggins_derivative(1.0).unwrap() < 0.0);
        assert!((m.gamma.unwrap() - (1.0 + kappa) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn lattice_boundary_solves_both_constraints() {
        let m = ModelSpec::lattice_boundary();
        let DisplacementParams::Lattice { step, up_prob } = m.params else { unreachable!() };
        assert!((step.cosh() - 2.0).abs() < 1e-12);
        assert!((step - 1.3170).abs() < 1e-4);
        assert!((up_prob - 0.9330).abs() < 1e-4);
        assert!(m.biggins_derivative(1.0).unwrap().abs() < 1e-12);
        assert_eq!(m.kappa, Kappa::Undefined);
    }

    #[test]
    fn gaussian_boundary_variance_is_two_ln_two() {
        let m = ModelSpec::gaussian_boundary();
        assert_eq!(
            m.params,
            DisplacementParams::Gaussian { mean: 2.0 * LN_2, variance: 2.0 * LN_2 }
        );
        assert!(m.biggins_derivative(1.0).unwrap().abs() < 1e-15);
    }

    #[test]
    fn lattice_subcritical_kappa_is_a_root() {
        let m = ModelSpec::lattice_subcritical(0.8).unwrap();
        let k = m.kappa.value().unwrap();
        assert!(k > 1.0 && k.is_finite());
        assert!(m.biggins_transform(k).unwrap().abs() < KAPPA_TOL);
        let edge = ModelSpec::lattice_subcritical(LN_2).unwrap();
        assert_eq!(edge.kappa, Kappa::Infinite);
    }

    #[test]
    fn infeasible_calibrations_report_residuals() {
        let err = calibrate(
            Family::GaussianBinary,
            FreeParams { variance: Some(1.0), ..Default::default() },
            Regime::Boundary,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Calibration { .. }));
        assert!(ModelSpec::gaussian_subcritical(2.0).is_err());
        assert!(ModelSpec::lattice_subcritical(1.4).is_err());
        assert!(calibrate(
            Family::GaussianBinary,
            FreeParams { variance: Some(1.0), gamma: Some(1.5), ..Default::default() },
            Regime::Subcritical
        )
        .is_err());
    }

    #[test]
    fn non_finite_theta_is_a_domain_error() {
        let m = ModelSpec::lattice_boundary();
        assert!(matches!(m.biggins_transform(f64::NAN), Err(Error::Domain(_))));
    }

    #[test]
    fn lattice_offspring_support() {
        let m = ModelSpec::lattice_boundary();
        let a = m.lattice_span().unwrap();
        let mut r = rng::stream(1, "t", 0);
        for _ in 0..100 {
            let s = m.sample_offspring(&mut r);
            assert_eq!(s.displacements.len(), 2);
            assert!(s.displacements.iter().all(|&d| d == a || d == -a));
        }
    }

    #[test]
    fn first_generation_means_match_calibration() {
        for m in [ModelSpec::lattice_boundary(), ModelSpec::gaussian_boundary()] {
            let mut r = rng::stream(3, "t", 1);
            let mut w = MeanVar::default();
            let mut d = MeanVar::default();
            for _ in 0..1_000_000 {
                let s = m.sample_offspring(&mut r);
                w.push(s.displacements.iter().map(|v| (-v).exp()).sum());
                d.push(s.displacements.iter().map(|v| v * (-v).exp()).sum());
            }
            assert!((w.mean - 1.0).abs() < 3.0 * w.std_err(), "{:?}", w);
            assert!(d.mean.abs() < 3.0 * d.std_err(), "{:?}", d);
        }
    }

    #[test]
    fn moment_diagnostics_examples() {
        let lat = ModelSpec::lattice_boundary();
        let rep = moment_diagnostics(&lat, 0.1, 100_000, 5).unwrap();
        assert_eq!(rep.mgf_x.verdict, Verdict::Finite);
        let bound = rep.x_upper_bound.unwrap();
        assert!(rep.mgf_x.mean <= (0.1 * bound).exp());
        let zero = moment_diagnostics(&lat, 0.0, 1000, 5).unwrap();
        assert_eq!(zero.mgf_x.mean, 1.0);
        let g = moment_diagnostics(&ModelSpec::gaussian_boundary(), 0.05, 100_000, 6).unwrap();
        assert_eq!(g.mgf_x.verdict, Verdict::Finite);
        assert!(g.mgf_w_gamma.is_none());
        assert!(moment_diagnostics(&lat, -1.0, 10, 1).is_err());
    }

    #[test]
    fn gaussian_exponential_moment_is_infinite() {
        // one child contributes e^{δ(1+v₊)e^{-v}}: doubly exponential in −v against a Gaussian density
        let m = ModelSpec::gaussian_boundary();
        let DisplacementParams::Gaussian { mean, variance } = m.params else { unreachable!() };
        let delta = 0.05;
        let log_integrand = |v: f64| delta * (1.0 + v.max(0.0)) * (-v).exp() - (v - mean).powi(2) / (2.0 * variance);
        assert!(log_integrand(-10.0) > log_integrand(-5.0));
        assert!(log_integrand(-20.0) > 1e6);
        // the sampled estimate is still finite at this sample size
        let rep = moment_diagnostics(&m, delta, 100_000, 11).unwrap();
        assert!(rep.mgf_x.mean.is_finite() && rep.mgf_x.mean > 1.0);
    }

    proptest! {
        #[test]
        fn transform_is_strictly_convex(t1 in -3.0f64..3.0, t2 in -3.0f64..3.0, which in 0usize..4) {
            prop_assume!((t1 - t2).abs() > 1e-3);
            let m = [
                ModelSpec::gaussian_boundary(),
                ModelSpec::lattice_boundary(),
                ModelSpec::gaussian_subcritical(1.0).unwrap(),
                ModelSpec::lattice_subcritical(0.8).unwrap(),
            ][which];
            let mid = m.biggins_transform((t1 + t2) / 2.0).unwrap();
            let avg = (m.biggins_transform(t1).unwrap() + m.biggins_transform(t2).unwrap()) / 2.0;
            prop_assert!(mid < avg);
        }

        #[test]
        fn subcritical_gaussian_calibrates_for_any_variance(v in 0.05f64..1.38) {
            let m = ModelSpec::gaussian_subcritical(v).unwrap();
            prop_assert!(m.biggins_transform(1.0).unwrap().abs() <= CALIBRATION_TOL);
            let k = m.kappa.value().unwrap();
            prop_assert!(m.biggins_transform(k).unwrap().abs() <= KAPPA_TOL * k.max(1.0).powi(2));
        }
    }
}
