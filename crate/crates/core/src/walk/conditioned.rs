use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use super::{RenewalTable, StepLaw};
use crate::error::{Error, Result};

/// Resolution of the start-position buckets that share one inversion table.
pub const BUCKET_WIDTH: f64 = 0.01;
/// Nodes per inversion table.
pub const GRID_NODES: usize = 4096;
/// Half-width of the tabulated support in step standard deviations.
pub const TAIL_SIGMAS: f64 = 12.0;

const MIN_MASS: f64 = 1e-12;

/// Piecewise-linear density `R(y)φ((y − c)/σ)` on `[lo, lo + (nodes−1)h]` with its
/// running trapezoid integral.
#[derive(Debug)]
struct InversionTable {
    lo: f64,
    h: f64,
    density: Vec<f64>,
    cdf: Vec<f64>,
}

impl InversionTable {
    fn build(renewal: &RenewalTable, centre: f64, sd: f64, extra: f64) -> Result<Self> {
        let lo = (centre - TAIL_SIGMAS * sd).max(0.0);
        let hi = centre + extra + TAIL_SIGMAS * sd;
        if hi <= lo {
            return Err(Error::Sampler(format!("empty conditioned-step support at centre {centre}")));
        }
        let h = (hi - lo) / (GRID_NODES - 1) as f64;
        let density: Vec<f64> = (0..GRID_NODES)
            .map(|i| {
                let y = lo + i as f64 * h;
                let z = (y - centre) / sd;
                renewal.eval(y) * (-0.5 * z * z).exp()
            })
            .collect();
        let mut cdf = Vec::with_capacity(GRID_NODES);
        let mut acc = 0.0;
        cdf.push(0.0);
        for w in density.windows(2) {
            acc += 0.5 * h * (w[0] + w[1]);
            cdf.push(acc);
        }
        if !(acc > MIN_MASS) {
            return Err(Error::Sampler(format!("conditioned-step mass {acc:e} below {MIN_MASS:e} at centre {centre}")));
        }
        Ok(InversionTable { lo, h, density, cdf })
    }

    fn hi(&self) -> f64 {
        self.lo + (GRID_NODES - 1) as f64 * self.h
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let total = *self.cdf.last().unwrap();
        let target = rng.random::<f64>() * total;
        let i = self.cdf.partition_point(|&c| c <= target).clamp(1, GRID_NODES - 1) - 1;
        let rem = target - self.cdf[i];
        let (f0, f1) = (self.density[i], self.density[i + 1]);
        // solve h(f0 s + (f1 − f0)s²/2) = rem for s ∈ [0, 1]
        let slope = f1 - f0;
        let s = if slope.abs() < 1e-12 * f0.max(1e-300) {
            if f0 > 0.0 { rem / (self.h * f0) } else { 0.5 }
        } else {
            let disc = (f0 * f0 + 2.0 * slope * rem / self.h).max(0.0);
            2.0 * rem / self.h / (f0 + disc.sqrt())
        };
        self.lo + (i as f64 + s.clamp(0.0, 1.0)) * self.h
    }

    fn cdf_at(&self, y: f64) -> f64 {
        let total = *self.cdf.last().unwrap();
        if y <= self.lo {
            return 0.0;
        }
        if y >= self.hi() {
            return 1.0;
        }
        let pos = (y - self.lo) / self.h;
        let i = (pos.floor() as usize).min(GRID_NODES - 2);
        let s = pos - i as f64;
        let (f0, f1) = (self.density[i], self.density[i + 1]);
        (self.cdf[i] + self.h * (f0 * s + 0.5 * (f1 - f0) * s * s)) / total
    }
}

/// One-step sampler for the walk conditioned to stay nonnegative.
///
/// Gaussian steps are inverted from cached tables, one per start bucket of
/// width [`BUCKET_WIDTH`]; the offset inside the bucket is absorbed by a
/// rejection step whose acceptance rate is close to one.
#[derive(Debug)]
pub struct ConditionedSampler {
    step: StepLaw,
    renewal: Arc<RenewalTable>,
    cache: RwLock<HashMap<i64, Arc<InversionTable>>>,
}

impl ConditionedSampler {
    pub fn new(step: StepLaw, renewal: Arc<RenewalTable>) -> Self {
        ConditionedSampler { step, renewal, cache: RwLock::new(HashMap::new()) }
    }

    pub fn step_law(&self) -> &StepLaw {
        &self.step
    }

    pub fn renewal(&self) -> &RenewalTable {
        &self.renewal
    }

    pub fn cached_tables(&self) -> usize {
        self.cache.read().unwrap().len()
    }

    /// Probability of an up-step from `x` for lattice laws.
    pub fn lattice_up_probability(&self, x: f64) -> Option<f64> {
        match self.step {
            StepLaw::Lattice { step, up } => Some((up * self.renewal.eval(x + step) / self.renewal.eval(x)).min(1.0)),
            StepLaw::Gaussian { .. } => None,
        }
    }

    /// Next position of the conditioned walk from `x ≥ 0`.
    pub fn step<R: Rng + ?Sized>(&self, x: f64, rng: &mut R) -> Result<f64> {
        if !(x >= -1e-9) {
            return Err(Error::Domain(format!("conditioned step needs x ≥ 0, got {x}")));
        }
        let x = x.max(0.0);
        match self.step {
            StepLaw::Lattice { step, .. } => {
                let p = self.lattice_up_probability(x).unwrap();
                Ok(if rng.random::<f64>() < p { x + step } else { x - step })
            }
            StepLaw::Gaussian { mean, sd } => {
                let centre = x + mean;
                if centre - TAIL_SIGMAS * sd >= self.renewal.u_max() {
                    return Ok(self.sample_affine_region(centre, sd, rng));
                }
                let bucket = (x / BUCKET_WIDTH).floor();
                let table = self.table(bucket as i64, bucket * BUCKET_WIDTH + mean, sd)?;
                let delta = centre - (bucket * BUCKET_WIDTH + mean);
                if delta <= 0.0 {
                    return Ok(table.sample(rng));
                }
                // proposal centred at the bucket edge; target is shifted right by delta
                let log_ratio = |y: f64| delta * (2.0 * (y - centre + delta) - delta) / (2.0 * sd * sd);
                let log_max = log_ratio(table.hi());
                loop {
                    let y = table.sample(rng);
                    if rng.random::<f64>().ln() <= log_ratio(y) - log_max {
                        return Ok(y);
                    }
                }
            }
        }
    }

    /// CDF of the one-step target law from `x`, tabulated without bucketing.
    pub fn target_cdf(&self, x: f64) -> Result<Box<dyn Fn(f64) -> f64 + Send + Sync>> {
        if !(x >= 0.0) {
            return Err(Error::Domain(format!("conditioned step needs x ≥ 0, got {x}")));
        }
        match self.step {
            StepLaw::Lattice { step, .. } => {
                let p = self.lattice_up_probability(x).unwrap();
                Ok(Box::new(move |y| {
                    if y < x - step {
                        0.0
                    } else if y < x + step {
                        1.0 - p
                    } else {
                        1.0
                    }
                }))
            }
            StepLaw::Gaussian { mean, sd } => {
                let t = InversionTable::build(&self.renewal, x + mean, sd, 0.0)?;
                Ok(Box::new(move |y| t.cdf_at(y)))
            }
        }
    }

    fn table(&self, key: i64, centre: f64, sd: f64) -> Result<Arc<InversionTable>> {
        if let Some(t) = self.cache.read().unwrap().get(&key) {
            return Ok(t.clone());
        }
        let built = Arc::new(InversionTable::build(&self.renewal, centre, sd, BUCKET_WIDTH)?);
        let mut w = self.cache.write().unwrap();
        Ok(w.entry(key).or_insert(built).clone())
    }

    /// Exact draw from `(α + βt)φ(t)` where `R` is affine over the whole support.
    fn sample_affine_region<R: Rng + ?Sized>(&self, centre: f64, sd: f64, rng: &mut R) -> f64 {
        let u_max = self.renewal.u_max();
        let slope = self.renewal.slope;
        let alpha = self.renewal.eval(u_max) + slope * (centre - u_max);
        let beta = slope * sd;
        // envelope (α + β|t|)φ(t): Gaussian with weight α, signed Rayleigh with weight β√(2/π)
        let w_abs = beta * (2.0 / std::f64::consts::PI).sqrt();
        loop {
            let t = if rng.random::<f64>() * (alpha + w_abs) < alpha {
                let z: f64 = StandardNormal.sample(rng);
                z
            } else {
                let e: f64 = Exp1.sample(rng);
                let r = (2.0 * e).sqrt();
                if rng.random::<bool>() { r } else { -r }
            };
            let accept = (alpha + beta * t) / (alpha + beta * t.abs());
            if t >= 0.0 || rng.random::<f64>() < accept {
                return centre + sd * t;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use crate::rng;
    use crate::stats::{ks_critical, ks_statistic, MeanVar};
    use crate::walk::{estimate_renewal, step_law, RenewalConfig};

    fn lattice() -> ConditionedSampler {
        let s = step_law(&ModelSpec::lattice_boundary());
        let t = estimate_renewal(&s, &RenewalConfig::default()).unwrap().table;
        ConditionedSampler::new(s, Arc::new(t))
    }

    fn gaussian() -> ConditionedSampler {
        let s = step_law(&ModelSpec::gaussian_boundary());
        let cfg = RenewalConfig { replicas: 20_000, bootstrap: 20, ..Default::default() };
        let t = estimate_renewal(&s, &cfg).unwrap().table;
        ConditionedSampler::new(s, Arc::new(t))
    }

    #[test]
    fn lattice_up_probabilities() {
        let c = lattice();
        let a = c.step_law().span().unwrap();
        for k in 0..=10 {
            let p = c.lattice_up_probability(k as f64 * a).unwrap();
            let want = (k + 2) as f64 / (2.0 * (k + 1) as f64);
            assert!((p - want).abs() < 1e-12, "k={k}");
        }
        let mut g = rng::stream(0, "t", 0);
        assert_eq!(c.step(0.0, &mut g).unwrap(), a);
        assert!(c.step(-1.0, &mut g).is_err());
    }

    #[test]
    fn gaussian_steps_follow_the_target_law() {
        let c = gaussian();
        for x in [0.0, 0.37, 5.0] {
            let mut g = rng::stream(11, "cond", (x * 100.0) as u64);
            let ys: Vec<f64> = (0..20_000).map(|_| c.step(x, &mut g).unwrap()).collect();
            assert!(ys.iter().all(|&y| y >= 0.0));
            let cdf = c.target_cdf(x).unwrap();
            let d = ks_statistic(&ys, |y| cdf(y));
            assert!(d < ks_critical(ys.len() as f64, 0.01), "x={x}: D={d}");
        }
    }

    #[test]
    fn affine_region_matches_tabulated_law() {
        let c = gaussian();
        let x = 40.0;
        let mut g = rng::stream(12, "affine", 0);
        let ys: Vec<f64> = (0..20_000).map(|_| c.step(x, &mut g).unwrap()).collect();
        // oracle: (α+βt)φ(t) has mean centre + σβ/α·... compute by quadrature
        let StepLaw::Gaussian { mean, sd } = *c.step_law() else { unreachable!() };
        let r = c.renewal();
        let (mut m0, mut m1) = (0.0, 0.0);
        for i in 0..20_000 {
            let t = -10.0 + i as f64 * 1e-3;
            let y = x + mean + sd * t;
            let w = r.eval(y) * (-0.5 * t * t).exp();
            m0 += w;
            m1 += w * y;
        }
        let acc = MeanVar::from_slice(&ys);
        assert!((acc.mean - m1 / m0).abs() < 4.0 * acc.std_err());
    }

    #[test]
    fn conditioned_walk_harmonic_mean_ratio() {
        // E_x[1/R(S⁺₁)] = P_x(S₁ ≥ 0)/R(x) for the lattice walk
        let c = lattice();
        let a = c.step_law().span().unwrap();
        let x = 2.0 * a;
        let mut g = rng::stream(3, "h", 0);
        let acc: MeanVar = (0..200_000).map(|_| 1.0 / c.renewal().eval(c.step(x, &mut g).unwrap())).collect();
        assert!((acc.mean - 1.0 / 3.0).abs() < 3.0 * acc.std_err());
    }
}
