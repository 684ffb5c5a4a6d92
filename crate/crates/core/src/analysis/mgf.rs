//! Log-MGF of the truncated additive martingale, `ψ_n(θ, x) = ln E[e^{θ W_n^{(x)}}]`,
//! computed on a grid by iterating the first-generation decomposition.

use std::num::NonZeroUsize;

use gauss_quad::GaussLegendre;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DisplacementParams, ModelSpec, Regime};

/// ψ above this value marks the θ column as diverged.
pub const DIVERGENCE_SENTINEL: f64 = 50.0;
/// Violations smaller than this are treated as quadrature noise.
const MONOTONE_TOL: f64 = 1e-9;
const QUAD_NODES: usize = 256;
const QUAD_SIGMAS: f64 = 8.0;
const KILL_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MgfTable {
    pub theta_grid: Vec<f64>,
    pub x_grid: Vec<f64>,
    /// `psi[n][i][k]` = ψ_n(θ_i, x_k); NaN after the column diverged.
    pub psi: Vec<Vec<Vec<f64>>>,
    /// First generation at which a θ column exceeded the sentinel.
    pub diverged_at: Vec<Option<usize>>,
    /// `increments[n - 1][i]` = sup_x |ψ_n − ψ_{n−1}| at θ_i.
    pub increments: Vec<Vec<f64>>,
    pub monotone_in_theta: bool,
    pub monotone_in_x: bool,
    /// Largest decrease ψ_{n−1} − ψ_n seen anywhere on the grid.
    pub max_decrease_in_n: f64,
    pub certificate: Option<MgfBoundCertificate>,
}

impl MgfTable {
    pub fn n_max(&self) -> usize {
        self.psi.len() - 1
    }

    pub fn psi(&self, n: usize, theta_index: usize, x_index: usize) -> f64 {
        self.psi[n][theta_index][x_index]
    }

    pub fn monotone_in_n(&self) -> bool {
        self.max_decrease_in_n <= MONOTONE_TOL
    }

    /// Sup over the grid of the last-generation increment, restricted to θ ≤ `theta_max`.
    pub fn final_increment(&self, theta_max: f64) -> f64 {
        let Some(last) = self.increments.last() else { return 0.0 };
        self.theta_grid
            .iter()
            .zip(last)
            .filter(|(&t, _)| t <= theta_max)
            .map(|(_, &d)| d)
            .fold(0.0, |a, d| if d.is_nan() { f64::INFINITY } else { a.max(d) })
    }

    /// First generation by which every increment restricted to θ ≤ `theta_max`
    /// stays below `tol`.
    pub fn settled_by(&self, theta_max: f64, tol: f64) -> Option<usize> {
        let bad = |row: &Vec<f64>| {
            self.theta_grid.iter().zip(row).any(|(&t, &d)| t <= theta_max && !(d < tol))
        };
        match self.increments.iter().rposition(bad) {
            None => Some(0),
            Some(i) if i + 1 < self.increments.len() => Some(i + 2),
            Some(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MgfBoundCertificate {
    pub rho: f64,
    pub k: f64,
    pub theta_bar: f64,
    pub holds: bool,
    /// Largest θ with no divergence up to `n_max`.
    pub divergence_frontier: Option<f64>,
    pub k_cap: f64,
}

/// Uniform grid helper: spacing and validation.
struct Grid<'a> {
    x: &'a [f64],
    h: f64,
}

impl<'a> Grid<'a> {
    fn new(x: &'a [f64]) -> Result<Self> {
        if x.len() < 2 || x[0] != 0.0 {
            return Err(Error::Domain("x grid must start at 0 and have at least two nodes".into()));
        }
        let h = x[1] - x[0];
        let uniform = x.windows(2).all(|w| ((w[1] - w[0]) - h).abs() <= 1e-9 * h.max(1.0));
        if !(h > 0.0) || !uniform {
            return Err(Error::Domain("x grid must be uniform and increasing".into()));
        }
        Ok(Grid { x, h })
    }

    fn top(&self) -> f64 {
        self.x[self.x.len() - 1]
    }

    /// ψ(y) from grid values, linear in `ψ e^{y}` between nodes and `θ e^{−y}` past the top.
    fn lookup(&self, psi: &[f64], theta: f64, y: f64) -> f64 {
        let y = y.max(0.0);
        if y > self.top() + 1e-12 {
            return theta * (-y).exp();
        }
        let pos = y / self.h;
        let i = (pos.floor() as usize).min(self.x.len() - 2);
        let f = (pos - i as f64).clamp(0.0, 1.0);
        let (x0, x1) = (self.x[i], self.x[i + 1]);
        let scaled = psi[i] * x0.exp() * (1.0 - f) + psi[i + 1] * x1.exp() * f;
        scaled * (-y).exp()
    }
}

/// Quadrature rule for `E[f(x + Z)] 1{x + Z ≥ 0}` at one grid node.
enum Rule {
    Lattice { step: f64, up: f64 },
    /// `(z, weight · density)` pairs per x node.
    Gaussian(Vec<Vec<(f64, f64)>>),
}

fn build_rule(model: &ModelSpec, grid: &Grid) -> Rule {
    match model.params {
        DisplacementParams::Lattice { step, up_prob } => Rule::Lattice { step, up: up_prob },
        DisplacementParams::Gaussian { mean, variance } => {
            let sd = variance.sqrt();
            let gl = GaussLegendre::new(NonZeroUsize::new(QUAD_NODES).unwrap());
            let hi = mean + QUAD_SIGMAS * sd;
            let density = |z: f64| {
                let t = (z - mean) / sd;
                (-0.5 * t * t).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
            };
            let rules = grid
                .x
                .iter()
                .map(|&x| {
                    let lo = (mean - QUAD_SIGMAS * sd).max(-x);
                    if lo >= hi {
                        return Vec::new();
                    }
                    let (half, mid) = (0.5 * (hi - lo), 0.5 * (hi + lo));
                    gl.as_node_weight_pairs()
                        .into_iter()
                        .map(|(t, w)| {
                            let z = mid + half * t;
                            (z, w * half * density(z))
                        })
                        .collect()
                })
                .collect();
            Rule::Gaussian(rules)
        }
    }
}

/// `E[expm1(ψ(x_k + Z)); x_k + Z ≥ 0]`.
fn expected_excess(rule: &Rule, grid: &Grid, psi: &[f64], theta: f64, k: usize) -> f64 {
    let x = grid.x[k];
    match rule {
        Rule::Lattice { step, up } => {
            let mut acc = up * grid.lookup(psi, theta, x + step).exp_m1();
            if x - step >= -KILL_EPS {
                acc += (1.0 - up) * grid.lookup(psi, theta, x - step).exp_m1();
            }
            acc
        }
        Rule::Gaussian(rules) => rules[k]
            .iter()
            .map(|&(z, w)| w * grid.lookup(psi, theta, x + z).exp_m1())
            .sum(),
    }
}

/// Default x grid: lattice nodes `k·a` up to 12, or spacing 0.05 on `[0, 12]`.
pub fn default_x_grid(model: &ModelSpec) -> Vec<f64> {
    let (h, top) = match model.params {
        DisplacementParams::Lattice { step, .. } => (step, (12.0 / step).ceil() as usize),
        DisplacementParams::Gaussian { .. } => (0.05, 240),
    };
    (0..=top).map(|k| k as f64 * h).collect()
}

/// Iterates `e^{ψ_n(θ,x)} = (1 + E[expm1(ψ_{n−1}(θ, x+Z)); x+Z ≥ 0])^{count}` from
/// `ψ_0 = θe^{−x}` up to generation `n_max`.
pub fn mgf_recursion(model: &ModelSpec, theta_grid: &[f64], x_grid: &[f64], n_max: usize) -> Result<MgfTable> {
    if model.regime != Regime::Subcritical {
        return Err(Error::Domain("the MGF recursion is defined for subcritical models".into()));
    }
    if theta_grid.is_empty()
        || theta_grid.iter().any(|t| !(t.is_finite() && *t >= 0.0))
        || theta_grid.windows(2).any(|w| w[1] <= w[0])
    {
        return Err(Error::Domain("theta grid must be finite, nonnegative and increasing".into()));
    }
    let grid = Grid::new(x_grid)?;
    if let DisplacementParams::Lattice { step, .. } = model.params {
        let ratio = step / grid.h;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return Err(Error::Domain("lattice x grid spacing must divide the step".into()));
        }
    }
    let rule = build_rule(model, &grid);
    let count = model.offspring_count as f64;

    let initial: Vec<Vec<f64>> =
        theta_grid.iter().map(|&t| x_grid.iter().map(|&x| t * (-x).exp()).collect()).collect();
    let mut psi = vec![initial];
    let mut diverged_at = vec![None; theta_grid.len()];
    let mut increments = Vec::with_capacity(n_max);

    for n in 1..=n_max {
        let prev = &psi[n - 1];
        let mut next = Vec::with_capacity(theta_grid.len());
        let mut inc = Vec::with_capacity(theta_grid.len());
        for (i, &theta) in theta_grid.iter().enumerate() {
            if diverged_at[i].is_some() {
                next.push(vec![f64::NAN; x_grid.len()]);
                inc.push(f64::NAN);
                continue;
            }
            let column: Vec<f64> = (0..x_grid.len())
                .map(|k| count * expected_excess(&rule, &grid, &prev[i], theta, k).ln_1p())
                .collect();
            if column.iter().any(|v| !(v.is_finite() && *v <= DIVERGENCE_SENTINEL)) {
                diverged_at[i] = Some(n);
                next.push(vec![f64::NAN; x_grid.len()]);
                inc.push(f64::NAN);
                continue;
            }
            inc.push(column.iter().zip(&prev[i]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
            next.push(column);
        }
        psi.push(next);
        increments.push(inc);
    }

    let mut monotone_in_theta = true;
    let mut monotone_in_x = true;
    let mut max_decrease_in_n: f64 = 0.0;
    for (n, gen) in psi.iter().enumerate() {
        for (i, col) in gen.iter().enumerate() {
            if col[0].is_nan() {
                continue;
            }
            if col.windows(2).any(|w| w[1] > w[0] + MONOTONE_TOL) {
                monotone_in_x = false;
            }
            if i > 0 && !gen[i - 1][0].is_nan() && col.iter().zip(&gen[i - 1]).any(|(a, b)| *a < b - MONOTONE_TOL) {
                monotone_in_theta = false;
            }
            if n > 0 && !psi[n - 1][i][0].is_nan() {
                for (a, b) in col.iter().zip(&psi[n - 1][i]) {
                    max_decrease_in_n = max_decrease_in_n.max(b - a);
                }
            }
        }
    }

    Ok(MgfTable {
        theta_grid: theta_grid.to_vec(),
        x_grid: x_grid.to_vec(),
        psi,
        diverged_at,
        increments,
        monotone_in_theta,
        monotone_in_x,
        max_decrease_in_n,
        certificate: None,
    })
}

/// Smallest `K` with `ψ_n(θ,x) ≤ θe^{−x} + Kθ^ρ e^{−ρx}` over every stored generation,
/// every grid `x` and every grid `θ ≤ θ̄`, with `θ̄` the largest grid value for which
/// that `K` stays below `k_cap`. θ = 0 carries no information and is skipped.
pub fn certify_mgf_bound(table: &MgfTable, rho: f64, k_cap: f64) -> Result<MgfBoundCertificate> {
    if !(rho > 1.0 && rho <= 2.0) {
        return Err(Error::Domain(format!("rho = {rho} outside (1, 2]")));
    }
    if !(k_cap > 0.0) {
        return Err(Error::Domain("k_cap must be positive".into()));
    }
    let usable: Vec<usize> = (0..table.theta_grid.len()).filter(|&i| table.theta_grid[i] > 0.0).collect();

    // Per-θ ratio needed; NaN where the column diverged.
    let needed: Vec<f64> = usable
        .iter()
        .map(|&i| {
            if table.diverged_at[i].is_some() {
                return f64::NAN;
            }
            let theta = table.theta_grid[i];
            let mut r: f64 = 0.0;
            for gen in &table.psi {
                for (&x, &v) in table.x_grid.iter().zip(&gen[i]) {
                    let excess = v - theta * (-x).exp();
                    if excess > 0.0 {
                        r = r.max(excess / (theta.powf(rho) * (-rho * x).exp()));
                    }
                }
            }
            r
        })
        .collect();

    // Running maximum makes admissibility monotone in θ.
    let mut running = Vec::with_capacity(needed.len());
    let mut k: f64 = 0.0;
    for &r in &needed {
        k = if r.is_nan() { f64::NAN } else { k.max(r) };
        running.push(k);
    }
    let admissible = running.partition_point(|&k| k.is_finite() && k <= k_cap);
    let divergence_frontier = usable
        .iter()
        .take_while(|&&i| table.diverged_at[i].is_none())
        .last()
        .map(|&i| table.theta_grid[i]);

    let (k, theta_bar) = if admissible == 0 {
        (f64::INFINITY, 0.0)
    } else {
        (running[admissible - 1], table.theta_grid[usable[admissible - 1]])
    };
    Ok(MgfBoundCertificate {
        rho,
        k,
        theta_bar,
        holds: admissible > 0 && theta_bar >= 0.01,
        divergence_frontier,
        k_cap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lattice() -> ModelSpec {
        ModelSpec::lattice_subcritical(0.8).unwrap()
    }

    /// Exact `E[W_n^{(x)}]` on the lattice from the linear first-moment recursion.
    fn lattice_mean(model: &ModelSpec, n: usize, k_start: usize) -> f64 {
        let DisplacementParams::Lattice { step, up_prob } = model.params else { unreachable!() };
        let width = k_start + n + 1;
        let mut m: Vec<f64> = (0..=width + n).map(|k| (-(k as f64) * step).exp()).collect();
        for _ in 0..n {
            let prev = m.clone();
            for k in 0..prev.len() - 1 {
                let down = if k >= 1 { (1.0 - up_prob) * prev[k - 1] } else { 0.0 };
                m[k] = 2.0 * (up_prob * prev[k + 1] + down);
            }
        }
        m[k_start]
    }

    #[test]
    fn generation_zero_is_exact() {
        let model = lattice();
        let xs = default_x_grid(&model);
        let t = mgf_recursion(&model, &[0.0, 0.1, 0.5], &xs, 3).unwrap();
        for (i, &theta) in t.theta_grid.iter().enumerate() {
            for (k, &x) in xs.iter().enumerate() {
                assert_eq!(t.psi(0, i, k), theta * (-x).exp());
            }
        }
        assert!(t.psi[3][0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn small_theta_matches_first_moment() {
        let model = lattice();
        let xs = default_x_grid(&model);
        let theta = 1e-6;
        let t = mgf_recursion(&model, &[theta], &xs, 12).unwrap();
        for k in [1, 2, 3] {
            let exact = lattice_mean(&model, 12, k);
            let got = t.psi(12, 0, k) / theta;
            assert!((got - exact).abs() < 1e-5 * exact.max(1e-3), "k={k}: {got} vs {exact}");
            assert!(got <= (-xs[k]).exp());
        }
    }

    #[test]
    fn gaussian_small_theta_is_bounded_by_untruncated_mean() {
        let model = ModelSpec::gaussian_subcritical(1.0).unwrap();
        let xs = default_x_grid(&model);
        let theta = 1e-6;
        let t = mgf_recursion(&model, &[theta], &xs, 6).unwrap();
        for (k, &x) in xs.iter().enumerate().step_by(20) {
            let mean = t.psi(6, 0, k) / theta;
            assert!(mean <= (-x).exp() * (1.0 + 1e-6), "x={x}");
            assert!(mean > 0.0);
        }
        // killing matters little far from the barrier
        let k = 200;
        assert!((t.psi(6, 0, k) / theta / (-xs[k]).exp() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn large_theta_diverges_and_is_excluded() {
        let model = lattice();
        let xs = default_x_grid(&model);
        let grid = [0.01, 0.1, 1.0, 40.0, 200.0];
        let t = mgf_recursion(&model, &grid, &xs, 20).unwrap();
        assert!(t.diverged_at[4].is_some());
        assert!(t.psi[20][4].iter().all(|v| v.is_nan()));
        let cert = certify_mgf_bound(&t, 2.0, 1e3).unwrap();
        assert!(cert.theta_bar < 200.0);
        assert!(cert.divergence_frontier.unwrap() < 200.0);
    }

    #[test]
    fn initial_values_certify_with_zero_constant() {
        let model = lattice();
        let xs = default_x_grid(&model);
        let mut t = mgf_recursion(&model, &[0.05, 0.5], &xs, 4).unwrap();
        t.psi.truncate(1);
        let cert = certify_mgf_bound(&t, 2.0, 1e3).unwrap();
        assert_eq!(cert.k, 0.0);
        assert!(cert.holds);
        assert_eq!(cert.theta_bar, 0.5);
    }

    #[test]
    fn lattice_bound_certifies_and_settles() {
        let model = lattice();
        let xs = default_x_grid(&model);
        let grid: Vec<f64> = (0..=12).map(|i| 0.002 * 2f64.powi(i)).collect();
        let t = mgf_recursion(&model, &grid, &xs, 40).unwrap();
        assert!(t.monotone_in_theta);
        let cert = certify_mgf_bound(&t, model.rho.unwrap(), 1e3).unwrap();
        assert!(cert.holds, "{cert:?}");
        assert!(cert.theta_bar >= 0.01);
        assert!(t.settled_by(0.05, 1e-10).is_some_and(|n| n <= 40));
        let again = certify_mgf_bound(&t, model.rho.unwrap(), 1e3).unwrap();
        assert_eq!(cert, again);
    }

    #[test]
    fn rejects_bad_grids() {
        let model = lattice();
        assert!(mgf_recursion(&model, &[0.1], &[0.0, 0.3, 0.6], 2).is_err());
        assert!(mgf_recursion(&model, &[0.2, 0.1], &default_x_grid(&model), 2).is_err());
        assert!(mgf_recursion(&ModelSpec::lattice_boundary(), &[0.1], &[0.0, 1.0], 2).is_err());
    }
}
