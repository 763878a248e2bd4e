//! Brute-force dynamic programming on a state lattice for scalar scenarios.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{domain, Error, Result};
use crate::forward::{Scenario, TimeGrid};
use crate::spectral::SpectralVector;

/// Nodes and weights of the `k`-point Gauss–Hermite rule for a standard
/// normal expectation (Golub–Welsch on the probabilists' Jacobi matrix).
pub fn gauss_hermite(k: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jac = DMatrix::zeros(k, k);
    for i in 1..k {
        let b = (i as f64).sqrt();
        jac[(i - 1, i)] = b;
        jac[(i, i - 1)] = b;
    }
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..k)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    (
        pairs.iter().map(|p| p.0).collect(),
        pairs.iter().map(|p| p.1 / total).collect(),
    )
}

/// Value and greedy policy tables on `lattice × grid`.
#[derive(Clone, Debug)]
pub struct DpOracle {
    lattice: Vec<f64>,
    values: Vec<Vec<f64>>,
    policy: Vec<Vec<f64>>,
    escape: f64,
}

fn interp(lattice: &[f64], values: &[f64], x: f64) -> f64 {
    let n = lattice.len();
    if x <= lattice[0] {
        return values[0];
    }
    if x >= lattice[n - 1] {
        return values[n - 1];
    }
    let i = lattice.partition_point(|v| *v <= x).clamp(1, n - 1);
    let (x0, x1) = (lattice[i - 1], lattice[i]);
    let w = (x - x0) / (x1 - x0);
    values[i - 1] * (1.0 - w) + values[i] * w
}

impl DpOracle {
    pub fn lattice(&self) -> &[f64] {
        &self.lattice
    }

    pub fn value_at(&self, x0: f64) -> f64 {
        interp(&self.lattice, &self.values[0], x0)
    }

    pub fn value_table(&self, j: usize) -> &[f64] {
        &self.values[j]
    }

    /// Greedy control at lattice point nearest-interpolated at step `j`.
    pub fn policy_at(&self, j: usize, x: f64) -> f64 {
        interp(&self.lattice, &self.policy[j], x)
    }

    /// Probability mass that left the lattice under the greedy policy.
    pub fn escape_probability(&self) -> f64 {
        self.escape
    }
}

/// Backward induction with 7-point Gauss–Hermite transition expectations and
/// linear interpolation between lattice points. The lattice must be sorted.
pub fn dp_oracle_scalar(scenario: &Scenario, x_lattice: &[f64], u_grid: &[f64], grid: &TimeGrid) -> Result<DpOracle> {
    if scenario.dim() != 1 || scenario.control_dim != 1 {
        return domain("dp_oracle_scalar needs a scalar state and a scalar control");
    }
    if x_lattice.len() < 2 || x_lattice.windows(2).any(|w| w[1] <= w[0]) {
        return domain("lattice must be strictly increasing with at least two points");
    }
    if u_grid.is_empty() {
        return domain("empty control grid");
    }
    let (nodes, weights) = gauss_hermite(7);
    let dt = grid.dt();
    let sq = dt.sqrt();
    let decay = scenario.op.semigroup_factors(dt)?[0];
    let n_steps = grid.n_steps();
    let nx = x_lattice.len();

    let step_to = |t: f64, x: f64, u: f64| -> (Vec<f64>, f64) {
        let xv = SpectralVector::from_element(1, x);
        let uv = DVector::from_element(1, u);
        let a = scenario.drift(t, &xv, &uv)[0];
        let b = scenario.diffusion(t, &xv, &uv)[0];
        let targets = nodes.iter().map(|z| decay * (x + a * dt + b * sq * z)).collect();
        (targets, scenario.running_cost(t, &xv, &uv) * dt)
    };

    let mut values = vec![Vec::new(); n_steps + 1];
    let mut policy = vec![vec![0.0; nx]; n_steps + 1];
    values[n_steps] = x_lattice
        .iter()
        .map(|x| scenario.terminal_cost(&SpectralVector::from_element(1, *x)))
        .collect();
    for j in (0..n_steps).rev() {
        let t = grid.t(j);
        let next = &values[j + 1];
        let best: Vec<(f64, f64)> = x_lattice
            .par_iter()
            .map(|&x| {
                let mut best = (f64::INFINITY, u_grid[0]);
                for &u in u_grid {
                    let (targets, run) = step_to(t, x, u);
                    let cont: f64 = targets
                        .iter()
                        .zip(&weights)
                        .map(|(y, w)| w * interp(x_lattice, next, *y))
                        .sum();
                    let v = run + cont;
                    if v < best.0 {
                        best = (v, u);
                    }
                }
                best
            })
            .collect();
        values[j] = best.iter().map(|b| b.0).collect();
        policy[j] = best.iter().map(|b| b.1).collect();
    }

    // forward mass propagation under the greedy policy
    let (lo, hi) = (x_lattice[0], x_lattice[nx - 1]);
    let mut mass = vec![0.0; nx];
    let mut escape = 0.0;
    let deposit = |mass: &mut [f64], x: f64, w: f64| {
        let i = x_lattice.partition_point(|v| *v <= x).clamp(1, nx - 1);
        let (x0, x1) = (x_lattice[i - 1], x_lattice[i]);
        let f = ((x - x0) / (x1 - x0)).clamp(0.0, 1.0);
        mass[i - 1] += w * (1.0 - f);
        mass[i] += w * f;
    };
    let x0 = scenario.x0[0];
    if x0 < lo || x0 > hi {
        return Err(Error::LatticeTooSmall(1.0));
    }
    deposit(&mut mass, x0, 1.0);
    for (j, pol) in policy.iter().enumerate().take(n_steps) {
        let t = grid.t(j);
        let mut next = vec![0.0; nx];
        for (i, &m) in mass.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            let (targets, _) = step_to(t, x_lattice[i], pol[i]);
            for (y, w) in targets.iter().zip(&weights) {
                if *y < lo || *y > hi {
                    escape += m * w;
                } else {
                    deposit(&mut next, *y, m * w);
                }
            }
        }
        mass = next;
    }
    if escape > 0.01 {
        return Err(Error::LatticeTooSmall(escape));
    }
    Ok(DpOracle {
        lattice: x_lattice.to_vec(),
        values,
        policy,
        escape,
    })
}

/// `n` evenly spaced points on `[lo, hi]`.
pub(crate) fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}
