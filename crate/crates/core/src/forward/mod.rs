//! Monte Carlo simulation of the controlled equation and of the linear test
//! equations that appear in the duality identities.
//!
//! Every scheme is exponential Euler: the affine update is formed first and
//! the semigroup is applied exactly afterwards,
//! `x_{j+1} = S(dt)(x_j + drift·dt + diffusion·Δw_j)`.

mod ensemble;
mod scenario;

pub use ensemble::{BrownianEnsemble, TimeGrid};
pub use scenario::{Coefficients, ControlProcess, ControlSet, FeedbackFn, Scenario};

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{domain, Error, Result};
use crate::process::{MatrixProcess, VectorProcess};
use crate::spectral::{OperatorSpec, SpectralVector};
use crate::stats;

/// Coefficient magnitude treated as divergence.
pub const OVERFLOW_GUARD: f64 = 1e12;

/// Simulated states (and the controls actually applied) on every path.
#[derive(Clone, Debug)]
pub struct StateEnsemble {
    grid: TimeGrid,
    n_paths: usize,
    dim: usize,
    control_dim: usize,
    states: Vec<f64>,
    controls: Vec<f64>,
    fingerprint: u64,
}

impl StateEnsemble {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    /// Fingerprint of the Brownian ensemble that drove the simulation.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn state(&self, path: usize, step: usize) -> &[f64] {
        let off = (path * (self.grid.n_steps() + 1) + step) * self.dim;
        &self.states[off..off + self.dim]
    }

    pub fn state_vec(&self, path: usize, step: usize) -> SpectralVector {
        SpectralVector::from_column_slice(self.state(path, step))
    }

    pub fn control(&self, path: usize, step: usize) -> &[f64] {
        let off = (path * self.grid.n_steps() + step) * self.control_dim;
        &self.controls[off..off + self.control_dim]
    }

    pub fn control_vec(&self, path: usize, step: usize) -> DVector<f64> {
        DVector::from_column_slice(self.control(path, step))
    }

    /// The applied controls as a per-path open-loop process.
    pub fn applied_controls(&self) -> ControlProcess {
        ControlProcess::OpenLoop(
            VectorProcess::from_raw(self.n_paths, self.control_dim, self.grid.n_steps(), self.controls.clone())
                .expect("control storage is consistent"),
        )
    }

    pub fn mean_state(&self, step: usize) -> SpectralVector {
        let mut m = SpectralVector::zeros(self.dim);
        for p in 0..self.n_paths {
            for (acc, x) in m.iter_mut().zip(self.state(p, step)) {
                *acc += x;
            }
        }
        m / self.n_paths as f64
    }

    /// Sample mean of `|x(t_j)|²` at every grid point.
    pub fn mean_square_norms(&self) -> Vec<f64> {
        (0..=self.grid.n_steps())
            .map(|j| {
                let v: Vec<f64> = (0..self.n_paths)
                    .map(|p| self.state(p, j).iter().map(|x| x * x).sum())
                    .collect();
                stats::mean(&v)
            })
            .collect()
    }

    /// Values of one coordinate at step `j` across paths.
    pub fn coordinate(&self, step: usize, k: usize) -> Vec<f64> {
        (0..self.n_paths).map(|p| self.state(p, step)[k]).collect()
    }
}

/// Monte Carlo cost estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct CostEstimate {
    pub estimate: f64,
    pub stderr: f64,
    pub per_path: Vec<f64>,
}

/// Initial data as a process with at least one time index (index 0 is used).
pub fn initial_state(x0: &SpectralVector) -> VectorProcess {
    VectorProcess::constant(x0, 1)
}

fn check_finite(x: &[f64], step: usize, path: usize) -> Result<()> {
    if x.iter().any(|v| !v.is_finite() || v.abs() > OVERFLOW_GUARD) {
        return Err(Error::Diverged { step, path });
    }
    Ok(())
}

fn first_error(results: Vec<Result<()>>) -> Result<()> {
    results.into_iter().collect()
}

/// Simulates the controlled equation `dx = (Ax + a)dt + b dw` on every path.
pub fn simulate_controlled(
    scenario: &Scenario,
    x0: &VectorProcess,
    control: &ControlProcess,
    ens: &BrownianEnsemble,
) -> Result<StateEnsemble> {
    let grid = *ens.grid();
    let n = scenario.dim();
    let m = scenario.control_dim;
    let n_steps = grid.n_steps();
    let n_paths = ens.n_paths();
    x0.check_shape("initial state", n_paths, 1, n)?;
    if let ControlProcess::OpenLoop(v) = control {
        v.check_shape("open-loop control", n_paths, n_steps, m)?;
    }
    let dt = grid.dt();
    let decay = scenario.op.semigroup_factors(dt)?;

    let mut states = vec![0.0; n_paths * (n_steps + 1) * n];
    let mut controls = vec![0.0; n_paths * n_steps * m];
    let results: Vec<Result<()>> = states
        .par_chunks_mut((n_steps + 1) * n)
        .zip(controls.par_chunks_mut(n_steps * m.max(1)))
        .enumerate()
        .map(|(p, (srow, crow))| {
            srow[..n].copy_from_slice(x0.at(p, 0));
            check_finite(&srow[..n], 0, p)?;
            let mut x = SpectralVector::from_column_slice(&srow[..n]);
            let dw = ens.path(p);
            for j in 0..n_steps {
                let t = grid.t(j);
                let raw = control.value(p, j, t, &x);
                if raw.len() != m {
                    return domain(format!("control has dimension {} but expected {m}", raw.len()));
                }
                let u = scenario.control_set.project(&raw);
                crow[j * m..(j + 1) * m].copy_from_slice(u.as_slice());
                let a = scenario.drift(t, &x, &u);
                let b = scenario.diffusion(t, &x, &u);
                for k in 0..n {
                    x[k] = decay[k] * (x[k] + a[k] * dt + b[k] * dw[j]);
                }
                check_finite(x.as_slice(), j + 1, p)?;
                srow[(j + 1) * n..(j + 2) * n].copy_from_slice(x.as_slice());
            }
            Ok(())
        })
        .collect();
    first_error(results)?;
    Ok(StateEnsemble {
        grid,
        n_paths,
        dim: n,
        control_dim: m,
        states,
        controls,
        fingerprint: ens.fingerprint(),
    })
}

/// Shared driver for the linear test equations: `x ≡ 0` before `t0_index`,
/// `x(t0) = init`, then exponential Euler with the supplied affine step.
fn simulate_linear<F>(
    op: &OperatorSpec,
    t0_index: usize,
    init: &VectorProcess,
    ens: &BrownianEnsemble,
    step: F,
) -> Result<StateEnsemble>
where
    F: Fn(usize, usize, &[f64], &mut [f64], &mut [f64]) + Sync,
{
    let grid = *ens.grid();
    let n = op.n_modes();
    let n_steps = grid.n_steps();
    let n_paths = ens.n_paths();
    if t0_index > n_steps {
        return domain(format!("start index {t0_index} beyond grid of {n_steps} steps"));
    }
    init.check_shape("initial state", n_paths, 1, n)?;
    let dt = grid.dt();
    let decay = op.semigroup_factors(dt)?;

    let mut states = vec![0.0; n_paths * (n_steps + 1) * n];
    let results: Vec<Result<()>> = states
        .par_chunks_mut((n_steps + 1) * n)
        .enumerate()
        .map(|(p, row)| {
            row[t0_index * n..(t0_index + 1) * n].copy_from_slice(init.at(p, 0));
            check_finite(&row[t0_index * n..(t0_index + 1) * n], t0_index, p)?;
            let dw = ens.path(p);
            let mut drift = vec![0.0; n];
            let mut diff = vec![0.0; n];
            for j in t0_index..n_steps {
                let (head, tail) = row.split_at_mut((j + 1) * n);
                let x = &head[j * n..];
                step(p, j, x, &mut drift, &mut diff);
                let next = &mut tail[..n];
                for k in 0..n {
                    next[k] = decay[k] * (x[k] + drift[k] * dt + diff[k] * dw[j]);
                }
                check_finite(next, j + 1, p)?;
            }
            Ok(())
        })
        .collect();
    first_error(results)?;
    Ok(StateEnsemble {
        grid,
        n_paths,
        dim: n,
        control_dim: 0,
        states,
        controls: Vec::new(),
        fingerprint: ens.fingerprint(),
    })
}

/// `dz = (Az + v₁)ds + v₂ dw` on `(t, T]`, `z(t) = η`.
pub fn simulate_linear_test(
    op: &OperatorSpec,
    t0_index: usize,
    eta: &VectorProcess,
    v1: &VectorProcess,
    v2: &VectorProcess,
    ens: &BrownianEnsemble,
) -> Result<StateEnsemble> {
    let n = op.n_modes();
    let (np, ns) = (ens.n_paths(), ens.grid().n_steps());
    v1.check_shape("v1", np, ns, n)?;
    v2.check_shape("v2", np, ns, n)?;
    simulate_linear(op, t0_index, eta, ens, |p, j, _x, drift, diff| {
        drift.copy_from_slice(v1.at(p, j));
        diff.copy_from_slice(v2.at(p, j));
    })
}

/// `dx = ((A + J)x + u)ds + (Kx + v)dw` on `(t, T]`, `x(t) = ξ`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_linearized(
    op: &OperatorSpec,
    j_coef: &MatrixProcess,
    k_coef: &MatrixProcess,
    t0_index: usize,
    xi: &VectorProcess,
    u: &VectorProcess,
    v: &VectorProcess,
    ens: &BrownianEnsemble,
) -> Result<StateEnsemble> {
    let n = op.n_modes();
    let (np, ns) = (ens.n_paths(), ens.grid().n_steps());
    j_coef.check_shape("J", np, ns, n)?;
    k_coef.check_shape("K", np, ns, n)?;
    u.check_shape("u", np, ns, n)?;
    v.check_shape("v", np, ns, n)?;
    simulate_linear(op, t0_index, xi, ens, |p, j, x, drift, diff| {
        let jm = j_coef.at(p, j);
        let km = k_coef.at(p, j);
        drift.copy_from_slice(u.at(p, j));
        diff.copy_from_slice(v.at(p, j));
        for c in 0..n {
            let xc = x[c];
            if xc == 0.0 {
                continue;
            }
            for r in 0..n {
                drift[r] += jm[c * n + r] * xc;
                diff[r] += km[c * n + r] * xc;
            }
        }
    })
}

/// Per-path cost `Σ_j g(t_j, x_j, u_j) dt + h(x_N)` (left-endpoint rule).
pub fn path_costs(scenario: &Scenario, traj: &StateEnsemble) -> Vec<f64> {
    let grid = traj.grid();
    let dt = grid.dt();
    let n_steps = grid.n_steps();
    (0..traj.n_paths())
        .into_par_iter()
        .map(|p| {
            let mut run = 0.0;
            for j in 0..n_steps {
                run += scenario.running_cost(grid.t(j), &traj.state_vec(p, j), &traj.control_vec(p, j));
            }
            run * dt + scenario.terminal_cost(&traj.state_vec(p, n_steps))
        })
        .collect()
}

/// Monte Carlo estimate of the cost functional with its standard error.
pub fn estimate_cost(
    scenario: &Scenario,
    x0: &VectorProcess,
    control: &ControlProcess,
    ens: &BrownianEnsemble,
) -> Result<CostEstimate> {
    let traj = simulate_controlled(scenario, x0, control, ens)?;
    Ok(cost_of(scenario, &traj))
}

pub fn cost_of(scenario: &Scenario, traj: &StateEnsemble) -> CostEstimate {
    let per_path = path_costs(scenario, traj);
    let (estimate, stderr) = stats::mean_stderr(&per_path);
    CostEstimate {
        estimate,
        stderr,
        per_path,
    }
}

#[cfg(test)]
mod tests;
