//! First-order adjoint equation by least-squares Monte Carlo.
//!
//! Backward step on the forward grid:
//! `ỹ_j = E_j[S(dt)y_{j+1}]`, `Ỹ_j = E_j[S(dt)y_{j+1}Δw_j]/dt`,
//! `y_j = ỹ_j − f_j dt` with the explicit driver
//! `f_j = −a_xᵀỹ_j − b_xᵀỸ_j + g_x` evaluated on the reference path.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{domain, Error, Result};
use crate::forward::{BrownianEnsemble, Scenario, StateEnsemble, TimeGrid};
use crate::process::VectorProcess;
use crate::spectral::{OperatorSpec, SpectralVector};

/// Polynomial features `1, x_k, x_k x_l (k ≤ l)` on the leading modes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegressionBasis {
    pub degree: usize,
    pub max_modes: usize,
    pub ridge: f64,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        Self {
            degree: 2,
            max_modes: 4,
            ridge: 1e-8,
        }
    }
}

impl RegressionBasis {
    pub fn new(degree: usize, max_modes: usize, ridge: f64) -> Result<Self> {
        if degree > 2 {
            return domain("regression basis supports degree 0, 1 or 2");
        }
        if !(ridge >= 0.0) {
            return domain("ridge must be non-negative");
        }
        Ok(Self {
            degree,
            max_modes,
            ridge,
        })
    }

    pub fn n_features(&self, dim: usize) -> usize {
        let m = self.max_modes.min(dim);
        match self.degree {
            0 => 1,
            1 => 1 + m,
            _ => 1 + m + m * (m + 1) / 2,
        }
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        let m = self.max_modes.min(x.len());
        out[0] = 1.0;
        if self.degree == 0 {
            return;
        }
        out[1..=m].copy_from_slice(&x[..m]);
        if self.degree == 1 {
            return;
        }
        let mut i = 1 + m;
        for k in 0..m {
            for l in k..m {
                out[i] = x[k] * x[l];
                i += 1;
            }
        }
    }

    /// Design matrix (paths × features) at one step of a trajectory.
    pub fn design(&self, traj: &StateEnsemble, step: usize) -> DMatrix<f64> {
        let nf = self.n_features(traj.dim());
        let np = traj.n_paths();
        let mut phi = DMatrix::zeros(np, nf);
        let mut row = vec![0.0; nf];
        for p in 0..np {
            self.eval(traj.state(p, step), &mut row);
            for (c, v) in row.iter().enumerate() {
                phi[(p, c)] = *v;
            }
        }
        phi
    }
}

fn solve_normal(gram: DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let max_diag = gram.diagonal().amax();
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::DegenerateBasis("normal matrix is not positive definite".into()))?;
    let l = chol.l_dirty();
    let min_pivot = (0..l.nrows()).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
    if !(min_pivot > 1e-13 * max_diag) {
        return Err(Error::DegenerateBasis(format!(
            "normal matrix is numerically singular (pivot {min_pivot:.3e}, scale {max_diag:.3e})"
        )));
    }
    Ok(chol)
}

/// Ridge least squares `min ‖T − Φβ‖² + ridge‖β‖²`; returns `(β, Φβ)`.
pub fn lsmc_regress(features: &DMatrix<f64>, targets: &DMatrix<f64>, ridge: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if features.nrows() != targets.nrows() {
        return domain(format!(
            "features have {} rows but targets have {}",
            features.nrows(),
            targets.nrows()
        ));
    }
    if !(ridge >= 0.0) {
        return domain("ridge must be non-negative");
    }
    let mut gram = features.tr_mul(features);
    for i in 0..gram.nrows() {
        gram[(i, i)] += ridge;
    }
    let chol = solve_normal(gram)?;
    let beta = chol.solve(&features.tr_mul(targets));
    let fitted = features * &beta;
    Ok((beta, fitted))
}

/// Conditional-expectation operator at one step: standardized features with
/// constant columns removed, factored once and applied to many targets.
pub(crate) struct Projector {
    z: DMatrix<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl Projector {
    pub(crate) fn new(basis: &RegressionBasis, traj: &StateEnsemble, step: usize) -> Result<Self> {
        let np = traj.n_paths();
        let nf = basis.n_features(traj.dim());
        if nf * 10 > np {
            return Err(Error::DegenerateBasis(format!(
                "{nf} features exceed the guard of n_paths/10 = {}",
                np / 10
            )));
        }
        let phi = basis.design(traj, step);
        let mut cols = vec![DVector::from_element(np, 1.0)];
        for c in 1..nf {
            let col = phi.column(c);
            let mean = col.mean();
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / np as f64;
            let scale = mean.abs().max(1.0);
            if var.sqrt() <= 1e-10 * scale {
                continue;
            }
            let sd = var.sqrt();
            cols.push(col.map(|v| (v - mean) / sd));
        }
        let z = DMatrix::from_columns(&cols);
        let mut gram = z.tr_mul(&z);
        // the intercept is not penalized, so constants are reproduced exactly
        for i in 1..gram.nrows() {
            gram[(i, i)] += basis.ridge * np as f64;
        }
        let chol = solve_normal(gram)?;
        Ok(Self { z, chol })
    }

    pub(crate) fn fit(&self, targets: &DMatrix<f64>) -> DMatrix<f64> {
        let beta = self.chol.solve(&self.z.tr_mul(targets));
        &self.z * beta
    }
}

/// Solution of the first-order adjoint equation on every path.
#[derive(Clone, Debug)]
pub struct AdjointPair {
    grid: TimeGrid,
    fingerprint: u64,
    /// `y_j`, indices `0..=N`.
    pub y: VectorProcess,
    /// `ỹ_j = E_j[S(dt)y_{j+1}]`, indices `0..N`.
    pub y_cond: VectorProcess,
    /// `Y_j`, indices `0..N`.
    pub big_y: VectorProcess,
    /// Driver `f_j`, indices `0..N`.
    pub driver: VectorProcess,
}

impl AdjointPair {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn n_paths(&self) -> usize {
        self.y.n_paths().unwrap_or(1)
    }

    pub fn dim(&self) -> usize {
        self.y.dim()
    }

    /// Multiplies every component by `c` (used for argmax-invariance checks).
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            grid: self.grid,
            fingerprint: self.fingerprint,
            y: self.y.scaled(c),
            y_cond: self.y_cond.scaled(c),
            big_y: self.big_y.scaled(c),
            driver: self.driver.scaled(c),
        }
    }
}

pub(crate) fn check_lineage(traj: &StateEnsemble, ens: &BrownianEnsemble) -> Result<()> {
    if traj.fingerprint() != ens.fingerprint() || traj.grid() != ens.grid() || traj.n_paths() != ens.n_paths() {
        return domain("trajectory was not generated by this Brownian ensemble");
    }
    Ok(())
}

/// Backward sweep for a linear adjoint with a user driver
/// `f(path, step, ỹ, Ỹ)`; the regression features come from `traj`.
pub fn solve_linear_adjoint<F>(
    op: &OperatorSpec,
    traj: &StateEnsemble,
    ens: &BrownianEnsemble,
    basis: &RegressionBasis,
    y_terminal: &VectorProcess,
    driver: F,
) -> Result<AdjointPair>
where
    F: Fn(usize, usize, &SpectralVector, &SpectralVector) -> SpectralVector + Sync,
{
    check_lineage(traj, ens)?;
    let n = op.n_modes();
    let np = ens.n_paths();
    let grid = *ens.grid();
    let n_steps = grid.n_steps();
    let dt = grid.dt();
    y_terminal.check_shape("terminal value", np, 1, n)?;
    let decay = op.semigroup_factors(dt)?;

    let mut y = vec![0.0; np * (n_steps + 1) * n];
    let mut y_cond = vec![0.0; np * n_steps * n];
    let mut big_y = vec![0.0; np * n_steps * n];
    let mut drv = vec![0.0; np * n_steps * n];
    let yi = |p: usize, j: usize| (p * (n_steps + 1) + j) * n;
    let si = |p: usize, j: usize| (p * n_steps + j) * n;
    for p in 0..np {
        y[yi(p, n_steps)..yi(p, n_steps) + n].copy_from_slice(y_terminal.at(p, 0));
    }

    for j in (0..n_steps).rev() {
        let proj = Projector::new(basis, traj, j)?;
        let mut s_next = DMatrix::zeros(np, n);
        for p in 0..np {
            for k in 0..n {
                s_next[(p, k)] = decay[k] * y[yi(p, j + 1) + k];
            }
        }
        let cond = proj.fit(&s_next);
        let mut mart = s_next - &cond;
        for p in 0..np {
            let w = ens.increment(p, j) / dt;
            mart.row_mut(p).scale_mut(w);
        }
        let zfit = proj.fit(&mart);
        let rows: Vec<(SpectralVector, SpectralVector, SpectralVector)> = (0..np)
            .into_par_iter()
            .map(|p| {
                let yc = SpectralVector::from_iterator(n, cond.row(p).iter().copied());
                let zc = SpectralVector::from_iterator(n, zfit.row(p).iter().copied());
                let f = driver(p, j, &yc, &zc);
                (yc, zc, f)
            })
            .collect();
        for (p, (yc, zc, f)) in rows.into_iter().enumerate() {
            if f.len() != n {
                return domain("driver returned a vector of the wrong dimension");
            }
            let o = si(p, j);
            y_cond[o..o + n].copy_from_slice(yc.as_slice());
            big_y[o..o + n].copy_from_slice(zc.as_slice());
            drv[o..o + n].copy_from_slice(f.as_slice());
            let oy = yi(p, j);
            for k in 0..n {
                y[oy + k] = yc[k] - f[k] * dt;
            }
        }
    }
    Ok(AdjointPair {
        grid,
        fingerprint: ens.fingerprint(),
        y: VectorProcess::from_raw(np, n, n_steps + 1, y)?,
        y_cond: VectorProcess::from_raw(np, n, n_steps, y_cond)?,
        big_y: VectorProcess::from_raw(np, n, n_steps, big_y)?,
        driver: VectorProcess::from_raw(np, n, n_steps, drv)?,
    })
}

/// First-order adjoint along a reference trajectory (state and applied
/// controls are read from `traj`).
pub fn solve_first_adjoint(
    scenario: &Scenario,
    traj: &StateEnsemble,
    ens: &BrownianEnsemble,
    basis: &RegressionBasis,
) -> Result<AdjointPair> {
    let n = scenario.dim();
    if traj.dim() != n {
        return domain("trajectory dimension does not match the scenario");
    }
    let np = traj.n_paths();
    let n_steps = traj.grid().n_steps();
    let terminal: Vec<f64> = (0..np)
        .into_par_iter()
        .flat_map_iter(|p| {
            let hx = scenario.terminal_x(&traj.state_vec(p, n_steps));
            hx.iter().map(|v| -v).collect::<Vec<_>>()
        })
        .collect();
    let terminal = VectorProcess::from_raw(np, n, 1, terminal)?;
    let grid = *traj.grid();
    solve_linear_adjoint(&scenario.op, traj, ens, basis, &terminal, |p, j, yc, zc| {
        let t = grid.t(j);
        let x = traj.state_vec(p, j);
        let u = traj.control_vec(p, j);
        -scenario.drift_x(t, &x, &u).tr_mul(yc) - scenario.diffusion_x(t, &x, &u).tr_mul(zc) + scenario.cost_x(t, &x, &u)
    })
}

/// `y(t_j) = S(T − t_j)y_T − Σ_{i≥j} S(t_i − t_j) f(t_i) dt` for deterministic data.
pub fn deterministic_first_adjoint(
    op: &OperatorSpec,
    y_t: &SpectralVector,
    f_path: &VectorProcess,
    grid: &TimeGrid,
) -> Result<VectorProcess> {
    let n = op.n_modes();
    op.check_dim(y_t.len())?;
    if !f_path.is_shared() {
        return domain("deterministic adjoint needs a deterministic driver");
    }
    let n_steps = grid.n_steps();
    f_path.check_shape("driver", 1, n_steps, n)?;
    let dt = grid.dt();
    let decay = op.semigroup_factors(dt)?;
    let mut out = vec![SpectralVector::zeros(n); n_steps + 1];
    out[n_steps] = y_t.clone();
    for j in (0..n_steps).rev() {
        let f = f_path.at(0, j);
        out[j] = SpectralVector::from_fn(n, |k, _| decay[k] * out[j + 1][k] - f[k] * dt);
    }
    Ok(VectorProcess::deterministic(n, n_steps + 1, |j| out[j].clone()))
}
