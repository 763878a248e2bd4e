//! Second-order adjoint equation for the `n × n` matrix process `(P, Q)`.
//!
//! The equation is vectorized column-major to length `n²` and solved with
//! the same regression step as the first-order adjoint:
//! `R = 𝒯(dt)P_{j+1}`, `P̃_j = E_j[R]`, `Q̃_j = E_j[RΔw_j]/dt`,
//! `P_j = P̃_j + dt(JᵀP̃ + P̃J + KᵀP̃K + KᵀQ̃ + Q̃K − F)`.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::adjoint::{check_lineage, AdjointPair, Projector, RegressionBasis};
use crate::error::{domain, Result};
use crate::forward::{BrownianEnsemble, Scenario, StateEnsemble, TimeGrid};
use crate::process::MatrixProcess;
use crate::spectral::OperatorSpec;

/// Asymmetry above which a warning is recorded for symmetric data.
pub const SYMMETRY_TOLERANCE: f64 = 1e-6;

/// `𝒯(dt)M = S(dt) M S(dt)*`, entrywise `M_kl e^{(μ_k + μ_l)dt}`.
pub fn tensor_semigroup_apply(op: &OperatorSpec, dt: f64, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = op.n_modes();
    if m.shape() != (n, n) {
        return domain(format!("matrix is {:?} but the operator has {n} modes", m.shape()));
    }
    let f = op.semigroup_factors(dt)?;
    Ok(DMatrix::from_fn(n, n, |k, l| m[(k, l)] * f[k] * f[l]))
}

/// Coefficients of the second-order adjoint equation.
#[derive(Clone, Debug)]
pub struct SecondOrderData {
    pub j: MatrixProcess,
    pub k: MatrixProcess,
    pub f: MatrixProcess,
    /// Terminal value, one time index.
    pub p_t: MatrixProcess,
}

impl SecondOrderData {
    pub fn is_deterministic(&self) -> bool {
        self.j.is_shared() && self.k.is_shared() && self.f.is_shared() && self.p_t.is_shared()
    }

    pub fn scaled_source(&self, c: f64) -> Self {
        Self {
            j: self.j.clone(),
            k: self.k.clone(),
            f: self.f.scaled(c),
            p_t: self.p_t.scaled(c),
        }
    }

    /// Data along a reference trajectory: `J = a_x`, `K = b_x`,
    /// `F = −ℍ_xx(x̄, ū, ỹ, Ỹ)`, `P_T = −h_xx(x̄(T))`. When the scenario flags
    /// its linearization deterministic the first path is shared by all.
    pub fn from_scenario(scenario: &Scenario, traj: &StateEnsemble, pair: &AdjointPair) -> Result<Self> {
        let n = scenario.dim();
        let grid = *traj.grid();
        let n_steps = grid.n_steps();
        let np = traj.n_paths();
        if pair.n_paths() != np || pair.grid() != traj.grid() || pair.fingerprint() != traj.fingerprint() {
            return domain("adjoint and trajectory come from different ensembles");
        }
        let slice = |p: usize, j: usize| {
            let t = grid.t(j);
            let x = traj.state_vec(p, j);
            let u = traj.control_vec(p, j);
            let yc = pair.y_cond.vec_at(p, j);
            let zc = pair.big_y.vec_at(p, j);
            (
                scenario.drift_x(t, &x, &u),
                scenario.diffusion_x(t, &x, &u),
                -scenario.hamiltonian_xx(t, &x, &u, &yc, &zc),
            )
        };
        if scenario.deterministic_linearization {
            let rows: Vec<_> = (0..n_steps).map(|j| slice(0, j)).collect();
            return Ok(Self {
                j: MatrixProcess::deterministic(n, n_steps, |j| rows[j].0.clone()),
                k: MatrixProcess::deterministic(n, n_steps, |j| rows[j].1.clone()),
                f: MatrixProcess::deterministic(n, n_steps, |j| rows[j].2.clone()),
                p_t: MatrixProcess::constant(&-scenario.terminal_xx(&traj.state_vec(0, n_steps)), 1),
            });
        }
        let rows: Vec<Vec<_>> = (0..np)
            .into_par_iter()
            .map(|p| (0..n_steps).map(|j| slice(p, j)).collect())
            .collect();
        let term: Vec<_> = (0..np)
            .into_par_iter()
            .map(|p| -scenario.terminal_xx(&traj.state_vec(p, n_steps)))
            .collect();
        Ok(Self {
            j: MatrixProcess::per_path(np, n, n_steps, |p, j| rows[p][j].0.clone()),
            k: MatrixProcess::per_path(np, n, n_steps, |p, j| rows[p][j].1.clone()),
            f: MatrixProcess::per_path(np, n, n_steps, |p, j| rows[p][j].2.clone()),
            p_t: MatrixProcess::per_path(np, n, 1, |p, _| term[p].clone()),
        })
    }
}

/// Solution `(P, Q)` of the second-order adjoint equation.
#[derive(Clone, Debug)]
pub struct SecondOrderAdjoint {
    grid: TimeGrid,
    fingerprint: u64,
    /// `P_j`, indices `0..=N`.
    pub p: MatrixProcess,
    /// `P̃_j = E_j[𝒯(dt)P_{j+1}]`, indices `0..N`.
    pub p_cond: MatrixProcess,
    /// `Q̃_j`, indices `0..N`.
    pub q: MatrixProcess,
    pub symmetry_drift: f64,
    pub warnings: Vec<String>,
}

impl SecondOrderAdjoint {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            p: self.p.scaled(c),
            p_cond: self.p_cond.scaled(c),
            q: self.q.scaled(c),
            ..self.clone()
        }
    }
}

fn step_matrix(
    pc: &DMatrix<f64>,
    qc: &DMatrix<f64>,
    jm: &DMatrix<f64>,
    km: &DMatrix<f64>,
    fm: &DMatrix<f64>,
    dt: f64,
) -> DMatrix<f64> {
    let kt = km.transpose();
    let drv = jm.tr_mul(pc) + pc * jm + &kt * pc * km + &kt * qc + qc * km - fm;
    pc + drv * dt
}

fn check_data(data: &SecondOrderData, n: usize, np: usize, n_steps: usize) -> Result<()> {
    data.j.check_shape("J", np, n_steps, n)?;
    data.k.check_shape("K", np, n_steps, n)?;
    data.f.check_shape("F", np, n_steps, n)?;
    data.p_t.check_shape("P_T", np, 1, n)
}

/// Backward regression sweep; `traj` supplies the regression features and
/// must come from `ens`.
pub fn solve_second_adjoint(
    op: &OperatorSpec,
    data: &SecondOrderData,
    traj: &StateEnsemble,
    ens: &BrownianEnsemble,
    basis: &RegressionBasis,
) -> Result<SecondOrderAdjoint> {
    check_lineage(traj, ens)?;
    let n = op.n_modes();
    let nn = n * n;
    let np = ens.n_paths();
    let grid = *ens.grid();
    let n_steps = grid.n_steps();
    let dt = grid.dt();
    check_data(data, n, np, n_steps)?;
    let symmetric_input = data.f.is_symmetric() && data.p_t.is_symmetric();

    if data.is_deterministic() {
        // conditional expectations of deterministic data are exact, Q = 0
        let mut p = vec![DMatrix::zeros(n, n); n_steps + 1];
        let mut pc = vec![DMatrix::zeros(n, n); n_steps];
        p[n_steps] = data.p_t.matrix_at(0, 0);
        let zero = DMatrix::zeros(n, n);
        for j in (0..n_steps).rev() {
            pc[j] = tensor_semigroup_apply(op, dt, &p[j + 1])?;
            p[j] = step_matrix(
                &pc[j],
                &zero,
                &data.j.matrix_at(0, j),
                &data.k.matrix_at(0, j),
                &data.f.matrix_at(0, j),
                dt,
            );
        }
        let p = MatrixProcess::deterministic(n, n_steps + 1, |j| p[j].clone());
        return Ok(finish(
            grid,
            ens.fingerprint(),
            p,
            MatrixProcess::deterministic(n, n_steps, |j| pc[j].clone()),
            MatrixProcess::zeros(n, n_steps),
            symmetric_input,
        ));
    }

    let decay = op.semigroup_factors(dt)?;
    let pi = |p: usize, j: usize| (p * (n_steps + 1) + j) * nn;
    let si = |p: usize, j: usize| (p * n_steps + j) * nn;
    let mut pv = vec![0.0; np * (n_steps + 1) * nn];
    let mut pcv = vec![0.0; np * n_steps * nn];
    let mut qv = vec![0.0; np * n_steps * nn];
    for p in 0..np {
        pv[pi(p, n_steps)..pi(p, n_steps) + nn].copy_from_slice(data.p_t.at(p, 0));
    }
    for j in (0..n_steps).rev() {
        let proj = Projector::new(basis, traj, j)?;
        let mut r = DMatrix::zeros(np, nn);
        for p in 0..np {
            let src = &pv[pi(p, j + 1)..pi(p, j + 1) + nn];
            for l in 0..n {
                for k in 0..n {
                    r[(p, l * n + k)] = src[l * n + k] * decay[k] * decay[l];
                }
            }
        }
        let cond = proj.fit(&r);
        let mut mart = r - &cond;
        for p in 0..np {
            mart.row_mut(p).scale_mut(ens.increment(p, j) / dt);
        }
        let qfit = proj.fit(&mart);
        let next: Vec<DMatrix<f64>> = (0..np)
            .into_par_iter()
            .map(|p| {
                let pc = DMatrix::from_iterator(n, n, cond.row(p).iter().copied());
                let qc = DMatrix::from_iterator(n, n, qfit.row(p).iter().copied());
                step_matrix(
                    &pc,
                    &qc,
                    &data.j.matrix_at(p, j),
                    &data.k.matrix_at(p, j),
                    &data.f.matrix_at(p, j),
                    dt,
                )
            })
            .collect();
        for p in 0..np {
            let o = si(p, j);
            for c in 0..nn {
                pcv[o + c] = cond[(p, c)];
                qv[o + c] = qfit[(p, c)];
            }
            pv[pi(p, j)..pi(p, j) + nn].copy_from_slice(next[p].as_slice());
        }
    }
    Ok(finish(
        grid,
        ens.fingerprint(),
        MatrixProcess::from_raw(Some(np), n, n_steps + 1, pv),
        MatrixProcess::from_raw(Some(np), n, n_steps, pcv),
        MatrixProcess::from_raw(Some(np), n, n_steps, qv),
        symmetric_input,
    ))
}

fn finish(
    grid: TimeGrid,
    fingerprint: u64,
    p: MatrixProcess,
    p_cond: MatrixProcess,
    q: MatrixProcess,
    symmetric_input: bool,
) -> SecondOrderAdjoint {
    let symmetry_drift = p.max_asymmetry();
    let mut warnings = Vec::new();
    if symmetric_input && symmetry_drift > SYMMETRY_TOLERANCE {
        warnings.push(format!("symmetry drift {symmetry_drift:.3e} exceeds {SYMMETRY_TOLERANCE:e}"));
    }
    SecondOrderAdjoint {
        grid,
        fingerprint,
        p,
        p_cond,
        q,
        symmetry_drift,
        warnings,
    }
}

/// Deterministic reference: classical RK4 backward on
/// `P′ = −(A + J)ᵀP − P(A + J) − KᵀPK + F`, coefficients frozen on each grid
/// interval, substeps chosen from the stiffness of `A + J`.
pub fn lyapunov_oracle(op: &OperatorSpec, data: &SecondOrderData, grid: &TimeGrid) -> Result<MatrixProcess> {
    if !data.is_deterministic() {
        return domain("lyapunov_oracle needs deterministic coefficients");
    }
    let n = op.n_modes();
    let n_steps = grid.n_steps();
    check_data(data, n, 1, n_steps)?;
    let dt = grid.dt();
    let a = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(op.eigenvalues()));
    let mut out = vec![DMatrix::zeros(n, n); n_steps + 1];
    let mut p = data.p_t.matrix_at(0, 0);
    out[n_steps] = p.clone();
    for j in (0..n_steps).rev() {
        let aj = &a + data.j.matrix_at(0, j);
        let km = data.k.matrix_at(0, j);
        let fm = data.f.matrix_at(0, j);
        let stiff = 2.0 * aj.abs().max() * n as f64 + km.norm_squared() + 1.0;
        let sub = ((dt * stiff / 0.02).ceil() as usize).max(1);
        let h = dt / sub as f64;
        // derivative with respect to time-to-go
        let rhs = |p: &DMatrix<f64>| aj.tr_mul(p) + p * &aj + km.tr_mul(p) * &km - &fm;
        for _ in 0..sub {
            let k1 = rhs(&p);
            let k2 = rhs(&(&p + &k1 * (0.5 * h)));
            let k3 = rhs(&(&p + &k2 * (0.5 * h)));
            let k4 = rhs(&(&p + &k3 * h));
            p += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        out[j] = p.clone();
    }
    Ok(MatrixProcess::deterministic(n, n_steps + 1, |j| out[j].clone()))
}
