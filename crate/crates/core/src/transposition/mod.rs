//! Monte Carlo checks of the duality identities that define the adjoint
//! processes, and the stability probe of the second-order solution in `K`.

use rand::Rng;
use rayon::prelude::*;

use crate::adjoint::{AdjointPair, RegressionBasis};
use crate::error::{Error, Result};
use crate::forward::{simulate_linear_test, simulate_linearized, BrownianEnsemble, StateEnsemble};
use crate::process::{MatrixProcess, VectorProcess};
use crate::second_order::{solve_second_adjoint, SecondOrderAdjoint, SecondOrderData};
use crate::spectral::{OperatorSpec, SpectralVector};
use crate::stats;

/// `|residual| ≤ k_sigma·stderr + c_bias·dt`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PassRule {
    pub k_sigma: f64,
    pub c_bias: f64,
}

impl Default for PassRule {
    fn default() -> Self {
        Self {
            k_sigma: 3.0,
            c_bias: 0.0,
        }
    }
}

impl PassRule {
    pub fn budget(&self, stderr: f64, dt: f64) -> f64 {
        self.k_sigma * stderr + self.c_bias * dt
    }

    pub fn passes(&self, residual: f64, stderr: f64, dt: f64) -> bool {
        residual.abs() <= self.budget(stderr, dt)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentityReport {
    pub identity: String,
    pub n_paths: usize,
    pub dt: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
    pub stderr: f64,
    pub budget: f64,
    pub pass: bool,
}

impl IdentityReport {
    fn from_paths(identity: &str, lhs: &[f64], rhs: &[f64], dt: f64, rule: &PassRule) -> Self {
        let resid: Vec<f64> = lhs.iter().zip(rhs).map(|(a, b)| a - b).collect();
        let (residual, stderr) = stats::mean_stderr(&resid);
        let budget = rule.budget(stderr, dt);
        Self {
            identity: identity.to_string(),
            n_paths: lhs.len(),
            dt,
            lhs: stats::mean(lhs),
            rhs: stats::mean(rhs),
            residual,
            stderr,
            budget,
            pass: residual.abs() <= budget,
        }
    }
}

/// Test data `(t, η, v₁, v₂)` of the first-order identity.
#[derive(Clone, Debug)]
pub struct FirstOrderTest {
    pub t_index: usize,
    pub eta: VectorProcess,
    pub v1: VectorProcess,
    pub v2: VectorProcess,
}

impl FirstOrderTest {
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            t_index: self.t_index,
            eta: self.eta.scaled(c),
            v1: self.v1.scaled(c),
            v2: self.v2.scaled(c),
        }
    }
}

/// Test data `(t, ξ₁, ξ₂, u₁, u₂, v₁, v₂)` of the second-order identity.
#[derive(Clone, Debug)]
pub struct SecondOrderTest {
    pub t_index: usize,
    pub xi1: VectorProcess,
    pub xi2: VectorProcess,
    pub u1: VectorProcess,
    pub u2: VectorProcess,
    pub v1: VectorProcess,
    pub v2: VectorProcess,
}

fn same_lineage(fp: u64, ens: &BrownianEnsemble, what: &str) -> Result<()> {
    if fp != ens.fingerprint() {
        return Err(Error::IdentityInvalid(format!("{what} was computed on a different Brownian ensemble")));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `E⟨z(T), y_T⟩ − E∫⟨z, f⟩ = E⟨η, y(t)⟩ + E∫⟨v₁, ỹ⟩ + E∫⟨v₂, Y⟩`
/// with `z` the solution of `dz = (Az + v₁)ds + v₂dw`, `z(t) = η`.
pub fn verify_first_identity(
    pair: &AdjointPair,
    op: &OperatorSpec,
    test: &FirstOrderTest,
    ens: &BrownianEnsemble,
    rule: &PassRule,
) -> Result<IdentityReport> {
    same_lineage(pair.fingerprint(), ens, "adjoint")?;
    if pair.grid() != ens.grid() {
        return Err(Error::IdentityInvalid("adjoint grid differs from the ensemble grid".into()));
    }
    let z = simulate_linear_test(op, test.t_index, &test.eta, &test.v1, &test.v2, ens)?;
    let grid = ens.grid();
    let n_steps = grid.n_steps();
    let dt = grid.dt();
    let t0 = test.t_index;
    let sides: Vec<(f64, f64)> = (0..ens.n_paths())
        .into_par_iter()
        .map(|p| {
            let mut lhs = dot(z.state(p, n_steps), pair.y.at(p, n_steps));
            let mut rhs = dot(test.eta.at(p, 0), pair.y.at(p, t0));
            let mut lint = 0.0;
            let mut rint = 0.0;
            for j in t0..n_steps {
                lint += dot(z.state(p, j), pair.driver.at(p, j));
                rint += dot(test.v1.at(p, j), pair.y_cond.at(p, j)) + dot(test.v2.at(p, j), pair.big_y.at(p, j));
            }
            lhs -= lint * dt;
            rhs += rint * dt;
            (lhs, rhs)
        })
        .collect();
    let (lhs, rhs): (Vec<f64>, Vec<f64>) = sides.into_iter().unzip();
    Ok(IdentityReport::from_paths("first_order", &lhs, &rhs, dt, rule))
}

fn mat_vec(m: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    out.iter_mut().for_each(|v| *v = 0.0);
    for c in 0..n {
        let xc = x[c];
        for r in 0..n {
            out[r] += m[c * n + r] * xc;
        }
    }
}

/// Per-path `⟨P_T x₁(T), x₂(T)⟩ − Σ dt⟨F x₁, x₂⟩`.
fn second_lhs(data: &SecondOrderData, x1: &StateEnsemble, x2: &StateEnsemble, t0: usize) -> Vec<f64> {
    let grid = x1.grid();
    let n_steps = grid.n_steps();
    let dt = grid.dt();
    let n = x1.dim();
    (0..x1.n_paths())
        .into_par_iter()
        .map(|p| {
            let mut buf = vec![0.0; n];
            mat_vec(data.p_t.at(p, 0), x1.state(p, n_steps), &mut buf);
            let term = dot(&buf, x2.state(p, n_steps));
            let mut run = 0.0;
            for j in t0..n_steps {
                mat_vec(data.f.at(p, j), x1.state(p, j), &mut buf);
                run += dot(&buf, x2.state(p, j));
            }
            term - run * dt
        })
        .collect()
}

/// Second-order identity with the pre-limit matrix `(P̃, Q̃)`:
/// `E⟨P_T x₁(T), x₂(T)⟩ − E∫⟨F x₁, x₂⟩ = E⟨P(t)ξ₁, ξ₂⟩ + E∫[⟨P̃u₁, x₂⟩ + ⟨P̃x₁, u₂⟩
/// + ⟨P̃Kx₁, v₂⟩ + ⟨P̃v₁, Kx₂ + v₂⟩ + ⟨Q̃v₁, x₂⟩ + ⟨Q̃x₁, v₂⟩]`.
pub fn verify_second_identity(
    sa: &SecondOrderAdjoint,
    op: &OperatorSpec,
    data: &SecondOrderData,
    test: &SecondOrderTest,
    ens: &BrownianEnsemble,
    rule: &PassRule,
) -> Result<IdentityReport> {
    same_lineage(sa.fingerprint(), ens, "second-order adjoint")?;
    let t0 = test.t_index;
    let x1 = simulate_linearized(op, &data.j, &data.k, t0, &test.xi1, &test.u1, &test.v1, ens)?;
    let x2 = simulate_linearized(op, &data.j, &data.k, t0, &test.xi2, &test.u2, &test.v2, ens)?;
    let lhs = second_lhs(data, &x1, &x2, t0);
    let grid = ens.grid();
    let n_steps = grid.n_steps();
    let dt = grid.dt();
    let n = op.n_modes();
    let rhs: Vec<f64> = (0..ens.n_paths())
        .into_par_iter()
        .map(|p| {
            let mut a = vec![0.0; n];
            let mut b = vec![0.0; n];
            mat_vec(sa.p.at(p, t0), test.xi1.at(p, 0), &mut a);
            let point = dot(&a, test.xi2.at(p, 0));
            let mut acc = 0.0;
            for j in t0..n_steps {
                let pc = sa.p_cond.at(p, j);
                let qc = sa.q.at(p, j);
                let km = data.k.at(p, j);
                let (x1j, x2j) = (x1.state(p, j), x2.state(p, j));
                let (u1, u2, v1, v2) = (test.u1.at(p, j), test.u2.at(p, j), test.v1.at(p, j), test.v2.at(p, j));
                // ⟨P̃(u₁ + v₁), ·⟩ terms
                mat_vec(pc, u1, &mut a);
                acc += dot(&a, x2j);
                mat_vec(pc, x1j, &mut a);
                acc += dot(&a, u2);
                mat_vec(km, x1j, &mut b);
                mat_vec(pc, &b, &mut a);
                acc += dot(&a, v2);
                mat_vec(km, x2j, &mut b);
                b.iter_mut().zip(v2).for_each(|(x, v)| *x += v);
                mat_vec(pc, v1, &mut a);
                acc += dot(&a, &b);
                mat_vec(qc, v1, &mut a);
                acc += dot(&a, x2j);
                mat_vec(qc, x1j, &mut a);
                acc += dot(&a, v2);
            }
            point + acc * dt
        })
        .collect();
    Ok(IdentityReport::from_paths("second_order", &lhs, &rhs, dt, rule))
}

/// The `ξ`-only reduction checked against a deterministic `P(t)` (for
/// instance the Lyapunov oracle): `E⟨P_T x₁(T), x₂(T)⟩ − E∫⟨F x₁, x₂⟩ = ⟨P(t)ξ₁, ξ₂⟩`.
#[allow(clippy::too_many_arguments)]
pub fn verify_second_reduction(
    p_ref: &MatrixProcess,
    op: &OperatorSpec,
    data: &SecondOrderData,
    t_index: usize,
    xi1: &VectorProcess,
    xi2: &VectorProcess,
    ens: &BrownianEnsemble,
    rule: &PassRule,
) -> Result<IdentityReport> {
    if !p_ref.is_shared() || !xi1.is_shared() || !xi2.is_shared() {
        return Err(Error::IdentityInvalid("reduction needs deterministic P and test vectors".into()));
    }
    let n = op.n_modes();
    let ns = ens.grid().n_steps();
    let zero = VectorProcess::zeros(n, ns);
    let x1 = simulate_linearized(op, &data.j, &data.k, t_index, xi1, &zero, &zero, ens)?;
    let x2 = simulate_linearized(op, &data.j, &data.k, t_index, xi2, &zero, &zero, ens)?;
    let lhs = second_lhs(data, &x1, &x2, t_index);
    let mut a = vec![0.0; n];
    mat_vec(p_ref.at(0, t_index), xi1.at(0, 0), &mut a);
    let r = dot(&a, xi2.at(0, 0));
    let rhs = vec![r; lhs.len()];
    Ok(IdentityReport::from_paths("second_order_reduction", &lhs, &rhs, ens.grid().dt(), rule))
}

/// One row of the Lipschitz probe.
#[derive(Clone, Debug, PartialEq)]
pub struct LipschitzRow {
    pub delta: f64,
    pub discrepancy: f64,
    /// `discrepancy / delta` (zero when `delta = 0`).
    pub ratio: f64,
}

/// `‖Q x₁ − Q^△ x₁^△‖` in `L²(Ω × [0, T])`, with `x₁` solving the linearized
/// equation for `(ξ, u, v) = (0, 0, v)` under `K` resp. `K^△`.
fn q_pairing_gap(
    op: &OperatorSpec,
    a: (&SecondOrderData, &SecondOrderAdjoint),
    b: (&SecondOrderData, &SecondOrderAdjoint),
    v: &VectorProcess,
    ens: &BrownianEnsemble,
) -> Result<f64> {
    let n = op.n_modes();
    let ns = ens.grid().n_steps();
    let zero_u = VectorProcess::zeros(n, ns);
    let zero_xi = VectorProcess::zeros(n, 1);
    let xa = simulate_linearized(op, &a.0.j, &a.0.k, 0, &zero_xi, &zero_u, v, ens)?;
    let xb = simulate_linearized(op, &b.0.j, &b.0.k, 0, &zero_xi, &zero_u, v, ens)?;
    let per_path: Vec<f64> = (0..ens.n_paths())
        .into_par_iter()
        .map(|p| {
            let mut qa = vec![0.0; n];
            let mut qb = vec![0.0; n];
            let mut s = 0.0;
            for j in 0..ns {
                mat_vec(a.1.q.at(p, j), xa.state(p, j), &mut qa);
                mat_vec(b.1.q.at(p, j), xb.state(p, j), &mut qb);
                s += qa.iter().zip(&qb).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
            }
            s
        })
        .collect();
    Ok((stats::mean(&per_path) * ens.grid().dt()).sqrt())
}

/// Solves the second-order equation for `K` and for `K + δ·direction`
/// (same ensemble, same features) and reports the largest pairing
/// discrepancy over the probes, divided by `δ`.
#[allow(clippy::too_many_arguments)]
pub fn lipschitz_probe(
    op: &OperatorSpec,
    base: &SecondOrderData,
    direction: &MatrixProcess,
    deltas: &[f64],
    probes: &[VectorProcess],
    traj: &StateEnsemble,
    ens: &BrownianEnsemble,
    basis: &RegressionBasis,
) -> Result<Vec<LipschitzRow>> {
    if probes.is_empty() {
        return Err(Error::Domain("Lipschitz probe needs at least one test direction".into()));
    }
    let sa = solve_second_adjoint(op, base, traj, ens, basis)?;
    let mut rows = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        if !(delta >= 0.0) {
            return Err(Error::Domain(format!("perturbation size must be non-negative, got {delta}")));
        }
        let pert = SecondOrderData {
            k: base.k.add_scaled(delta, direction)?,
            ..base.clone()
        };
        let sp = if delta == 0.0 {
            sa.clone()
        } else {
            solve_second_adjoint(op, &pert, traj, ens, basis)?
        };
        let mut worst: f64 = 0.0;
        for v in probes {
            worst = worst.max(q_pairing_gap(op, (base, &sa), (&pert, &sp), v, ens)?);
        }
        rows.push(LipschitzRow {
            delta,
            discrepancy: worst,
            ratio: if delta > 0.0 { worst / delta } else { 0.0 },
        });
    }
    Ok(rows)
}

/// Random test data for the first-order identity: a start index from
/// `{0, N/4, N/2, 3N/4}`, a random `η`, and inputs `v₁, v₂` that are smooth in
/// time plus (when `traj` is given) an adapted term linear in `x̄(t_j)`.
pub fn random_first_test(dim: usize, n_steps: usize, traj: Option<&StateEnsemble>, rng: &mut impl Rng) -> FirstOrderTest {
    let t_index = [0, n_steps / 4, n_steps / 2, 3 * n_steps / 4][rng.random_range(0..4)];
    let mut coef = || SpectralVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
    let (eta, a1, b1, a2, b2, c1, c2) = (coef(), coef(), coef(), coef(), coef(), coef(), coef());
    let freq = rng.random_range(0.5..4.0);
    let shape = move |a: &SpectralVector, b: &SpectralVector, j: usize| {
        let s = j as f64 / n_steps as f64;
        a + b * (freq * s).sin()
    };
    let (v1, v2) = match traj {
        Some(tr) => {
            let np = tr.n_paths();
            let adapted = |a: &SpectralVector, b: &SpectralVector, c: &SpectralVector| {
                VectorProcess::per_path(np, dim, n_steps, |p, j| shape(a, b, j) + c * (0.5 * tr.state(p, j)[0]))
            };
            (adapted(&a1, &b1, &c1), adapted(&a2, &b2, &c2))
        }
        None => (
            VectorProcess::deterministic(dim, n_steps, |j| shape(&a1, &b1, j)),
            VectorProcess::deterministic(dim, n_steps, |j| shape(&a2, &b2, j)),
        ),
    };
    FirstOrderTest {
        t_index,
        eta: VectorProcess::constant(&eta, 1),
        v1,
        v2,
    }
}

/// Random deterministic test data for the second-order identity.
pub fn random_second_test(dim: usize, n_steps: usize, rng: &mut impl Rng) -> SecondOrderTest {
    let t_index = [0, n_steps / 4, n_steps / 2, 3 * n_steps / 4][rng.random_range(0..4)];
    let mut coef = || SpectralVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
    let vs: Vec<(SpectralVector, SpectralVector)> = (0..4).map(|_| (coef(), coef())).collect();
    let (xi1, xi2) = (coef(), coef());
    let freq = rng.random_range(0.5..4.0);
    let proc_ = |k: usize| {
        let (a, b) = vs[k].clone();
        VectorProcess::deterministic(dim, n_steps, move |j| &a + &b * (freq * j as f64 / n_steps as f64).cos())
    };
    SecondOrderTest {
        t_index,
        xi1: VectorProcess::constant(&xi1, 1),
        xi2: VectorProcess::constant(&xi2, 1),
        u1: proc_(0),
        u2: proc_(1),
        v1: proc_(2),
        v2: proc_(3),
    }
}
