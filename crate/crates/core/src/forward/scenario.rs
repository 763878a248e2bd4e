//! Problem data: coefficients, control sets, control processes.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{domain, Result};
use crate::process::VectorProcess;
use crate::spectral::{OperatorSpec, SpectralVector};

/// Admissible control values.
#[derive(Clone, Debug, PartialEq)]
pub enum ControlSet {
    /// Convex box `lo ≤ u ≤ hi`, coordinatewise.
    Box { lo: Vec<f64>, hi: Vec<f64> },
    /// Finite (possibly nonconvex) list of control points.
    FiniteGrid { points: Vec<Vec<f64>> },
}

impl ControlSet {
    pub fn dim(&self) -> usize {
        match self {
            ControlSet::Box { lo, .. } => lo.len(),
            ControlSet::FiniteGrid { points } => points.first().map_or(0, |p| p.len()),
        }
    }

    pub fn is_convex(&self) -> bool {
        matches!(self, ControlSet::Box { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ControlSet::Box { lo, hi } => {
                if lo.is_empty() || lo.len() != hi.len() {
                    return domain("box control set needs matching non-empty bounds");
                }
                if lo.iter().zip(hi).any(|(l, h)| !(l <= h)) {
                    return domain("box control set has lo > hi");
                }
            }
            ControlSet::FiniteGrid { points } => {
                let d = self.dim();
                if d == 0 || points.iter().any(|p| p.len() != d) {
                    return domain("finite control grid needs non-empty points of equal dimension");
                }
            }
        }
        Ok(())
    }

    /// Coordinatewise clamp for boxes; nearest point (first index on ties)
    /// for finite grids.
    pub fn project(&self, u: &DVector<f64>) -> DVector<f64> {
        match self {
            ControlSet::Box { lo, hi } => DVector::from_iterator(
                u.len(),
                u.iter().zip(lo.iter().zip(hi)).map(|(x, (l, h))| x.clamp(*l, *h)),
            ),
            ControlSet::FiniteGrid { points } => {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (i, p) in points.iter().enumerate() {
                    let d: f64 = p.iter().zip(u.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d < best_d {
                        best_d = d;
                        best = i;
                    }
                }
                DVector::from_column_slice(&points[best])
            }
        }
    }

    pub fn contains(&self, u: &DVector<f64>, tol: f64) -> bool {
        if u.len() != self.dim() {
            return false;
        }
        match self {
            ControlSet::Box { lo, hi } => u
                .iter()
                .zip(lo.iter().zip(hi))
                .all(|(x, (l, h))| *x >= l - tol && *x <= h + tol),
            ControlSet::FiniteGrid { points } => points
                .iter()
                .any(|p| p.iter().zip(u.iter()).all(|(a, b)| (a - b).abs() <= tol)),
        }
    }

    /// Enumeration grid over the set: `points_per_dim` evenly spaced values
    /// per coordinate for a box (tensor grid), every point for a finite grid.
    pub fn grid(&self, points_per_dim: usize) -> Vec<DVector<f64>> {
        match self {
            ControlSet::FiniteGrid { points } => {
                points.iter().map(|p| DVector::from_column_slice(p)).collect()
            }
            ControlSet::Box { lo, hi } => {
                let k = points_per_dim.max(1);
                let axis = |i: usize| -> Vec<f64> {
                    if k == 1 {
                        return vec![0.5 * (lo[i] + hi[i])];
                    }
                    (0..k)
                        .map(|j| lo[i] + (hi[i] - lo[i]) * j as f64 / (k - 1) as f64)
                        .collect()
                };
                let mut out = vec![Vec::new()];
                for i in 0..lo.len() {
                    let ax = axis(i);
                    out = out
                        .into_iter()
                        .flat_map(|pre| {
                            ax.iter().map(move |v| {
                                let mut p = pre.clone();
                                p.push(*v);
                                p
                            })
                        })
                        .collect();
                }
                out.into_iter().map(DVector::from_vec).collect()
            }
        }
    }
}

/// Coefficients `a, b, g, h` of the controlled equation and cost.
///
/// The generator `A` is not part of `a`; it lives in the scenario's
/// [`OperatorSpec`]. Derivatives default to `None`, in which case the
/// [`Scenario`] falls back to central finite differences.
pub trait Coefficients: Send + Sync {
    fn drift(&self, t: f64, x: &SpectralVector, u: &DVector<f64>) -> SpectralVector;
    fn diffusion(&self, t: f64, x: &SpectralVector, u: &DVector<f64>) -> SpectralVector;
    fn running_cost(&self, t: f64, x: &SpectralVector, u: &DVector<f64>) -> f64;
    fn terminal_cost(&self, x: &SpectralVector) -> f64;

    /// `a_x`, an `n × n` matrix.
    fn drift_x(&self, _t: f64, _x: &SpectralVector, _u: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
    fn diffusion_x(&self, _t: f64, _x: &SpectralVector, _u: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
    /// `a_u`, an `n × m` matrix.
    fn drift_u(&self, _t: f64, _x: &SpectralVector, _u: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
    fn diffusion_u(&self, _t: f64, _x: &SpectralVector, _u: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
    fn cost_x(&self, _t: f64, _x: &SpectralVector, _u: &DVector<f64>) -> Option<SpectralVector> {
        None
    }
    fn cost_u(&self, _t: f64, _x: &SpectralVector, _u: &DVector<f64>) -> Option<DVector<f64>> {
        None
    }
    fn terminal_x(&self, _x: &SpectralVector) -> Option<SpectralVector> {
        None
    }
    /// `Σ_i k_i ∂²a_i/∂x²`.
    fn drift_xx(&self, _t: f64, _x: &SpectralVector, _u: &DVector<f64>, _k: &SpectralVector) -> Option<DMatrix<f64>> {
        None
    }
    /// `Σ_i k_i ∂²b_i/∂x²`.
    fn diffusion_xx(&self, _t: f64, _x: &SpectralVector, _u: &DVector<f64>, _k: &SpectralVector) -> Option<DMatrix<f64>> {
        None
    }
    fn cost_xx(&self, _t: f64, _x: &SpectralVector, _u: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
    fn terminal_xx(&self, _x: &SpectralVector) -> Option<DMatrix<f64>> {
        None
    }
}

/// One instance of the control problem.
#[derive(Clone)]
pub struct Scenario {
    pub name: String,
    pub op: OperatorSpec,
    pub control_dim: usize,
    pub control_set: ControlSet,
    /// Lipschitz constant `C_L` of `a` and `b` in `x`.
    pub lipschitz: f64,
    pub horizon: f64,
    /// Default initial datum.
    pub x0: SpectralVector,
    pub coeffs: Arc<dyn Coefficients>,
    /// The linearization `(a_x, b_x, H_xx, h_xx)` along any trajectory is
    /// path-independent (true for linear-quadratic data).
    pub deterministic_linearization: bool,
}

impl fmt::Debug for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Scenario")
            .field("name", &self.name)
            .field("op", &self.op)
            .field("control_dim", &self.control_dim)
            .field("control_set", &self.control_set)
            .field("lipschitz", &self.lipschitz)
            .field("horizon", &self.horizon)
            .field("x0", &self.x0.as_slice())
            .finish_non_exhaustive()
    }
}

fn fd_step(x: f64) -> f64 {
    1e-5 * (1.0 + x.abs())
}

fn fd2_step(x: f64) -> f64 {
    1e-4 * (1.0 + x.abs())
}

fn fd_jacobian(x: &DVector<f64>, m: usize, f: impl Fn(&DVector<f64>) -> DVector<f64>) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(m, x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let h = fd_step(x[i]);
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        jac.set_column(i, &((fp - fm) / (2.0 * h)));
    }
    jac
}

fn fd_gradient(x: &DVector<f64>, f: impl Fn(&DVector<f64>) -> f64) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let h = fd_step(x[i]);
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Hessian as the symmetrized central difference of a gradient map.
fn fd_hessian(x: &DVector<f64>, grad: impl Fn(&DVector<f64>) -> DVector<f64>) -> DMatrix<f64> {
    let n = x.len();
    let mut hess = DMatrix::zeros(n, n);
    let mut xp = x.clone();
    for i in 0..n {
        let h = fd2_step(x[i]);
        xp[i] = x[i] + h;
        let gp = grad(&xp);
        xp[i] = x[i] - h;
        let gm = grad(&xp);
        xp[i] = x[i];
        hess.set_column(i, &((gp - gm) / (2.0 * h)));
    }
    (&hess + hess.transpose()) * 0.5
}

impl Scenario {
    pub fn dim(&self) -> usize {
        self.op.n_modes()
    }

    pub fn validate(&self) -> Result<()> {
        self.control_set.validate()?;
        if self.control_set.dim() != self.control_dim {
            return domain("control set dimension differs from control_dim");
        }
        if self.x0.len() != self.dim() {
            return domain("initial datum dimension differs from the operator");
        }
        if !(self.horizon > 0.0) {
            return domain("horizon must be positive");
        }
        if !(self.lipschitz > 0.0) {
            return domain("Lipschitz constant must be positive");
        }
        Ok(())
    }

    pub fn drift(&self, t: f64, x: &SpectralVector, u: &DVector<f64>) -> SpectralVector {
        self.coeffs.drift(t, x, u)
    }

    pub fn diffusion(&self, t: f64, x: &SpectralVector, u: &DVector<f64>) -> SpectralVector {
        self.coeffs.diffusion(t, x, u)
    }

    pub fn running_cost(&self, t: f64, x: &SpectralVector, u: &DVector<f64>) -> f64 {
        self.coeffs.running_cost(t, x, u)
    }

    pub fn terminal_cost(&self, x: &SpectralVector) -> f64 {
        self.coeffs.terminal_cost(x)
    }

    pub fn drift_x(&self, t: f64, x: &SpectralVector, u: &DVector<f64>) -> DMatrix<f64> {
        self.coeffs
            .drift_x(t, x, u)
            .unwrap_or_else(|| fd_jacobian(x, self.dim(), |z| self.coeffs.drift(t, z, u)))
    }

    pub fn diffusion_x(&self, t: f64, x: &SpectralVector, u: &DVector<f64>) -> DMatrix<f64> {
        self.coeffs
            .diffusion_x(t, x, u)
            .unwrap_or_else(|| fd_jacobian(x, self.dim(), |z| self.coeffs.diffusion(t, z, u)))
    }

    pub fn drift_u(&self, t: f64, x: &SpectralVector, u: &DVector<f64>) -> DMatrix<f64> {
        self.coeffs
            .drift_u(t, x, u)
            .unwrap_or_else(|| fd_jacobian(u, self.dim(), |v| self.coeffs.drift(t, x, v)))
    }

    pub fn diffusion_u(&self, t: f64, x: &SpectralVector, u: &DVector<f64>) -> DMatrix<f64> {
        self.coeffs
            .diffusion_u(t, x, u)
            .unwrap_or_else(|| fd_jacobian(u, self.dim(), |v| self.coeffs.diffusion(t, x, v)))
    }

    pub fn cost_x(&self, t: f64, x: &SpectralVector, u: &DVector<f64>) -> SpectralVector {
        self.coeffs
            .cost_x(t, x, u)
            .unwrap_or_else(|| fd_gradient(x, |z| self.coeffs.running_cost(t, z, u)))
    }

    pub fn cost_u(&self, t: f64, x: &SpectralVector, u: &DVector<f64>) -> DVector<f64> {
        self.coeffs
            .cost_u(t, x, u)
            .unwrap_or_else(|| fd_gradient(u, |v| self.coeffs.running_cost(t, x, v)))
    }

    pub fn terminal_x(&self, x: &SpectralVector) -> SpectralVector {
        self.coeffs
            .terminal_x(x)
            .unwrap_or_else(|| fd_gradient(x, |z| self.coeffs.terminal_cost(z)))
    }

    pub fn drift_xx(&self, t: f64, x: &SpectralVector, u: &DVector<f64>, k: &SpectralVector) -> DMatrix<f64> {
        self.coeffs
            .drift_xx(t, x, u, k)
            .unwrap_or_else(|| fd_hessian(x, |z| self.drift_x(t, z, u).tr_mul(k)))
    }

    pub fn diffusion_xx(&self, t: f64, x: &SpectralVector, u: &DVector<f64>, k: &SpectralVector) -> DMatrix<f64> {
        self.coeffs
            .diffusion_xx(t, x, u, k)
            .unwrap_or_else(|| fd_hessian(x, |z| self.diffusion_x(t, z, u).tr_mul(k)))
    }

    pub fn cost_xx(&self, t: f64, x: &SpectralVector, u: &DVector<f64>) -> DMatrix<f64> {
        self.coeffs
            .cost_xx(t, x, u)
            .unwrap_or_else(|| fd_hessian(x, |z| self.cost_x(t, z, u)))
    }

    pub fn terminal_xx(&self, x: &SpectralVector) -> DMatrix<f64> {
        self.coeffs
            .terminal_xx(x)
            .unwrap_or_else(|| fd_hessian(x, |z| self.terminal_x(z)))
    }

    /// `ℍ_xx(t, x, u, k₁, k₂) = Σ k₁ᵢ aᵢ_xx + Σ k₂ᵢ bᵢ_xx − g_xx`.
    pub fn hamiltonian_xx(
        &self,
        t: f64,
        x: &SpectralVector,
        u: &DVector<f64>,
        k1: &SpectralVector,
        k2: &SpectralVector,
    ) -> DMatrix<f64> {
        self.drift_xx(t, x, u, k1) + self.diffusion_xx(t, x, u, k2) - self.cost_xx(t, x, u)
    }

    /// Largest observed ratio `|φ(x₁) − φ(x₂)| / |x₁ − x₂|` for `φ ∈ {a, b}`
    /// over random triples, divided by `C_L`. A value `≤ 1` means the
    /// Lipschitz bound held on every sample.
    pub fn lipschitz_spot_check(&self, samples: usize, radius: f64, seed: u64) -> f64 {
        let n = self.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let controls = self.control_set.grid(5);
        let mut worst: f64 = 0.0;
        for s in 0..samples {
            let x1 = SpectralVector::from_fn(n, |_, _| rng.random_range(-radius..radius));
            let x2 = SpectralVector::from_fn(n, |_, _| rng.random_range(-radius..radius));
            let u = &controls[s % controls.len()];
            let t = rng.random_range(0.0..self.horizon);
            let dx = (&x1 - &x2).norm();
            if dx == 0.0 {
                continue;
            }
            let da = (self.drift(t, &x1, u) - self.drift(t, &x2, u)).norm();
            let db = (self.diffusion(t, &x1, u) - self.diffusion(t, &x2, u)).norm();
            worst = worst.max(da.max(db) / dx);
        }
        worst / self.lipschitz
    }
}

/// Feedback law `(step, t, x) ↦ u`.
pub type FeedbackFn = dyn Fn(usize, f64, &SpectralVector) -> DVector<f64> + Send + Sync;

/// An admissible control `u(·)`.
///
/// Open-loop values are indexed by grid step (and optionally by path); a
/// feedback law sees only the current state, so both are adapted.
#[derive(Clone)]
pub enum ControlProcess {
    OpenLoop(VectorProcess),
    Feedback(Arc<FeedbackFn>),
}

impl fmt::Debug for ControlProcess {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControlProcess::OpenLoop(v) => f
                .debug_struct("OpenLoop")
                .field("dim", &v.dim())
                .field("len", &v.len())
                .field("n_paths", &v.n_paths())
                .finish(),
            ControlProcess::Feedback(_) => f.write_str("Feedback(..)"),
        }
    }
}

impl ControlProcess {
    pub fn constant(u: &DVector<f64>, n_steps: usize) -> Self {
        ControlProcess::OpenLoop(VectorProcess::constant(u, n_steps))
    }

    pub fn zero(control_dim: usize, n_steps: usize) -> Self {
        ControlProcess::OpenLoop(VectorProcess::zeros(control_dim, n_steps))
    }

    pub fn feedback(f: impl Fn(usize, f64, &SpectralVector) -> DVector<f64> + Send + Sync + 'static) -> Self {
        ControlProcess::Feedback(Arc::new(f))
    }

    /// Raw (unprojected) control value.
    pub fn value(&self, path: usize, step: usize, t: f64, x: &SpectralVector) -> DVector<f64> {
        match self {
            ControlProcess::OpenLoop(v) => v.vec_at(path, step),
            ControlProcess::Feedback(f) => f(step, t, x),
        }
    }
}
