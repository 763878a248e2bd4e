//! Backward Riccati sweep for the linear-quadratic presets.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::LqParams;
use crate::error::{Error, Result};
use crate::forward::{ControlProcess, TimeGrid};
use crate::spectral::SpectralVector;

/// Value function `V(t, x) = ½xᵀP(t)x + q(t)ᵀx + r(t)` and the affine
/// feedback `u = −(K(t)x + k(t))` on the grid points.
#[derive(Clone, Debug)]
pub struct RiccatiOracle {
    grid: TimeGrid,
    p: Vec<DMatrix<f64>>,
    q: Vec<DVector<f64>>,
    r: Vec<f64>,
    gains: Vec<DMatrix<f64>>,
    offsets: Vec<DVector<f64>>,
}

impl RiccatiOracle {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn p(&self, j: usize) -> &DMatrix<f64> {
        &self.p[j]
    }

    pub fn q(&self, j: usize) -> &DVector<f64> {
        &self.q[j]
    }

    pub fn gain(&self, j: usize) -> &DMatrix<f64> {
        &self.gains[j]
    }

    pub fn offset(&self, j: usize) -> &DVector<f64> {
        &self.offsets[j]
    }

    /// Optimal cost from `x0` at the initial time.
    pub fn value_at(&self, x0: &SpectralVector) -> f64 {
        self.value_at_step(0, x0)
    }

    pub fn value_at_step(&self, j: usize, x: &SpectralVector) -> f64 {
        0.5 * x.dot(&(&self.p[j] * x)) + self.q[j].dot(x) + self.r[j]
    }

    pub fn control_at(&self, j: usize, x: &SpectralVector) -> DVector<f64> {
        let j = j.min(self.gains.len() - 1);
        -(&self.gains[j] * x + &self.offsets[j])
    }

    /// The optimal feedback as a control process; the step index selects the gain.
    pub fn feedback(&self) -> ControlProcess {
        let gains = Arc::new(self.gains.clone());
        let offsets = Arc::new(self.offsets.clone());
        ControlProcess::feedback(move |j, _t, x| {
            let j = j.min(gains.len() - 1);
            -(&gains[j] * x + &offsets[j])
        })
    }
}

struct State {
    p: DMatrix<f64>,
    q: DVector<f64>,
    r: f64,
}

/// `(L, ℓ, gain, offset)` of the feedback `u = −gain·x − offset`.
type Gains = (DMatrix<f64>, DVector<f64>, DMatrix<f64>, DVector<f64>);

struct Rhs<'a> {
    lq: &'a LqParams,
}

impl Rhs<'_> {
    fn gains(&self, p: &DMatrix<f64>, q: &DVector<f64>) -> Result<Gains> {
        let lq = self.lq;
        let r_mat = &lq.n_run + lq.d.transpose() * p * &lq.d;
        let chol = r_mat
            .clone()
            .cholesky()
            .ok_or_else(|| Error::OracleBreakdown("N + DᵀPD lost positive definiteness".into()))?;
        let l = lq.b.transpose() * p + lq.d.transpose() * p * &lq.c;
        let ell = lq.b.transpose() * q + lq.d.transpose() * p * &lq.sigma;
        let gain = chol.solve(&l);
        let offset = chol.solve(&ell);
        Ok((l, ell, gain, offset))
    }

    /// Derivative with respect to time-to-go.
    fn eval(&self, s: &State) -> Result<State> {
        let lq = self.lq;
        let (l, ell, gain, offset) = self.gains(&s.p, &s.q)?;
        let at = lq.a.transpose();
        let mut dp = &at * &s.p + &s.p * &lq.a + lq.c.transpose() * &s.p * &lq.c + &lq.m_run - l.transpose() * &gain;
        dp = (&dp + dp.transpose()) * 0.5;
        let dq = &at * &s.q + lq.c.transpose() * &s.p * &lq.sigma - l.transpose() * &offset;
        let dr = 0.5 * lq.sigma.dot(&(&s.p * &lq.sigma)) - 0.5 * ell.dot(&offset);
        Ok(State { p: dp, q: dq, r: dr })
    }
}

fn axpy(s: &State, h: f64, d: &State) -> State {
    State {
        p: &s.p + &d.p * h,
        q: &s.q + &d.q * h,
        r: s.r + d.r * h,
    }
}

fn check(s: &State) -> Result<()> {
    if s.p.iter().chain(s.q.iter()).any(|v| !v.is_finite()) || !s.r.is_finite() {
        return Err(Error::OracleBreakdown("Riccati sweep produced non-finite values".into()));
    }
    Ok(())
}

/// Integrates the Riccati system backward from `P(T) = G` by classical RK4,
/// with enough substeps per grid interval to resolve the stiffest mode.
pub fn riccati_oracle(lq: &LqParams, grid: &TimeGrid) -> Result<RiccatiOracle> {
    lq.validate()?;
    let n = lq.state_dim();
    let dt = grid.dt();
    let stiff = 2.0 * lq.a.norm() + lq.c.norm_squared() + lq.b.norm_squared() + 1.0;
    let sub = ((dt * stiff / 0.05).ceil() as usize).max(1);
    let h = dt / sub as f64;
    let rhs = Rhs { lq };

    let n_steps = grid.n_steps();
    let mut p = vec![DMatrix::zeros(n, n); n_steps + 1];
    let mut q = vec![DVector::zeros(n); n_steps + 1];
    let mut r = vec![0.0; n_steps + 1];
    let mut s = State {
        p: (&lq.g_term + lq.g_term.transpose()) * 0.5,
        q: DVector::zeros(n),
        r: 0.0,
    };
    p[n_steps] = s.p.clone();
    for j in (0..n_steps).rev() {
        for _ in 0..sub {
            let k1 = rhs.eval(&s)?;
            let k2 = rhs.eval(&axpy(&s, 0.5 * h, &k1))?;
            let k3 = rhs.eval(&axpy(&s, 0.5 * h, &k2))?;
            let k4 = rhs.eval(&axpy(&s, h, &k3))?;
            s = State {
                p: &s.p + (&k1.p + &k2.p * 2.0 + &k3.p * 2.0 + &k4.p) * (h / 6.0),
                q: &s.q + (&k1.q + &k2.q * 2.0 + &k3.q * 2.0 + &k4.q) * (h / 6.0),
                r: s.r + (k1.r + 2.0 * k2.r + 2.0 * k3.r + k4.r) * (h / 6.0),
            };
            check(&s)?;
        }
        p[j] = s.p.clone();
        q[j] = s.q.clone();
        r[j] = s.r;
    }
    let mut gains = Vec::with_capacity(n_steps + 1);
    let mut offsets = Vec::with_capacity(n_steps + 1);
    for j in 0..=n_steps {
        let (_, _, g, o) = rhs.gains(&p[j], &q[j])?;
        gains.push(g);
        offsets.push(o);
    }
    Ok(RiccatiOracle {
        grid: *grid,
        p,
        q,
        r,
        gains,
        offsets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios::{heat_lq, make_lq_scalar, HeatParams};

    #[test]
    fn scalar_preset_has_unit_riccati_solution() {
        let (_, lq) = make_lq_scalar();
        let grid = TimeGrid::new(0.0, 1.0, 200).unwrap();
        let o = riccati_oracle(&lq, &grid).unwrap();
        for j in 0..=200 {
            assert!((o.p(j)[(0, 0)] - 1.0).abs() < 1e-10);
            assert!((o.gain(j)[(0, 0)] - 1.0).abs() < 1e-10);
        }
        let x0 = SpectralVector::from_element(1, 1.0);
        // ½ + ½σ²T
        assert!((o.value_at(&x0) - 0.545).abs() < 1e-10);
        assert!((o.control_at(0, &x0)[0] + 1.0).abs() < 1e-10);
    }

    #[test]
    fn zero_costs_give_zero_gains() {
        let (_, mut lq) = make_lq_scalar();
        lq.m_run *= 0.0;
        lq.g_term *= 0.0;
        lq.sigma *= 0.0;
        let o = riccati_oracle(&lq, &TimeGrid::new(0.0, 1.0, 50).unwrap()).unwrap();
        assert_eq!(o.gain(0)[(0, 0)], 0.0);
        assert_eq!(o.value_at(&SpectralVector::from_element(1, 3.0)), 0.0);
    }

    #[test]
    fn value_is_quadratic_without_noise() {
        let mut lq = heat_lq(4, 2, &HeatParams::default()).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let x0 = SpectralVector::from_vec(vec![1.0, 0.5, 0.25, 0.125]);
        let noisy = riccati_oracle(&lq, &grid).unwrap();
        assert!(noisy.value_at(&(&x0 * 2.0)) <= 4.0 * noisy.value_at(&x0) + 1e-12);
        lq.sigma[0] = 0.3;
        let o = riccati_oracle(&lq, &grid).unwrap();
        assert!(o.value_at(&(&x0 * 2.0)) <= 4.0 * o.value_at(&x0));
        lq.sigma *= 0.0;
        let o = riccati_oracle(&lq, &grid).unwrap();
        let (v1, v2) = (o.value_at(&x0), o.value_at(&(&x0 * 2.0)));
        assert!((v2 - 4.0 * v1).abs() < 1e-12 * v2.abs().max(1.0));
    }

    #[test]
    fn value_nonnegative_at_origin() {
        let (_, lq) = make_lq_scalar();
        let o = riccati_oracle(&lq, &TimeGrid::new(0.0, 1.0, 20).unwrap()).unwrap();
        assert!(o.value_at(&SpectralVector::zeros(1)) >= 0.0);
    }

    #[test]
    fn indefinite_control_weight_breaks_down() {
        let (_, mut lq) = make_lq_scalar();
        lq.d[(0, 0)] = 1.0;
        lq.g_term[(0, 0)] = -5.0;
        lq.m_run[(0, 0)] = 0.0;
        let r = riccati_oracle(&lq, &TimeGrid::new(0.0, 1.0, 20).unwrap());
        assert!(matches!(r, Err(Error::OracleBreakdown(_))));
    }
}
