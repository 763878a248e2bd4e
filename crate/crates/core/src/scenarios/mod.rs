//! Preset problem instances and the independent oracles used to check them.

pub(crate) mod dp;
mod preset;
mod riccati;

pub use dp::{dp_oracle_scalar, gauss_hermite, DpOracle};
pub use preset::{find_preset, preset_dir, Calibration, Preset, PresetKind, PRESET_DIR_ENV};
pub use riccati::{riccati_oracle, RiccatiOracle};

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{domain, Result};
use crate::forward::{
    initial_state, simulate_controlled, BrownianEnsemble, Coefficients, ControlProcess, ControlSet, Scenario,
    StateEnsemble,
};
use crate::process::MatrixProcess;
use crate::second_order::SecondOrderData;
use crate::spectral::{OperatorSpec, SpectralVector};

/// Linear-quadratic data
/// `dx = (A x + B u)dt + (C x + D u + σ)dw`,
/// `g = ½(xᵀMx + uᵀNu)`, `h = ½xᵀGx`.
///
/// `a` is the full drift matrix, generator included.
#[derive(Clone, Debug, PartialEq)]
pub struct LqParams {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub sigma: DVector<f64>,
    pub m_run: DMatrix<f64>,
    pub n_run: DMatrix<f64>,
    pub g_term: DMatrix<f64>,
}

impl LqParams {
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.state_dim();
        let m = self.control_dim();
        let shapes = [
            ("A", self.a.shape(), (n, n)),
            ("B", self.b.shape(), (n, m)),
            ("C", self.c.shape(), (n, n)),
            ("D", self.d.shape(), (n, m)),
            ("M", self.m_run.shape(), (n, n)),
            ("N", self.n_run.shape(), (m, m)),
            ("G", self.g_term.shape(), (n, n)),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return domain(format!("LQ matrix {name} has shape {got:?}, expected {want:?}"));
            }
        }
        if self.sigma.len() != n {
            return domain("LQ noise vector has wrong length");
        }
        if self.n_run.clone().cholesky().is_none() {
            return domain("control weight N must be positive definite");
        }
        Ok(())
    }

    /// Coefficients for a scenario whose generator is `op`; the diagonal of
    /// `op` is removed from `A` so that it is not counted twice.
    pub fn coefficients(&self, op: &OperatorSpec) -> Result<LqCoefficients> {
        self.validate()?;
        op.check_dim(self.state_dim())?;
        let mut a_extra = self.a.clone();
        for (k, mu) in op.eigenvalues().iter().enumerate() {
            a_extra[(k, k)] -= mu;
        }
        Ok(LqCoefficients {
            a_extra,
            b: self.b.clone(),
            c: self.c.clone(),
            d: self.d.clone(),
            sigma: self.sigma.clone(),
            m_sym: (&self.m_run + self.m_run.transpose()) * 0.5,
            n_sym: (&self.n_run + self.n_run.transpose()) * 0.5,
            g_sym: (&self.g_term + self.g_term.transpose()) * 0.5,
        })
    }
}

/// Affine coefficients with quadratic costs; every derivative is analytic.
#[derive(Clone, Debug)]
pub struct LqCoefficients {
    a_extra: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    d: DMatrix<f64>,
    sigma: DVector<f64>,
    m_sym: DMatrix<f64>,
    n_sym: DMatrix<f64>,
    g_sym: DMatrix<f64>,
}

impl Coefficients for LqCoefficients {
    fn drift(&self, _t: f64, x: &SpectralVector, u: &DVector<f64>) -> SpectralVector {
        &self.a_extra * x + &self.b * u
    }

    fn diffusion(&self, _t: f64, x: &SpectralVector, u: &DVector<f64>) -> SpectralVector {
        &self.c * x + &self.d * u + &self.sigma
    }

    fn running_cost(&self, _t: f64, x: &SpectralVector, u: &DVector<f64>) -> f64 {
        0.5 * (x.dot(&(&self.m_sym * x)) + u.dot(&(&self.n_sym * u)))
    }

    fn terminal_cost(&self, x: &SpectralVector) -> f64 {
        0.5 * x.dot(&(&self.g_sym * x))
    }

    fn drift_x(&self, _t: f64, _x: &SpectralVector, _u: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(self.a_extra.clone())
    }

    fn diffusion_x(&self, _t: f64, _x: &SpectralVector, _u: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(self.c.clone())
    }

    fn drift_u(&self, _t: f64, _x: &SpectralVector, _u: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(self.b.clone())
    }

    fn diffusion_u(&self, _t: f64, _x: &SpectralVector, _u: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(self.d.clone())
    }

    fn cost_x(&self, _t: f64, x: &SpectralVector, _u: &DVector<f64>) -> Option<SpectralVector> {
        Some(&self.m_sym * x)
    }

    fn cost_u(&self, _t: f64, _x: &SpectralVector, u: &DVector<f64>) -> Option<DVector<f64>> {
        Some(&self.n_sym * u)
    }

    fn terminal_x(&self, x: &SpectralVector) -> Option<SpectralVector> {
        Some(&self.g_sym * x)
    }

    fn drift_xx(&self, _t: f64, x: &SpectralVector, _u: &DVector<f64>, _k: &SpectralVector) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(x.len(), x.len()))
    }

    fn diffusion_xx(&self, _t: f64, x: &SpectralVector, _u: &DVector<f64>, _k: &SpectralVector) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(x.len(), x.len()))
    }

    fn cost_xx(&self, _t: f64, _x: &SpectralVector, _u: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(self.m_sym.clone())
    }

    fn terminal_xx(&self, _x: &SpectralVector) -> Option<DMatrix<f64>> {
        Some(self.g_sym.clone())
    }
}

/// Builds a scenario from LQ data.
pub fn lq_scenario(
    name: &str,
    op: OperatorSpec,
    lq: &LqParams,
    control_set: ControlSet,
    lipschitz: f64,
    horizon: f64,
    x0: SpectralVector,
) -> Result<Scenario> {
    let coeffs = lq.coefficients(&op)?;
    let s = Scenario {
        name: name.to_string(),
        op,
        control_dim: lq.control_dim(),
        control_set,
        lipschitz,
        horizon,
        x0,
        coeffs: Arc::new(coeffs),
        deterministic_linearization: true,
    };
    s.validate()?;
    Ok(s)
}

/// Constants of the scalar linear-quadratic preset.
#[derive(Clone, Debug, PartialEq)]
pub struct LqScalarParams {
    pub sigma: f64,
    pub horizon: f64,
    pub x0: f64,
    pub u_bound: f64,
}

impl Default for LqScalarParams {
    fn default() -> Self {
        Self {
            sigma: 0.3,
            horizon: 1.0,
            x0: 1.0,
            u_bound: 4.0,
        }
    }
}

/// `dx = u dt + σ dw`, `g = ½(x² + u²)`, `h = ½x²` on a single zero mode.
pub fn make_lq_scalar() -> (Scenario, LqParams) {
    lq_scalar_with(&LqScalarParams::default()).expect("default scalar preset is valid")
}

pub fn lq_scalar_with(p: &LqScalarParams) -> Result<(Scenario, LqParams)> {
    let one = DMatrix::from_element(1, 1, 1.0);
    let zero = DMatrix::zeros(1, 1);
    let lq = LqParams {
        a: zero.clone(),
        b: one.clone(),
        c: zero.clone(),
        d: zero,
        sigma: DVector::from_element(1, p.sigma),
        m_run: one.clone(),
        n_run: one.clone(),
        g_term: one,
    };
    let op = OperatorSpec::new(vec![0.0], 1.0)?;
    let s = lq_scenario(
        "lq_scalar",
        op,
        &lq,
        ControlSet::Box {
            lo: vec![-p.u_bound],
            hi: vec![p.u_bound],
        },
        1.0,
        p.horizon,
        SpectralVector::from_element(1, p.x0),
    )?;
    Ok((s, lq))
}

/// Parameters of the controlled stochastic heat equation preset.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatParams {
    /// Multiplicative noise strength `β` in `b = βx + Du`.
    pub beta: f64,
    /// Gain of control `i` on mode `i` in the drift.
    pub control_gain: f64,
    /// Gain of control `i` on mode `i` in the diffusion.
    pub diffusion_gain: f64,
    pub length: f64,
    pub horizon: f64,
    /// Initial coefficients; padded with zeros or truncated to `n_modes`.
    pub x0: Vec<f64>,
    pub u_bound: f64,
}

impl Default for HeatParams {
    fn default() -> Self {
        Self {
            beta: 0.1,
            control_gain: 1.0,
            diffusion_gain: 0.1,
            length: std::f64::consts::PI,
            horizon: 1.0,
            x0: vec![1.0, 0.5, 0.25, 0.125],
            u_bound: 2.0,
        }
    }
}

/// LQ data of the heat preset: `A = Δ_D`, `B`, `D` target the first
/// `control_dim` modes, `C = βI`, unit cost weights.
pub fn heat_lq(n_modes: usize, control_dim: usize, p: &HeatParams) -> Result<LqParams> {
    if control_dim == 0 || n_modes < control_dim {
        return domain(format!(
            "heat preset needs 1 ≤ control_dim ≤ n_modes, got {control_dim} > {n_modes}"
        ));
    }
    let op = OperatorSpec::dirichlet_laplacian(n_modes, p.length)?;
    let a = DMatrix::from_diagonal(&DVector::from_column_slice(op.eigenvalues()));
    let mut b = DMatrix::zeros(n_modes, control_dim);
    let mut d = DMatrix::zeros(n_modes, control_dim);
    for i in 0..control_dim {
        b[(i, i)] = p.control_gain;
        d[(i, i)] = p.diffusion_gain;
    }
    Ok(LqParams {
        a,
        b,
        c: DMatrix::identity(n_modes, n_modes) * p.beta,
        d,
        sigma: DVector::zeros(n_modes),
        m_run: DMatrix::identity(n_modes, n_modes),
        n_run: DMatrix::identity(control_dim, control_dim),
        g_term: DMatrix::identity(n_modes, n_modes),
    })
}

/// Controlled stochastic heat equation on `(0, length)` with control in both
/// drift and diffusion: `a = B u`, `b = βx + D u`.
pub fn make_heat_scenario(n_modes: usize, control_dim: usize, p: &HeatParams) -> Result<Scenario> {
    let lq = heat_lq(n_modes, control_dim, p)?;
    let op = OperatorSpec::dirichlet_laplacian(n_modes, p.length)?;
    let mut x0 = SpectralVector::zeros(n_modes);
    for (k, v) in p.x0.iter().take(n_modes).enumerate() {
        x0[k] = *v;
    }
    let lipschitz = p.beta.abs().max(p.control_gain.abs()).max(p.diffusion_gain.abs());
    lq_scenario(
        &format!("heat{n_modes}"),
        op,
        &lq,
        ControlSet::Box {
            lo: vec![-p.u_bound; control_dim],
            hi: vec![p.u_bound; control_dim],
        },
        lipschitz,
        p.horizon,
        x0,
    )
}

/// Reference path `x̄ = σw` with scalar second-order data `J = 0`, `K = κ`,
/// `F = 0` and the path-dependent terminal weight `P_T = x̄(T)²`.
pub fn second_order_scalar_data(
    kappa: f64,
    sigma: f64,
    ens: &BrownianEnsemble,
) -> Result<(StateEnsemble, SecondOrderData)> {
    let grid = ens.grid();
    let (s, _) = lq_scalar_with(&LqScalarParams {
        sigma,
        horizon: grid.t_end() - grid.t0(),
        x0: 0.0,
        u_bound: 1.0,
    })?;
    let n_steps = grid.n_steps();
    let traj = simulate_controlled(&s, &initial_state(&s.x0), &ControlProcess::zero(1, n_steps), ens)?;
    let m = |v: f64| DMatrix::from_element(1, 1, v);
    let data = SecondOrderData {
        j: MatrixProcess::constant(&m(0.0), n_steps),
        k: MatrixProcess::constant(&m(kappa), n_steps),
        f: MatrixProcess::constant(&m(0.0), n_steps),
        p_t: MatrixProcess::per_path(ens.n_paths(), 1, 1, |p, _| m(traj.state(p, n_steps)[0].powi(2))),
    };
    Ok((traj, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scalar_preset_definition() {
        let (s, _) = make_lq_scalar();
        let x = SpectralVector::from_element(1, 2.0);
        let u = DVector::from_element(1, 1.0);
        assert_eq!(s.drift(0.3, &x, &u)[0], 1.0);
        assert_eq!(s.drift(0.9, &SpectralVector::from_element(1, -5.0), &u)[0], 1.0);
        assert_eq!(s.running_cost(0.0, &x, &u), 2.5);
        assert_eq!(s.terminal_xx(&x)[(0, 0)], 1.0);
        assert_eq!(s.diffusion(0.0, &x, &u)[0], 0.3);
    }

    #[test]
    fn heat_diffusion_u_matches_finite_difference() {
        let s = make_heat_scenario(4, 2, &HeatParams::default()).unwrap();
        let x = SpectralVector::from_vec(vec![0.3, -0.1, 0.7, 0.2]);
        let u = DVector::from_vec(vec![0.5, -0.4]);
        let analytic = s.diffusion_u(0.0, &x, &u);
        for i in 0..2 {
            let h = 1e-6;
            let mut up = u.clone();
            up[i] += h;
            let mut um = u.clone();
            um[i] -= h;
            let fd = (s.diffusion(0.0, &x, &up) - s.diffusion(0.0, &x, &um)) / (2.0 * h);
            assert!((fd - analytic.column(i)).amax() < 1e-8);
        }
    }

    #[test]
    fn heat_lipschitz_spot_check() {
        let s = make_heat_scenario(4, 2, &HeatParams::default()).unwrap();
        let ratio = s.lipschitz_spot_check(500, 3.0, 1);
        assert!(ratio <= 1.0 + 1e-12, "ratio {ratio}");
    }

    #[test]
    fn heat_rejects_too_many_controls() {
        assert!(make_heat_scenario(2, 3, &HeatParams::default()).is_err());
    }

    /// Analytic derivatives of every preset agree with central differences of
    /// the base callbacks on random points.
    #[test]
    fn preset_derivatives_match_finite_differences() {
        let (lq, _) = make_lq_scalar();
        let heat = make_heat_scenario(4, 2, &HeatParams::default()).unwrap();
        for s in [lq, heat] {
            let fd = Scenario {
                coeffs: Arc::new(Plain(s.coeffs.clone())),
                ..s.clone()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let n = s.dim();
            let m = s.control_dim;
            for _ in 0..100 {
                let x = SpectralVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
                let u = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
                let t = rng.random_range(0.0..1.0);
                let close = |a: &DMatrix<f64>, b: &DMatrix<f64>| {
                    (a - b).amax() <= 1e-6 * (1.0 + a.amax())
                };
                assert!(close(&s.drift_x(t, &x, &u), &fd.drift_x(t, &x, &u)));
                assert!(close(&s.diffusion_x(t, &x, &u), &fd.diffusion_x(t, &x, &u)));
                assert!(close(&s.drift_u(t, &x, &u), &fd.drift_u(t, &x, &u)));
                assert!(close(&s.diffusion_u(t, &x, &u), &fd.diffusion_u(t, &x, &u)));
                let gx = DMatrix::from_column_slice(n, 1, s.cost_x(t, &x, &u).as_slice());
                let gx_fd = DMatrix::from_column_slice(n, 1, fd.cost_x(t, &x, &u).as_slice());
                assert!(close(&gx, &gx_fd));
                let hx = DMatrix::from_column_slice(n, 1, s.terminal_x(&x).as_slice());
                let hx_fd = DMatrix::from_column_slice(n, 1, fd.terminal_x(&x).as_slice());
                assert!(close(&hx, &hx_fd));
                assert!((s.cost_xx(t, &x, &u) - fd.cost_xx(t, &x, &u)).amax() < 1e-5);
            }
        }
    }

    /// Wrapper that hides analytic derivatives.
    struct Plain(Arc<dyn Coefficients>);
    impl Coefficients for Plain {
        fn drift(&self, t: f64, x: &SpectralVector, u: &DVector<f64>) -> SpectralVector {
            self.0.drift(t, x, u)
        }
        fn diffusion(&self, t: f64, x: &SpectralVector, u: &DVector<f64>) -> SpectralVector {
            self.0.diffusion(t, x, u)
        }
        fn running_cost(&self, t: f64, x: &SpectralVector, u: &DVector<f64>) -> f64 {
            self.0.running_cost(t, x, u)
        }
        fn terminal_cost(&self, x: &SpectralVector) -> f64 {
            self.0.terminal_cost(x)
        }
    }
}
