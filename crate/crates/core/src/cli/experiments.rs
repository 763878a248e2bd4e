//! The experiments behind each command, as plain functions returning tables.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adjoint::{solve_first_adjoint, AdjointPair, RegressionBasis};
use crate::error::{domain, Result};
use crate::forward::{
    cost_of, initial_state, simulate_controlled, BrownianEnsemble, ControlProcess, CostEstimate, Scenario,
    StateEnsemble, TimeGrid,
};
use crate::maximum_principle::{
    check_condition, even_t_grid, gradient_check, projected_gradient, random_direction, solve_adjoints,
    spike_experiment, GradientCheckRow, MPReport, MPRules, OptimizerResult, SpikeTable, StepRule,
};
use crate::process::{MatrixProcess, VectorProcess};
use crate::report::{fmt_f64, CsvTable};
use crate::scenarios::{
    dp::linspace, dp_oracle_scalar, riccati_oracle, second_order_scalar_data, Calibration, LqParams, Preset,
    PresetKind, RiccatiOracle,
};
use crate::second_order::{lyapunov_oracle, solve_second_adjoint, SecondOrderAdjoint, SecondOrderData};
use crate::spectral::SpectralVector;
use crate::stats;
use crate::transposition::{
    lipschitz_probe, random_first_test, random_second_test, verify_first_identity, verify_second_identity,
    verify_second_reduction, IdentityReport, LipschitzRow, PassRule,
};

/// Reference control `ū` used by a command.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ControlChoice {
    /// Riccati feedback (the optimum of the LQ presets).
    Riccati,
    Zero,
}

impl ControlChoice {
    pub fn name(&self) -> &'static str {
        match self {
            ControlChoice::Riccati => "riccati",
            ControlChoice::Zero => "zero",
        }
    }
}

/// A preset bound to a time grid and a Brownian ensemble.
pub struct Setup {
    pub preset: Preset,
    pub scenario: Scenario,
    pub lq: LqParams,
    pub calibration: Calibration,
    pub ens: BrownianEnsemble,
    pub basis: RegressionBasis,
}

impl Setup {
    pub fn new(preset: Preset, dt: f64, n_paths: usize, seed: u64, basis: RegressionBasis) -> Result<Self> {
        let (scenario, lq) = preset.build()?;
        let calibration = preset.calibration()?;
        let grid = TimeGrid::with_step(scenario.horizon, dt)?;
        let ens = BrownianEnsemble::sample(grid, n_paths, seed)?;
        Ok(Self {
            preset,
            scenario,
            lq,
            calibration,
            ens,
            basis,
        })
    }

    pub fn load(name: &str, dt: f64, n_paths: usize, seed: u64) -> Result<Self> {
        Self::new(Preset::load(name)?, dt, n_paths, seed, RegressionBasis::default())
    }

    pub fn grid(&self) -> &TimeGrid {
        self.ens.grid()
    }

    pub fn x0(&self) -> VectorProcess {
        initial_state(&self.scenario.x0)
    }

    pub fn oracle(&self) -> Result<RiccatiOracle> {
        riccati_oracle(&self.lq, self.grid())
    }

    pub fn control(&self, choice: ControlChoice) -> Result<ControlProcess> {
        Ok(match choice {
            ControlChoice::Riccati => self.oracle()?.feedback(),
            ControlChoice::Zero => ControlProcess::zero(self.scenario.control_dim, self.grid().n_steps()),
        })
    }

    pub fn simulate(&self, choice: ControlChoice) -> Result<StateEnsemble> {
        simulate_controlled(&self.scenario, &self.x0(), &self.control(choice)?, &self.ens)
    }

    fn is_second_order_only(&self) -> bool {
        self.preset.kind() == PresetKind::SecondOrderScalar
    }

    fn require_control_problem(&self, what: &str) -> Result<()> {
        if self.is_second_order_only() {
            return domain(format!("{what} needs a control problem; preset `{}` only carries second-order data", self.preset.name()));
        }
        Ok(())
    }
}

/// Summary key/value table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Summary(pub Vec<(String, String)>);

impl Summary {
    pub fn num(&mut self, key: &str, v: f64) {
        self.0.push((key.to_string(), fmt_f64(v)));
    }

    pub fn text(&mut self, key: &str, v: impl ToString) {
        self.0.push((key.to_string(), v.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

impl CsvTable for Summary {
    fn header(&self) -> Vec<String> {
        vec!["key".into(), "value".into()]
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.0.iter().map(|(k, v)| vec![k.clone(), v.clone()]).collect()
    }
}

/// A generic numeric table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl CsvTable for Table {
    fn header(&self) -> Vec<String> {
        self.header.clone()
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.rows.iter().map(|r| r.iter().map(|v| fmt_f64(*v)).collect()).collect()
    }
}

pub struct ForwardRun {
    pub traj: StateEnsemble,
    pub cost: CostEstimate,
}

pub fn forward(setup: &Setup, choice: ControlChoice) -> Result<ForwardRun> {
    setup.require_control_problem("simulate-forward")?;
    let traj = setup.simulate(choice)?;
    let cost = cost_of(&setup.scenario, &traj);
    Ok(ForwardRun { traj, cost })
}

/// `step, t, mean x_k…, mean |x|²`.
pub fn forward_table(traj: &StateEnsemble) -> Table {
    let n = traj.dim();
    let mut header = vec!["step".to_string(), "t".into()];
    header.extend((0..n).map(|k| format!("mean_x{k}")));
    header.push("mean_sq_norm".into());
    let sq = traj.mean_square_norms();
    let rows = (0..=traj.grid().n_steps())
        .map(|j| {
            let mut r = vec![j as f64, traj.grid().t(j)];
            r.extend(traj.mean_state(j).iter());
            r.push(sq[j]);
            r
        })
        .collect();
    Table { header, rows }
}

pub fn first_adjoint(setup: &Setup, choice: ControlChoice) -> Result<(StateEnsemble, AdjointPair)> {
    setup.require_control_problem("solve-adjoint")?;
    let traj = setup.simulate(choice)?;
    let pair = solve_first_adjoint(&setup.scenario, &traj, &setup.ens, &setup.basis)?;
    Ok((traj, pair))
}

fn process_means(v: &VectorProcess, j: usize, n_paths: usize) -> Vec<f64> {
    (0..v.dim())
        .map(|k| stats::mean(&(0..n_paths).map(|p| v.at(p, j)[k]).collect::<Vec<_>>()))
        .collect()
}

/// `step, t, mean y_k…, mean Y_k…` (Y is left empty as NaN at the final step).
pub fn adjoint_table(pair: &AdjointPair) -> Table {
    let n = pair.dim();
    let np = pair.n_paths();
    let n_steps = pair.grid().n_steps();
    let mut header = vec!["step".to_string(), "t".into()];
    header.extend((0..n).map(|k| format!("mean_y{k}")));
    header.extend((0..n).map(|k| format!("mean_Y{k}")));
    let rows = (0..=n_steps)
        .map(|j| {
            let mut r = vec![j as f64, pair.grid().t(j)];
            r.extend(process_means(&pair.y, j, np));
            if j < n_steps {
                r.extend(process_means(&pair.big_y, j, np));
            } else {
                r.extend(std::iter::repeat_n(f64::NAN, n));
            }
            r
        })
        .collect();
    Table { header, rows }
}

/// Second-order data and the features trajectory for a preset.
pub fn second_order_data(setup: &Setup, choice: ControlChoice) -> Result<(StateEnsemble, SecondOrderData)> {
    if setup.is_second_order_only() {
        let kappa = setup.preset.get("kappa")?;
        let sigma = setup.preset.get("sigma")?;
        return second_order_scalar_data(kappa, sigma, &setup.ens);
    }
    let traj = setup.simulate(choice)?;
    let pair = solve_first_adjoint(&setup.scenario, &traj, &setup.ens, &setup.basis)?;
    let data = SecondOrderData::from_scenario(&setup.scenario, &traj, &pair)?;
    Ok((traj, data))
}

pub struct SecondRun {
    pub traj: StateEnsemble,
    pub data: SecondOrderData,
    pub sa: SecondOrderAdjoint,
    /// Deterministic reference when the data are deterministic.
    pub lyapunov: Option<MatrixProcess>,
}

pub fn second_adjoint(setup: &Setup, choice: ControlChoice) -> Result<SecondRun> {
    let (traj, data) = second_order_data(setup, choice)?;
    let op = &setup.scenario.op;
    let sa = solve_second_adjoint(op, &data, &traj, &setup.ens, &setup.basis)?;
    let lyapunov = if data.is_deterministic() {
        Some(lyapunov_oracle(op, &data, setup.grid())?)
    } else {
        None
    };
    Ok(SecondRun { traj, data, sa, lyapunov })
}

fn matrix_means(m: &MatrixProcess, j: usize, n_paths: usize) -> DMatrix<f64> {
    let mut acc = DMatrix::zeros(m.n(), m.n());
    let count = if m.is_shared() { 1 } else { n_paths };
    for p in 0..count {
        acc += m.matrix_at(p, j);
    }
    acc / count as f64
}

/// `step, t, mean P_rc…, mean Q_rc…` plus `lyap_P_rc…` when available.
pub fn second_table(run: &SecondRun) -> Table {
    let n = run.sa.p.n();
    let np = run.traj.n_paths();
    let n_steps = run.sa.grid().n_steps();
    let names = |pre: &str| -> Vec<String> {
        (0..n).flat_map(|r| (0..n).map(move |c| format!("{pre}{r}{c}"))).collect()
    };
    let mut header = vec!["step".to_string(), "t".into()];
    header.extend(names("mean_P"));
    header.extend(names("mean_Q"));
    if run.lyapunov.is_some() {
        header.extend(names("lyapunov_P"));
    }
    let flat = |m: DMatrix<f64>| -> Vec<f64> { (0..n).flat_map(|r| (0..n).map(move |c| (r, c))).map(|(r, c)| m[(r, c)]).collect() };
    let rows = (0..=n_steps)
        .map(|j| {
            let mut r = vec![j as f64, run.sa.grid().t(j)];
            r.extend(flat(matrix_means(&run.sa.p, j, np)));
            if j < n_steps {
                r.extend(flat(matrix_means(&run.sa.q, j, np)));
            } else {
                r.extend(std::iter::repeat_n(f64::NAN, n * n));
            }
            if let Some(l) = &run.lyapunov {
                r.extend(flat(l.matrix_at(0, j)));
            }
            r
        })
        .collect();
    Table { header, rows }
}

/// Largest entry gap between the mean regression `P` and the Lyapunov oracle.
pub fn lyapunov_gap(run: &SecondRun) -> Option<f64> {
    let l = run.lyapunov.as_ref()?;
    let np = run.traj.n_paths();
    Some(
        (0..=run.sa.grid().n_steps())
            .map(|j| (matrix_means(&run.sa.p, j, np) - l.matrix_at(0, j)).amax())
            .fold(0.0, f64::max),
    )
}

/// `K → K + δ` probe on the preset's second-order data, with probes
/// `v ≡ 1` and `v = cos(2πt/T)` in every mode.
pub fn lipschitz(setup: &Setup, choice: ControlChoice, deltas: &[f64]) -> Result<Vec<LipschitzRow>> {
    let (traj, data) = second_order_data(setup, choice)?;
    let n = setup.scenario.dim();
    let grid = *setup.grid();
    let n_steps = grid.n_steps();
    let direction = MatrixProcess::constant(&DMatrix::identity(n, n), n_steps);
    let span = grid.t_end() - grid.t0();
    let probes = vec![
        VectorProcess::constant(&SpectralVector::from_element(n, 1.0), n_steps),
        VectorProcess::deterministic(n, n_steps, |j| {
            SpectralVector::from_element(n, (2.0 * std::f64::consts::PI * (grid.t(j) - grid.t0()) / span).cos())
        }),
    ];
    lipschitz_probe(&setup.scenario.op, &data, &direction, deltas, &probes, &traj, &setup.ens, &setup.basis)
}

impl CsvTable for Vec<LipschitzRow> {
    fn header(&self) -> Vec<String> {
        ["delta", "discrepancy", "ratio"].map(String::from).to_vec()
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.iter()
            .map(|r| vec![fmt_f64(r.delta), fmt_f64(r.discrepancy), fmt_f64(r.ratio)])
            .collect()
    }
}

/// Largest over smallest `discrepancy/δ` among the nonzero deltas.
pub fn lipschitz_spread(rows: &[LipschitzRow]) -> f64 {
    let ratios: Vec<f64> = rows.iter().filter(|r| r.delta > 0.0).map(|r| r.ratio).collect();
    let hi = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    hi / lo
}

/// Identity reports tagged with the test number.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DualityReport {
    pub rows: Vec<(usize, IdentityReport)>,
}

impl DualityReport {
    pub fn pass(&self) -> bool {
        self.rows.iter().all(|(_, r)| r.pass)
    }

    /// Root mean square residual over the rows of one identity.
    pub fn rms_residual(&self, identity: &str) -> f64 {
        let r: Vec<f64> = self
            .rows
            .iter()
            .filter(|(_, r)| r.identity == identity)
            .map(|(_, r)| r.residual * r.residual)
            .collect();
        stats::mean(&r).sqrt()
    }
}

impl CsvTable for DualityReport {
    fn header(&self) -> Vec<String> {
        ["identity", "test", "n_paths", "dt", "lhs", "rhs", "residual", "stderr", "budget", "pass"]
            .map(String::from)
            .to_vec()
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|(i, r)| {
                vec![
                    r.identity.clone(),
                    i.to_string(),
                    r.n_paths.to_string(),
                    fmt_f64(r.dt),
                    fmt_f64(r.lhs),
                    fmt_f64(r.rhs),
                    fmt_f64(r.residual),
                    fmt_f64(r.stderr),
                    fmt_f64(r.budget),
                    r.pass.to_string(),
                ]
            })
            .collect()
    }
}

/// First-order identity on `n_tests` random test tuples along the
/// `choice` trajectory. Test data depend only on `test_seed`.
pub fn first_duality(
    setup: &Setup,
    choice: ControlChoice,
    n_tests: usize,
    test_seed: u64,
    k_sigma: f64,
) -> Result<DualityReport> {
    let (traj, pair) = first_adjoint(setup, choice)?;
    let rule = PassRule {
        k_sigma,
        c_bias: setup.calibration.first_identity,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(test_seed);
    let n = setup.scenario.dim();
    let n_steps = setup.grid().n_steps();
    let mut out = DualityReport::default();
    for i in 0..n_tests {
        let test = random_first_test(n, n_steps, Some(&traj), &mut rng);
        out.rows
            .push((i, verify_first_identity(&pair, &setup.scenario.op, &test, &setup.ens, &rule)?));
    }
    Ok(out)
}

/// Keeps the second-order test stream apart from the first-order one.
const SECOND_STREAM: u64 = 0x5ec0_0d00_0000_0002;

/// Second-order identity on random deterministic test tuples and, for
/// deterministic data, the `ξ`-only reduction against the Lyapunov oracle.
pub fn second_duality(
    setup: &Setup,
    choice: ControlChoice,
    n_tests: usize,
    test_seed: u64,
    k_sigma: f64,
) -> Result<DualityReport> {
    let run = second_adjoint(setup, choice)?;
    let rule = PassRule {
        k_sigma,
        c_bias: setup.calibration.second_identity,
    };
    let op = &setup.scenario.op;
    let n = setup.scenario.dim();
    let n_steps = setup.grid().n_steps();
    let mut rng = ChaCha8Rng::seed_from_u64(test_seed ^ SECOND_STREAM);
    let mut out = DualityReport::default();
    for i in 0..n_tests {
        let test = random_second_test(n, n_steps, &mut rng);
        out.rows
            .push((i, verify_second_identity(&run.sa, op, &run.data, &test, &setup.ens, &rule)?));
    }
    if let Some(l) = &run.lyapunov {
        for (i, t_index) in even_t_grid(n_steps, 4).into_iter().enumerate() {
            let test = random_second_test(n, n_steps, &mut rng);
            out.rows.push((
                i,
                verify_second_reduction(l, op, &run.data, t_index, &test.xi1, &test.xi2, &setup.ens, &rule)?,
            ));
        }
    }
    Ok(out)
}

pub fn mp_rules(cal: &Calibration, k_sigma: f64) -> MPRules {
    MPRules {
        spike: PassRule {
            k_sigma,
            c_bias: cal.spike,
        },
        gradient: PassRule {
            k_sigma,
            c_bias: cal.condition,
        },
    }
}

pub fn check_mp(setup: &Setup, choice: ControlChoice, u_points: usize, t_points: usize, k_sigma: f64) -> Result<MPReport> {
    setup.require_control_problem("check-mp")?;
    let traj = setup.simulate(choice)?;
    let adj = solve_adjoints(&setup.scenario, &traj, &setup.ens, &setup.basis)?;
    let u_grid = setup.scenario.control_set.grid(u_points);
    let t_grid = even_t_grid(setup.grid().n_steps(), t_points);
    check_condition(&setup.scenario, &traj, &adj, &u_grid, &t_grid, &mp_rules(&setup.calibration, k_sigma))
}

pub struct OptimizeRun {
    pub result: OptimizerResult,
    pub oracle_value: f64,
    pub relative_gap: f64,
}

pub fn optimize(setup: &Setup, init: ControlChoice, rule: &StepRule) -> Result<OptimizeRun> {
    setup.require_control_problem("optimize")?;
    let n_steps = setup.grid().n_steps();
    let start = match init {
        ControlChoice::Zero => VectorProcess::zeros(setup.scenario.control_dim, n_steps),
        ControlChoice::Riccati => match setup.simulate(init)?.applied_controls() {
            ControlProcess::OpenLoop(v) => v,
            ControlProcess::Feedback(_) => unreachable!("applied controls are open-loop"),
        },
    };
    let result = projected_gradient(&setup.scenario, &setup.x0(), &start, rule, &setup.ens, &setup.basis)?;
    let oracle_value = setup.oracle()?.value_at(&setup.scenario.x0);
    let relative_gap = (result.final_cost() - oracle_value) / oracle_value.abs();
    Ok(OptimizeRun {
        result,
        oracle_value,
        relative_gap,
    })
}

/// Gradient pairing against central differences of the cost, for
/// `n_dirs` random smooth directions around `ū`.
pub fn gradient_consistency(
    setup: &Setup,
    base: ControlChoice,
    n_dirs: usize,
    h: f64,
    test_seed: u64,
    k_sigma: f64,
) -> Result<Vec<GradientCheckRow>> {
    setup.require_control_problem("gradient check")?;
    let traj = setup.simulate(base)?;
    let ControlProcess::OpenLoop(u) = traj.applied_controls() else {
        unreachable!("applied controls are open-loop")
    };
    let mut rng = ChaCha8Rng::seed_from_u64(test_seed);
    let dirs: Vec<_> = (0..n_dirs)
        .map(|_| random_direction(setup.scenario.control_dim, setup.grid(), &mut rng))
        .collect();
    let rule = PassRule {
        k_sigma,
        c_bias: setup.calibration.gradient,
    };
    gradient_check(&setup.scenario, &setup.x0(), &u, &dirs, h, &setup.ens, &setup.basis, &rule)
}

pub fn spike(
    setup: &Setup,
    choice: ControlChoice,
    u_alt: &[f64],
    tau: f64,
    eps: &[f64],
) -> Result<SpikeTable> {
    setup.require_control_problem("spike-experiment")?;
    let m = setup.scenario.control_dim;
    if u_alt.len() != m {
        return domain(format!("alternative control needs {m} components, got {}", u_alt.len()));
    }
    let alt = VectorProcess::constant(&DVector::from_column_slice(u_alt), setup.grid().n_steps());
    spike_experiment(
        &setup.scenario,
        &setup.x0(),
        &setup.control(choice)?,
        &alt,
        tau,
        eps,
        &setup.ens,
        &setup.basis,
    )
}

pub struct OracleComparison {
    pub table: Table,
    pub riccati_value: f64,
    pub dp_value: f64,
    pub relative_gap: f64,
}

/// Riccati value against backward DP on a lattice covering ±6 standard
/// deviations around `x₀` (plus the optimal drift toward the origin).
pub fn cross_validate(setup: &Setup, lattice_points: usize, u_points: usize) -> Result<OracleComparison> {
    setup.require_control_problem("cross-validate-oracles")?;
    if setup.scenario.dim() != 1 || setup.scenario.control_dim != 1 {
        return domain("the lattice oracle is only available for scalar presets");
    }
    let grid = *setup.grid();
    let oracle = setup.oracle()?;
    let x0 = setup.scenario.x0[0];
    let sigma = setup.lq.sigma[0];
    let horizon = grid.t_end() - grid.t0();
    let half = x0.abs() + 6.0 * sigma.abs() * horizon.sqrt() + 1.0;
    let lattice = linspace(-half, half, lattice_points);
    let (lo, hi) = match &setup.scenario.control_set {
        crate::forward::ControlSet::Box { lo, hi } => (lo[0], hi[0]),
        crate::forward::ControlSet::FiniteGrid { .. } => return domain("lattice oracle needs a box control set"),
    };
    let u_grid = linspace(lo, hi, u_points);
    let dp = dp_oracle_scalar(&setup.scenario, &lattice, &u_grid, &grid)?;
    let xs = linspace(x0 - 1.0, x0 + 1.0, 5);
    let rows = xs
        .iter()
        .map(|&x| {
            let r = oracle.value_at(&SpectralVector::from_element(1, x));
            let d = dp.value_at(x);
            vec![x, r, d, (d - r) / r.abs().max(f64::MIN_POSITIVE)]
        })
        .collect();
    let riccati_value = oracle.value_at(&setup.scenario.x0);
    let dp_value = dp.value_at(x0);
    Ok(OracleComparison {
        table: Table {
            header: ["x", "riccati_value", "dp_value", "relative_gap"].map(String::from).to_vec(),
            rows,
        },
        riccati_value,
        dp_value,
        relative_gap: (dp_value - riccati_value) / riccati_value.abs(),
    })
}
