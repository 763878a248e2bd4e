//! Hamiltonian, the gradient and spike forms of the necessary condition, a
//! projected-gradient optimizer and the spike-variation cost expansion.
//!
//! All pairings use the step-conditional adjoint quantities `ỹ_j`, `Ỹ_j` and
//! `P̃_j`; see [`AdjointPair`] and [`SecondOrderAdjoint`].

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::adjoint::{solve_first_adjoint, AdjointPair, RegressionBasis};
use crate::error::{domain, Error, Result};
use crate::forward::{
    cost_of, path_costs, simulate_controlled, BrownianEnsemble, ControlProcess, Scenario, StateEnsemble, TimeGrid,
};
use crate::process::VectorProcess;
use crate::report::{fmt_f64, CsvTable};
use crate::second_order::{solve_second_adjoint, SecondOrderAdjoint, SecondOrderData};
use crate::spectral::SpectralVector;
use crate::stats;
use crate::transposition::PassRule;

const MEMBERSHIP_TOL: f64 = 1e-12;

/// First- and second-order adjoints along one reference trajectory.
#[derive(Clone, Debug)]
pub struct Adjoints {
    pub first: AdjointPair,
    pub second: SecondOrderAdjoint,
}

impl Adjoints {
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            first: self.first.scaled(c),
            second: self.second.scaled(c),
        }
    }
}

pub fn solve_adjoints(
    scenario: &Scenario,
    traj: &StateEnsemble,
    ens: &BrownianEnsemble,
    basis: &RegressionBasis,
) -> Result<Adjoints> {
    let first = solve_first_adjoint(scenario, traj, ens, basis)?;
    let data = SecondOrderData::from_scenario(scenario, traj, &first)?;
    let second = solve_second_adjoint(&scenario.op, &data, traj, ens, basis)?;
    Ok(Adjoints { first, second })
}

fn check_point(scenario: &Scenario, x: &SpectralVector, u: &DVector<f64>, k1: &SpectralVector, k2: &SpectralVector) -> Result<()> {
    let n = scenario.dim();
    if x.len() != n || k1.len() != n || k2.len() != n {
        return domain(format!("state and multipliers must have dimension {n}"));
    }
    if !scenario.control_set.contains(u, MEMBERSHIP_TOL) {
        return domain(format!("control {:?} is outside the control set", u.as_slice()));
    }
    Ok(())
}

fn ham(scenario: &Scenario, t: f64, x: &SpectralVector, u: &DVector<f64>, k1: &SpectralVector, k2: &SpectralVector) -> f64 {
    k1.dot(&scenario.drift(t, x, u)) + k2.dot(&scenario.diffusion(t, x, u)) - scenario.running_cost(t, x, u)
}

/// `ℍ(t, x, u, k₁, k₂) = ⟨k₁, a⟩ + ⟨k₂, b⟩ − g`.
pub fn hamiltonian(
    scenario: &Scenario,
    t: f64,
    x: &SpectralVector,
    u: &DVector<f64>,
    k1: &SpectralVector,
    k2: &SpectralVector,
) -> Result<f64> {
    check_point(scenario, x, u, k1, k2)?;
    Ok(ham(scenario, t, x, u, k1, k2))
}

/// `ℍ_u = a_uᵀk₁ + b_uᵀk₂ − g_u`.
pub fn hamiltonian_gradient(
    scenario: &Scenario,
    t: f64,
    x: &SpectralVector,
    u: &DVector<f64>,
    k1: &SpectralVector,
    k2: &SpectralVector,
) -> DVector<f64> {
    scenario.drift_u(t, x, u).tr_mul(k1) + scenario.diffusion_u(t, x, u).tr_mul(k2) - scenario.cost_u(t, x, u)
}

/// `S = ℍ(ū) − ℍ(u) − ½⟨P δb, δb⟩` with `δb = b(u) − b(ū)`.
#[allow(clippy::too_many_arguments)]
pub fn spike_value(
    scenario: &Scenario,
    t: f64,
    x: &SpectralVector,
    u_bar: &DVector<f64>,
    u: &DVector<f64>,
    k1: &SpectralVector,
    k2: &SpectralVector,
    p: &DMatrix<f64>,
) -> Result<f64> {
    check_point(scenario, x, u, k1, k2)?;
    if u == u_bar {
        return Ok(0.0);
    }
    let db = scenario.diffusion(t, x, u) - scenario.diffusion(t, x, u_bar);
    Ok(ham(scenario, t, x, u_bar, k1, k2) - ham(scenario, t, x, u, k1, k2) - 0.5 * db.dot(&(p * &db)))
}

fn check_alignment(traj: &StateEnsemble, pair: &AdjointPair, t_index: usize) -> Result<()> {
    if pair.fingerprint() != traj.fingerprint() || pair.grid() != traj.grid() || pair.n_paths() != traj.n_paths() {
        return Err(Error::IdentityInvalid("adjoint was computed on a different ensemble".into()));
    }
    if t_index >= traj.grid().n_steps() {
        return domain(format!("time index {t_index} is not before the final step"));
    }
    Ok(())
}

/// Per-path `a_uᵀỹ + b_uᵀỸ − g_u` at step `t_index` along `traj`.
pub fn convex_gradient(
    scenario: &Scenario,
    t_index: usize,
    traj: &StateEnsemble,
    pair: &AdjointPair,
) -> Result<Vec<DVector<f64>>> {
    if !scenario.control_set.is_convex() {
        return Err(Error::WrongTheorem(
            "the gradient condition needs a convex control set; use the spike functional".into(),
        ));
    }
    check_alignment(traj, pair, t_index)?;
    let t = traj.grid().t(t_index);
    Ok((0..traj.n_paths())
        .into_par_iter()
        .map(|p| {
            hamiltonian_gradient(
                scenario,
                t,
                &traj.state_vec(p, t_index),
                &traj.control_vec(p, t_index),
                &pair.y_cond.vec_at(p, t_index),
                &pair.big_y.vec_at(p, t_index),
            )
        })
        .collect())
}

/// Per-path spike functional `S(t, u)` at step `t_index` along `traj`.
pub fn spike_functional(
    scenario: &Scenario,
    t_index: usize,
    u: &DVector<f64>,
    traj: &StateEnsemble,
    adj: &Adjoints,
) -> Result<Vec<f64>> {
    check_alignment(traj, &adj.first, t_index)?;
    if adj.second.fingerprint() != traj.fingerprint() {
        return Err(Error::IdentityInvalid("second-order adjoint was computed on a different ensemble".into()));
    }
    let t = traj.grid().t(t_index);
    (0..traj.n_paths())
        .into_par_iter()
        .map(|p| {
            spike_value(
                scenario,
                t,
                &traj.state_vec(p, t_index),
                &traj.control_vec(p, t_index),
                u,
                &adj.first.y_cond.vec_at(p, t_index),
                &adj.first.big_y.vec_at(p, t_index),
                &adj.second.p_cond.matrix_at(p, t_index),
            )
        })
        .collect()
}

/// `k` step indices spread evenly over `[0, n_steps)`.
pub fn even_t_grid(n_steps: usize, k: usize) -> Vec<usize> {
    let k = k.clamp(1, n_steps.max(1));
    (0..k).map(|i| i * n_steps / k).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Condition {
    /// `E S(t, u) ≥ 0`.
    Spike,
    /// `−E⟨ℍ_u, u − ū⟩ ≥ 0`.
    Gradient,
}

impl Condition {
    pub fn name(&self) -> &'static str {
        match self {
            Condition::Spike => "spike",
            Condition::Gradient => "gradient",
        }
    }
}

/// One `(t, u)` cell of a condition check. `mean` should be nonnegative at
/// an optimum.
#[derive(Clone, Debug, PartialEq)]
pub struct MPEntry {
    pub condition: Condition,
    pub t_index: usize,
    pub t: f64,
    pub u: Vec<f64>,
    pub mean: f64,
    pub stderr: f64,
    pub budget: f64,
}

impl MPEntry {
    pub fn violation(&self) -> f64 {
        (-self.mean).max(0.0)
    }

    pub fn passes(&self) -> bool {
        self.mean >= -self.budget
    }
}

/// Pass rules for the two condition forms. The gradient form is linear in
/// `u − ū`, so its discretization bias grows with the grid extent and
/// usually needs a larger `c_bias`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MPRules {
    pub spike: PassRule,
    pub gradient: PassRule,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MPReport {
    pub entries: Vec<MPEntry>,
    /// Largest `max(0, −mean)` over all entries.
    pub max_violation: f64,
    /// Entry with the largest `−mean − budget`.
    pub worst: usize,
    pub rules: MPRules,
    pub pass: bool,
}

impl MPReport {
    pub fn worst_entry(&self) -> &MPEntry {
        &self.entries[self.worst]
    }

    pub fn failing(&self) -> impl Iterator<Item = &MPEntry> {
        self.entries.iter().filter(|e| !e.passes())
    }
}

impl CsvTable for MPReport {
    fn header(&self) -> Vec<String> {
        let m = self.entries.first().map_or(0, |e| e.u.len());
        let mut h = vec!["condition".to_string(), "t_index".into(), "t".into()];
        h.extend((0..m).map(|i| format!("u{i}")));
        h.extend(["mean", "stderr", "budget", "violation", "pass"].map(String::from));
        h
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.entries
            .iter()
            .map(|e| {
                let mut r = vec![e.condition.name().to_string(), e.t_index.to_string(), fmt_f64(e.t)];
                r.extend(e.u.iter().map(|v| fmt_f64(*v)));
                r.extend([fmt_f64(e.mean), fmt_f64(e.stderr), fmt_f64(e.budget), fmt_f64(e.violation())]);
                r.push(e.passes().to_string());
                r
            })
            .collect()
    }
}

/// Checks the spike condition (and, for convex sets, the gradient
/// condition) on every `(t, u)` of the grids, using the controls applied
/// along `traj` as `ū`.
pub fn check_condition(
    scenario: &Scenario,
    traj: &StateEnsemble,
    adj: &Adjoints,
    u_grid: &[DVector<f64>],
    t_grid: &[usize],
    rules: &MPRules,
) -> Result<MPReport> {
    if u_grid.is_empty() || t_grid.is_empty() {
        return domain("condition check needs a non-empty control grid and time grid");
    }
    if let Some(u) = u_grid.iter().find(|u| !scenario.control_set.contains(u, MEMBERSHIP_TOL)) {
        return domain(format!("grid control {:?} is outside the control set", u.as_slice()));
    }
    let grid = *traj.grid();
    let dt = grid.dt();
    let mut entries = Vec::new();
    let mut push = |condition, j: usize, u: &DVector<f64>, vals: &[f64]| {
        let (mean, stderr) = stats::mean_stderr(vals);
        let rule = match condition {
            Condition::Spike => &rules.spike,
            Condition::Gradient => &rules.gradient,
        };
        entries.push(MPEntry {
            condition,
            t_index: j,
            t: grid.t(j),
            u: u.as_slice().to_vec(),
            mean,
            stderr,
            budget: rule.budget(stderr, dt),
        });
    };
    for &j in t_grid {
        for u in u_grid {
            let s = spike_functional(scenario, j, u, traj, adj)?;
            push(Condition::Spike, j, u, &s);
        }
        if scenario.control_set.is_convex() {
            let grads = convex_gradient(scenario, j, traj, &adj.first)?;
            for u in u_grid {
                let vals: Vec<f64> = grads
                    .iter()
                    .enumerate()
                    .map(|(p, g)| -g.dot(&(u - traj.control_vec(p, j))))
                    .collect();
                push(Condition::Gradient, j, u, &vals);
            }
        }
    }
    let max_violation = entries.iter().map(MPEntry::violation).fold(0.0, f64::max);
    let mut worst = 0;
    for (i, e) in entries.iter().enumerate() {
        if -e.mean - e.budget > -entries[worst].mean - entries[worst].budget {
            worst = i;
        }
    }
    let pass = entries.iter().all(MPEntry::passes);
    Ok(MPReport {
        entries,
        max_violation,
        worst,
        rules: *rules,
        pass,
    })
}

/// Fixed-step projected gradient rule with its stopping thresholds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRule {
    pub step: f64,
    pub max_iters: usize,
    /// Stop when `sqrt(dt Σ_j E|Δu_j|²)` falls below this.
    pub step_tol: f64,
    /// Stop when `|ΔJ| / |J|` falls below this.
    pub rel_tol: f64,
    /// Stop when `|ΔJ|` falls below this many standard errors of `J`.
    pub stat_tol: f64,
}

impl Default for StepRule {
    fn default() -> Self {
        Self {
            step: 0.5,
            max_iters: 200,
            step_tol: 1e-6,
            rel_tol: 1e-5,
            stat_tol: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerIter {
    pub iter: usize,
    pub cost: f64,
    pub stderr: f64,
    /// Size of the step that produced this iterate (0 for the initial one).
    pub step_norm: f64,
}

#[derive(Clone, Debug)]
pub struct OptimizerResult {
    pub control: VectorProcess,
    pub history: Vec<OptimizerIter>,
    pub converged: bool,
}

impl OptimizerResult {
    pub fn final_cost(&self) -> f64 {
        self.history.last().map_or(f64::NAN, |h| h.cost)
    }

    /// Number of updates actually applied.
    pub fn effective_steps(&self) -> usize {
        self.history.len() - 1
    }
}

impl CsvTable for OptimizerResult {
    fn header(&self) -> Vec<String> {
        ["iter", "J", "stderr", "step_norm"].map(String::from).to_vec()
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.history
            .iter()
            .map(|h| vec![h.iter.to_string(), fmt_f64(h.cost), fmt_f64(h.stderr), fmt_f64(h.step_norm)])
            .collect()
    }
}

/// Open-loop (per-path) iteration `u ← Π_U(u + step·(a_uᵀỹ + b_uᵀỸ − g_u))`.
pub fn projected_gradient(
    scenario: &Scenario,
    x0: &VectorProcess,
    init: &VectorProcess,
    rule: &StepRule,
    ens: &BrownianEnsemble,
    basis: &RegressionBasis,
) -> Result<OptimizerResult> {
    if !scenario.control_set.is_convex() {
        return Err(Error::WrongTheorem("projected gradient needs a convex control set".into()));
    }
    if !(rule.step >= 0.0 && rule.step.is_finite()) {
        return Err(Error::StepRule(format!("step {} must be finite and nonnegative", rule.step)));
    }
    let grid = *ens.grid();
    let (np, n_steps, m) = (ens.n_paths(), grid.n_steps(), scenario.control_dim);
    init.check_shape("initial control", np, n_steps, m)?;
    let dt = grid.dt();

    let mut u = init.clone();
    let mut history: Vec<OptimizerIter> = Vec::new();
    let mut step_norm = 0.0;
    let mut increases = 0;
    let mut converged = false;
    loop {
        let traj = simulate_controlled(scenario, x0, &ControlProcess::OpenLoop(u.clone()), ens)?;
        let est = cost_of(scenario, &traj);
        let iter = history.len();
        if let Some(prev) = history.last() {
            if est.estimate - prev.cost > 10.0 * est.stderr {
                increases += 1;
                if increases >= 5 {
                    return Err(Error::StepRule(format!(
                        "cost increased by more than 10 standard errors for 5 consecutive iterations (J = {})",
                        est.estimate
                    )));
                }
            } else {
                increases = 0;
            }
            let change = (prev.cost - est.estimate).abs();
            if change < rule.rel_tol * prev.cost.abs() || change < rule.stat_tol * est.stderr {
                converged = true;
            }
        }
        history.push(OptimizerIter {
            iter,
            cost: est.estimate,
            stderr: est.stderr,
            step_norm,
        });
        if converged || iter >= rule.max_iters {
            break;
        }

        let pair = solve_first_adjoint(scenario, &traj, ens, basis)?;
        let rows: Vec<(Vec<f64>, f64)> = (0..np)
            .into_par_iter()
            .map(|p| {
                let mut row = Vec::with_capacity(n_steps * m);
                let mut sq = 0.0;
                for j in 0..n_steps {
                    let ub = traj.control_vec(p, j);
                    let g = hamiltonian_gradient(
                        scenario,
                        grid.t(j),
                        &traj.state_vec(p, j),
                        &ub,
                        &pair.y_cond.vec_at(p, j),
                        &pair.big_y.vec_at(p, j),
                    );
                    let next = scenario.control_set.project(&(&ub + g * rule.step));
                    sq += (&next - &ub).norm_squared();
                    row.extend_from_slice(next.as_slice());
                }
                (row, sq)
            })
            .collect();
        let sq: Vec<f64> = rows.iter().map(|r| r.1).collect();
        step_norm = (dt * stats::mean(&sq)).sqrt();
        if step_norm < rule.step_tol {
            converged = true;
            break;
        }
        let data: Vec<f64> = rows.into_iter().flat_map(|r| r.0).collect();
        u = VectorProcess::from_raw(np, m, n_steps, data)?;
    }
    Ok(OptimizerResult {
        control: u,
        history,
        converged,
    })
}

/// Smooth random open-loop direction `Σ_{k=1..3} c_k sin(kπ(t − t₀)/T)` per
/// control coordinate, with `c_k` standard normal.
pub fn random_direction<R: Rng>(control_dim: usize, grid: &TimeGrid, rng: &mut R) -> VectorProcess {
    use rand_distr::{Distribution, StandardNormal};
    let coef: Vec<[f64; 3]> = (0..control_dim)
        .map(|_| std::array::from_fn(|_| Distribution::<f64>::sample(&StandardNormal, rng)))
        .collect();
    let span = grid.t_end() - grid.t0();
    VectorProcess::deterministic(control_dim, grid.n_steps(), |j| {
        let s = (grid.t(j) - grid.t0()) / span;
        DVector::from_iterator(
            control_dim,
            coef.iter().map(|c| {
                (0..3)
                    .map(|k| c[k] * ((k + 1) as f64 * std::f64::consts::PI * s).sin())
                    .sum::<f64>()
            }),
        )
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientCheckRow {
    pub direction: usize,
    /// `E Σ_j dt ⟨ℍ_u, δu_j⟩`, predicted to equal `−dJ/dh`.
    pub pairing: f64,
    /// `(J(u + hδu) − J(u − hδu)) / 2h`.
    pub finite_difference: f64,
    /// Mean of per-path `fd + pairing`.
    pub residual: f64,
    pub stderr: f64,
    pub budget: f64,
    pub pass: bool,
}

impl CsvTable for Vec<GradientCheckRow> {
    fn header(&self) -> Vec<String> {
        ["direction", "pairing", "finite_difference", "residual", "stderr", "budget", "pass"]
            .map(String::from)
            .to_vec()
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.iter()
            .map(|r| {
                vec![
                    r.direction.to_string(),
                    fmt_f64(r.pairing),
                    fmt_f64(r.finite_difference),
                    fmt_f64(r.residual),
                    fmt_f64(r.stderr),
                    fmt_f64(r.budget),
                    r.pass.to_string(),
                ]
            })
            .collect()
    }
}

fn shift_control(base: &VectorProcess, dir: &VectorProcess, h: f64, np: usize) -> Result<VectorProcess> {
    let (m, len) = (base.dim(), base.len());
    let mut data = Vec::with_capacity(np * len * m);
    for p in 0..np {
        for j in 0..len {
            data.extend(base.at(p, j).iter().zip(dir.at(p, j)).map(|(b, d)| b + h * d));
        }
    }
    VectorProcess::from_raw(np, m, len, data)
}

/// Compares the adjoint pairing with central differences of the cost for
/// open-loop perturbations `base ± h·δu`, on common random numbers.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check(
    scenario: &Scenario,
    x0: &VectorProcess,
    base: &VectorProcess,
    directions: &[VectorProcess],
    h: f64,
    ens: &BrownianEnsemble,
    basis: &RegressionBasis,
    rule: &PassRule,
) -> Result<Vec<GradientCheckRow>> {
    if !(h > 0.0) {
        return domain("finite-difference step must be positive");
    }
    if !scenario.control_set.is_convex() {
        return Err(Error::WrongTheorem("gradient check needs a convex control set".into()));
    }
    let grid = *ens.grid();
    let (np, n_steps, m) = (ens.n_paths(), grid.n_steps(), scenario.control_dim);
    base.check_shape("base control", np, n_steps, m)?;
    let traj = simulate_controlled(scenario, x0, &ControlProcess::OpenLoop(base.clone()), ens)?;
    let pair = solve_first_adjoint(scenario, &traj, ens, basis)?;
    let dt = grid.dt();
    let grads: Vec<Vec<DVector<f64>>> = (0..n_steps)
        .map(|j| convex_gradient(scenario, j, &traj, &pair))
        .collect::<Result<_>>()?;
    directions
        .iter()
        .enumerate()
        .map(|(i, dir)| {
            dir.check_shape("direction", np, n_steps, m)?;
            let plus = simulate_controlled(scenario, x0, &ControlProcess::OpenLoop(shift_control(base, dir, h, np)?), ens)?;
            let minus = simulate_controlled(scenario, x0, &ControlProcess::OpenLoop(shift_control(base, dir, -h, np)?), ens)?;
            let (jp, jm) = (path_costs(scenario, &plus), path_costs(scenario, &minus));
            let fd: Vec<f64> = jp.iter().zip(&jm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
            let pairing: Vec<f64> = (0..np)
                .map(|p| (0..n_steps).map(|j| grads[j][p].dot(&dir.vec_at(p, j))).sum::<f64>() * dt)
                .collect();
            let resid: Vec<f64> = fd.iter().zip(&pairing).map(|(a, b)| a + b).collect();
            let (residual, stderr) = stats::mean_stderr(&resid);
            let budget = rule.budget(stderr, dt);
            Ok(GradientCheckRow {
                direction: i,
                pairing: stats::mean(&pairing),
                finite_difference: stats::mean(&fd),
                residual,
                stderr,
                budget,
                pass: residual.abs() <= budget,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpikeRow {
    pub epsilon: f64,
    pub tau: f64,
    pub j_perturbed: f64,
    pub j_base: f64,
    pub delta_j: f64,
    pub delta_j_stderr: f64,
    /// `Σ_{E_ε} dt · E S(t, u_alt)`.
    pub predicted: f64,
    pub remainder: f64,
    pub remainder_over_eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpikeTable {
    pub rows: Vec<SpikeRow>,
}

impl SpikeTable {
    /// Number of places where `|remainder|/ε` fails to decrease.
    pub fn inversions(&self) -> usize {
        self.rows
            .windows(2)
            .filter(|w| w[1].remainder_over_eps.abs() > w[0].remainder_over_eps.abs())
            .count()
    }
}

impl CsvTable for SpikeTable {
    fn header(&self) -> Vec<String> {
        [
            "epsilon",
            "tau",
            "J_perturbed",
            "J_base",
            "delta_J",
            "delta_J_stderr",
            "predicted",
            "remainder",
            "remainder_over_eps",
        ]
        .map(String::from)
        .to_vec()
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                [
                    r.epsilon,
                    r.tau,
                    r.j_perturbed,
                    r.j_base,
                    r.delta_j,
                    r.delta_j_stderr,
                    r.predicted,
                    r.remainder,
                    r.remainder_over_eps,
                ]
                .map(fmt_f64)
                .to_vec()
            })
            .collect()
    }
}

/// Spike variation `u^ε = u_alt` on `[τ, τ + ε)`, `ū` elsewhere. `ū` is the
/// control applied along the base trajectory, frozen as a per-path
/// open-loop process so only the spike interval differs between runs.
#[allow(clippy::too_many_arguments)]
pub fn spike_experiment(
    scenario: &Scenario,
    x0: &VectorProcess,
    control: &ControlProcess,
    u_alt: &VectorProcess,
    tau: f64,
    eps_list: &[f64],
    ens: &BrownianEnsemble,
    basis: &RegressionBasis,
) -> Result<SpikeTable> {
    let grid = *ens.grid();
    let (np, n_steps, m) = (ens.n_paths(), grid.n_steps(), scenario.control_dim);
    let dt = grid.dt();
    if eps_list.is_empty() {
        return domain("spike experiment needs at least one epsilon");
    }
    if eps_list.iter().any(|e| !(*e > 0.0)) || eps_list.windows(2).any(|w| w[1] >= w[0]) {
        return domain("epsilons must be positive and strictly decreasing");
    }
    if tau < grid.t0() || tau + eps_list[0] > grid.t_end() + 1e-9 * (1.0 + grid.t_end().abs()) {
        return domain(format!("spike interval [{tau}, {}] leaves the time grid", tau + eps_list[0]));
    }
    u_alt.check_shape("alternative control", np, n_steps, m)?;
    let j0 = ((tau - grid.t0()) / dt).round() as usize;
    let counts: Vec<usize> = eps_list.iter().map(|e| (e / dt).round() as usize).collect();
    if counts.contains(&0) || j0 + counts[0] > n_steps {
        return domain("every epsilon must span at least one grid step inside the horizon");
    }
    for p in 0..u_alt.n_paths().unwrap_or(1) {
        for j in j0..j0 + counts[0] {
            let v = u_alt.vec_at(p, j);
            if !scenario.control_set.contains(&v, MEMBERSHIP_TOL) {
                return domain(format!("alternative control {:?} is outside the control set", v.as_slice()));
            }
        }
    }

    let base = simulate_controlled(scenario, x0, control, ens)?;
    let base_costs = path_costs(scenario, &base);
    let adj = solve_adjoints(scenario, &base, ens, basis)?;
    let ControlProcess::OpenLoop(ubar) = base.applied_controls() else {
        unreachable!("applied controls are open-loop")
    };

    let s_mean: Vec<f64> = (j0..j0 + counts[0])
        .map(|j| {
            let t = grid.t(j);
            let vals: Vec<f64> = (0..np)
                .into_par_iter()
                .map(|p| {
                    spike_value(
                        scenario,
                        t,
                        &base.state_vec(p, j),
                        &base.control_vec(p, j),
                        &u_alt.vec_at(p, j),
                        &adj.first.y_cond.vec_at(p, j),
                        &adj.first.big_y.vec_at(p, j),
                        &adj.second.p_cond.matrix_at(p, j),
                    )
                })
                .collect::<Result<_>>()?;
            Ok(stats::mean(&vals))
        })
        .collect::<Result<_>>()?;

    let j_base = stats::mean(&base_costs);
    let mut rows = Vec::with_capacity(eps_list.len());
    for (&eps, &count) in eps_list.iter().zip(&counts) {
        let mut data = Vec::with_capacity(np * n_steps * m);
        for p in 0..np {
            for j in 0..n_steps {
                let src = if (j0..j0 + count).contains(&j) { u_alt.at(p, j) } else { ubar.at(p, j) };
                data.extend_from_slice(src);
            }
        }
        let spiked = VectorProcess::from_raw(np, m, n_steps, data)?;
        let traj = simulate_controlled(scenario, x0, &ControlProcess::OpenLoop(spiked), ens)?;
        let costs = path_costs(scenario, &traj);
        let diff: Vec<f64> = costs.iter().zip(&base_costs).map(|(a, b)| a - b).collect();
        let (delta_j, delta_j_stderr) = stats::mean_stderr(&diff);
        let predicted = s_mean[..count].iter().sum::<f64>() * dt;
        let remainder = delta_j - predicted;
        rows.push(SpikeRow {
            epsilon: eps,
            tau,
            j_perturbed: stats::mean(&costs),
            j_base,
            delta_j,
            delta_j_stderr,
            predicted,
            remainder,
            remainder_over_eps: remainder / eps,
        });
    }
    Ok(SpikeTable { rows })
}
