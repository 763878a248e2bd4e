//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use smpkit::adjoint::{solve_linear_adjoint, RegressionBasis};
use smpkit::cli::experiments::{self, ControlChoice, Setup};
use smpkit::forward::{initial_state, simulate_controlled};
use smpkit::maximum_principle::{Condition, StepRule};
use smpkit::second_order::{solve_second_adjoint, SecondOrderData};
use smpkit::{BrownianEnsemble, ControlProcess, MatrixProcess, OperatorSpec, Result, SpectralVector, TimeGrid, VectorProcess};

type Verdict = Result<(bool, String)>;
type Criterion = (&'static str, fn() -> Verdict);

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, Duration)> {
    let start = Instant::now();
    let v = f()?;
    Ok((v, start.elapsed()))
}

const LADDER: [(f64, usize); 3] = [(0.01, 2500), (0.005, 10_000), (0.0025, 40_000)];

fn criterion_1() -> Verdict {
    let mut ok = true;
    let mut notes = Vec::new();
    for preset in ["lq_scalar", "heat4"] {
        let mut rms = Vec::new();
        let mut pass = true;
        let mut took = Duration::ZERO;
        for (dt, paths) in LADDER {
            let (rep, t) = timed(|| {
                let s = Setup::load(preset, dt, paths, 7)?;
                experiments::first_duality(&s, ControlChoice::Riccati, 20, 7, 3.0)
            })?;
            if dt == 0.005 {
                pass = rep.pass();
                took = t;
            }
            rms.push(rep.rms_residual("first_order"));
        }
        let decreasing = rms.windows(2).all(|w| w[1] < w[0]);
        let fast = took <= Duration::from_secs(120);
        ok &= pass && decreasing && fast;
        notes.push(format!(
            "{preset}: 20/20 at dt=1/200 {}, rms ladder {:.2e} > {:.2e} > {:.2e} {}, {:.0}s at dt=1/200",
            if pass { "ok" } else { "FAILED" },
            rms[0],
            rms[1],
            rms[2],
            if decreasing { "ok" } else { "NOT DECREASING" },
            took.as_secs_f64()
        ));
    }
    Ok((ok, notes.join("; ")))
}

fn criterion_2() -> Verdict {
    let ((ok, notes), took) = timed(|| {
        let mut ok = true;
        let mut notes = Vec::new();
        for preset in ["second_order_scalar", "heat4"] {
            let s = Setup::load(preset, 0.005, 10_000, 7)?;
            let rep = experiments::second_duality(&s, ControlChoice::Riccati, 20, 7, 3.0)?;
            let count = |id: &str| {
                let rows: Vec<_> = rep.rows.iter().filter(|(_, r)| r.identity == id).collect();
                (rows.iter().filter(|(_, r)| r.pass).count(), rows.len())
            };
            let (p2, n2) = count("second_order");
            let (pr, nr) = count("second_order_reduction");
            ok &= rep.pass();
            notes.push(format!("{preset} (n={}): identity {p2}/{n2}, reduction vs Lyapunov {pr}/{nr}", s.scenario.dim()));
        }
        Ok((ok, notes))
    })?;
    let fast = took <= Duration::from_secs(300);
    Ok((ok && fast, format!("{}; {:.0}s", notes.join("; "), took.as_secs_f64())))
}

fn criterion_3() -> Verdict {
    let op = OperatorSpec::dirichlet_laplacian(4, std::f64::consts::PI)?;
    let mu: Vec<f64> = op.eigenvalues().to_vec();
    let alpha = [1.0, -0.5, 0.8, 0.3];
    let beta = 0.7;
    let y_t = SpectralVector::from_vec(vec![0.5, -1.0, 0.25, 2.0]);
    let horizon = 1.0;
    let f_norm = alpha.iter().map(|a: &f64| a.abs()).fold(0.0, f64::max) * f64::exp(beta * horizon);
    let exact = |k: usize, t: f64| {
        let (m, a) = (mu[k], alpha[k]);
        (m * (horizon - t)).exp() * y_t[k] - a * (-m * t).exp() * (((m + beta) * horizon).exp() - ((m + beta) * t).exp()) / (m + beta)
    };
    let s = Setup::load("heat4", 0.01, 1, 1)?;
    let mut ok = true;
    let mut notes = Vec::new();
    for n_steps in [100, 200] {
        let grid = TimeGrid::new(0.0, horizon, n_steps)?;
        let ens = BrownianEnsemble::sample(grid, 1000, 3)?;
        let traj = simulate_controlled(&s.scenario, &initial_state(&s.scenario.x0), &ControlProcess::zero(2, n_steps), &ens)?;
        let pair = solve_linear_adjoint(
            &op,
            &traj,
            &ens,
            &RegressionBasis::default(),
            &VectorProcess::constant(&y_t, 1),
            |_, j, _, _| SpectralVector::from_fn(4, |k, _| alpha[k] * (beta * grid.t(j)).exp()),
        )?;
        let mut err: f64 = 0.0;
        for p in [0, 999] {
            for j in 0..=n_steps {
                for k in 0..4 {
                    err = err.max((pair.y.at(p, j)[k] - exact(k, grid.t(j))).abs());
                }
            }
        }
        let bound = 2.0 * grid.dt() * f_norm * horizon;
        ok &= err <= bound;
        notes.push(format!("first dt=1/{n_steps}: err {err:.2e} <= {bound:.2e}"));
    }
    let (kappa, p_t) = (0.6, 1.3);
    let grid = TimeGrid::new(0.0, 1.0, 400)?;
    let ens = BrownianEnsemble::sample(grid, 4000, 5)?;
    let scalar = OperatorSpec::new(vec![0.0], 1.0)?;
    let lq = Setup::load("lq_scalar", 0.0025, 4000, 5)?;
    let traj = lq.simulate(ControlChoice::Zero)?;
    let m = |v: f64| DMatrix::from_element(1, 1, v);
    for per_path in [false, true] {
        let data = SecondOrderData {
            j: MatrixProcess::constant(&m(0.0), 400),
            k: MatrixProcess::constant(&m(kappa), 400),
            f: MatrixProcess::constant(&m(0.0), 400),
            p_t: if per_path {
                MatrixProcess::per_path(4000, 1, 1, |_, _| m(p_t))
            } else {
                MatrixProcess::constant(&m(p_t), 1)
            },
        };
        let sa = solve_second_adjoint(&scalar, &data, &traj, &ens, &RegressionBasis::default())?;
        let mut rel: f64 = 0.0;
        for j in 0..=400 {
            let want = p_t * (kappa * kappa * (1.0 - grid.t(j))).exp();
            rel = rel.max((sa.p.at(0, j)[0] - want).abs() / want);
        }
        ok &= rel <= 0.01;
        notes.push(format!(
            "matrix {} dt=1/400: rel err {rel:.2e} <= 1e-2",
            if per_path { "regression path" } else { "deterministic path" }
        ));
    }
    Ok((ok, notes.join("; ")))
}

fn criterion_4() -> Verdict {
    let s = Setup::load("lq_scalar", 0.005, 10_000, 7)?;
    let mut ok = true;
    let mut notes = Vec::new();
    for base in [ControlChoice::Zero, ControlChoice::Riccati] {
        let rows = experiments::gradient_consistency(&s, base, 5, 1e-3, 11, 3.0)?;
        let worst = rows
            .iter()
            .map(|r| r.residual.abs() / r.budget)
            .fold(0.0, f64::max);
        let pass = rows.iter().all(|r| r.pass);
        ok &= pass;
        notes.push(format!(
            "around {}: {}/5 directions, worst |residual|/budget {worst:.2e}",
            base.name(),
            rows.iter().filter(|r| r.pass).count()
        ));
    }
    Ok((ok, notes.join("; ")))
}

fn criterion_5() -> Verdict {
    let s = Setup::load("lq_scalar", 0.005, 20_000, 7)?;
    let (run, took) = timed(|| experiments::optimize(&s, ControlChoice::Zero, &StepRule::default()))?;
    let iters = run.result.effective_steps();
    let ok = run.relative_gap.abs() <= 0.02 && iters <= 200 && took <= Duration::from_secs(180);
    Ok((
        ok,
        format!(
            "J = {:.5} vs oracle {:.5} (gap {:+.2}%), {iters} iterations, {:.0}s",
            run.result.final_cost(),
            run.oracle_value,
            100.0 * run.relative_gap,
            took.as_secs_f64()
        ),
    ))
}

fn criterion_6() -> Verdict {
    let s = Setup::load("lq_scalar", 0.005, 10_000, 7)?;
    let table = experiments::spike(&s, ControlChoice::Riccati, &[0.0], 1.0 / 3.0, &[0.2, 0.1, 0.05, 0.025])?;
    let ladder: Vec<String> = table.rows.iter().map(|r| format!("{:.2e}", r.remainder_over_eps)).collect();
    let rep = experiments::check_mp(&s, ControlChoice::Riccati, 21, 8, 3.0)?;
    let spike: Vec<_> = rep.entries.iter().filter(|e| e.condition == Condition::Spike).collect();
    let held = spike.iter().filter(|e| e.passes()).count();
    let ok = table.inversions() <= 1 && held == spike.len() && spike.len() == 21 * 8;
    Ok((
        ok,
        format!(
            "remainder/eps {} ({} inversions); S >= -(3se + c dt) on {held}/{} grid cells",
            ladder.join(" > "),
            table.inversions(),
            spike.len()
        ),
    ))
}

fn criterion_7() -> Verdict {
    let s = Setup::load("second_order_scalar", 0.005, 10_000, 7)?;
    let rows = experiments::lipschitz(&s, ControlChoice::Riccati, &[0.2, 0.1, 0.05])?;
    let spread = experiments::lipschitz_spread(&rows);
    let ratios: Vec<String> = rows.iter().map(|r| format!("{:.4}", r.ratio)).collect();
    Ok((spread <= 2.0, format!("discrepancy/delta {} (spread {spread:.3} <= 2)", ratios.join(", "))))
}

fn criterion_8() -> Verdict {
    let s = Setup::load("lq_scalar", 0.005, 1, 7)?;
    let cmp = experiments::cross_validate(&s, 401, 41)?;
    Ok((
        cmp.relative_gap.abs() <= 0.02,
        format!(
            "Riccati {:.5}, DP {:.5}, gap {:+.2}%",
            cmp.riccati_value,
            cmp.dp_value,
            100.0 * cmp.relative_gap
        ),
    ))
}

fn run_cli(out: &Path, args: &[&str]) -> Result<i32> {
    let status = Command::new(env!("CARGO_BIN_EXE_smpkit"))
        .args(args)
        .arg("--out")
        .arg(out)
        .stderr(std::process::Stdio::null())
        .status()?;
    Ok(status.code().unwrap_or(-1))
}

fn dir_contents(dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)?
        .map(|e| {
            let e = e?;
            Ok((e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path())?))
        })
        .collect::<Result<_>>()?;
    files.sort();
    Ok(files)
}

fn criterion_9() -> Verdict {
    let tmp = tempfile::tempdir()?;
    let runs: [&[&str]; 3] = [
        &["verify-duality", "--preset", "lq_scalar", "--paths", "10000", "--dt", "0.005", "--seed", "7"],
        &["check-mp", "--preset", "heat4", "--paths", "4000", "--dt", "0.01", "--seed", "3"],
        &["spike-experiment", "--preset", "lq_scalar", "--paths", "4000", "--dt", "0.005", "--seed", "5"],
    ];
    let mut ok = true;
    let mut notes = Vec::new();
    for (i, args) in runs.iter().enumerate() {
        let mut outputs = Vec::new();
        for (tag, workers) in [("a", "0"), ("b", "0"), ("w1", "1"), ("w4", "4")] {
            let dir = tmp.path().join(format!("{i}-{tag}"));
            let mut a: Vec<&str> = args.to_vec();
            a.extend(["--workers", workers]);
            let code = run_cli(&dir, &a)?;
            outputs.push((code, dir_contents(&dir)?));
        }
        let same = outputs.windows(2).all(|w| w[0] == w[1]);
        ok &= same && !outputs[0].1.is_empty();
        notes.push(format!(
            "{}: {} files, exit {}, {}",
            args[0],
            outputs[0].1.len(),
            outputs[0].0,
            if same { "identical across reruns and --workers 1/4" } else { "DIFFERENT" }
        ));
    }
    Ok((ok, notes.join("; ")))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("first-order duality identity", criterion_1),
        ("second-order duality identity", criterion_2),
        ("adjoint oracle equivalence", criterion_3),
        ("gradient consistency", criterion_4),
        ("optimizer vs oracle", criterion_5),
        ("spike expansion and spike condition", criterion_6),
        ("Lipschitz-in-K probe", criterion_7),
        ("oracle cross-validation", criterion_8),
        ("determinism", criterion_9),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.iter().any(|a| a == &n.to_string()) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match f() {
            Ok(v) => v,
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!(
            "criterion {n} [{}] {name}: {detail} ({:.1}s)",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
