//! Command-line driver: loads a preset, runs one experiment, writes CSV
//! artifacts and a manifest into the output directory.
//!
//! Exit status is 0 when every pass rule of the command holds, 1 when one
//! fails (or the numerics fail), 2 for configuration errors such as an
//! unknown preset.

pub mod experiments;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::adjoint::RegressionBasis;
use crate::error::{Error, Result};
use crate::maximum_principle::StepRule;
use crate::report::{fmt_f64, CsvTable};
use crate::scenarios::Preset;
use crate::second_order::SYMMETRY_TOLERANCE;
use experiments::{ControlChoice, Setup, Summary};

#[derive(Debug, Parser)]
#[command(name = "smpkit", version, about = "Stochastic maximum principle experiments on spectral Galerkin models")]
pub struct Cli {
    #[command(flatten)]
    pub config: RunConfig,
    #[command(subcommand)]
    pub command: Command,
}

/// Settings shared by every command.
#[derive(Debug, Clone, Args)]
pub struct RunConfig {
    /// Preset name (looked up in the preset directories) or path to a `.preset` file.
    #[arg(long, global = true, default_value = "lq_scalar")]
    pub preset: String,
    /// Time step; the horizon must be an integer multiple.
    #[arg(long, global = true, default_value_t = 0.005)]
    pub dt: f64,
    #[arg(long, global = true, default_value_t = 10_000)]
    pub paths: usize,
    #[arg(long, global = true, default_value_t = 7)]
    pub seed: u64,
    /// Worker threads (0 = all cores). Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    pub workers: usize,
    #[arg(long, global = true, default_value = "smpkit-out")]
    pub out: PathBuf,
    /// Multiplier of the standard error in every pass rule.
    #[arg(long, global = true, default_value_t = 3.0)]
    pub k_sigma: f64,
    /// Polynomial degree of the regression basis.
    #[arg(long, global = true, default_value_t = 2)]
    pub degree: usize,
    /// Number of leading modes used as regression features.
    #[arg(long, global = true, default_value_t = 4)]
    pub max_modes: usize,
    #[arg(long, global = true, default_value_t = 1e-8)]
    pub ridge: f64,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Simulate the controlled equation; writes forward.csv.
    SimulateForward {
        #[arg(long, value_enum, default_value = "riccati")]
        control: ControlChoice,
    },
    /// Solve the first-order adjoint; writes adjoint.csv.
    SolveAdjoint {
        #[arg(long, value_enum, default_value = "riccati")]
        control: ControlChoice,
    },
    /// Solve the second-order adjoint; writes second_adjoint.csv and,
    /// with deltas, lipschitz.csv.
    SolveSecondAdjoint {
        #[arg(long, value_enum, default_value = "riccati")]
        control: ControlChoice,
        /// Perturbation sizes for the Lipschitz probe in K.
        #[arg(long, value_delimiter = ',')]
        lipschitz_deltas: Vec<f64>,
    },
    /// Check the duality identities on random test data; writes duality.csv.
    VerifyDuality {
        #[arg(long, value_enum, default_value = "riccati")]
        control: ControlChoice,
        #[arg(long, default_value_t = 20)]
        tests: usize,
        #[arg(long, default_value_t = 5)]
        second_tests: usize,
        /// Seed of the test data (defaults to --seed).
        #[arg(long)]
        test_seed: Option<u64>,
    },
    /// Check the necessary condition on a (t, u) grid; writes mp_report.csv.
    CheckMp {
        #[arg(long, value_enum, default_value = "riccati")]
        control: ControlChoice,
        #[arg(long, default_value_t = 21)]
        u_points: usize,
        #[arg(long, default_value_t = 8)]
        t_points: usize,
    },
    /// Projected-gradient optimization; writes optimizer_history.csv.
    Optimize {
        #[arg(long, value_enum, default_value = "zero")]
        init: ControlChoice,
        #[arg(long, default_value_t = 0.5)]
        step: f64,
        #[arg(long, default_value_t = 200)]
        iters: usize,
        /// Allowed relative gap to the Riccati value.
        #[arg(long, default_value_t = 0.02)]
        tolerance: f64,
    },
    /// Spike variation ladder; writes spike_table.csv.
    SpikeExperiment {
        #[arg(long, value_enum, default_value = "riccati")]
        control: ControlChoice,
        /// Spike start (defaults to a third of the horizon).
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0.2,0.1,0.05,0.025")]
        eps: Vec<f64>,
        /// Spike control value (defaults to zero).
        #[arg(long, value_delimiter = ',')]
        u_alt: Vec<f64>,
        /// Allowed number of increases of |remainder|/eps down the ladder.
        #[arg(long, default_value_t = 1)]
        max_inversions: usize,
    },
    /// Riccati value against a lattice dynamic program; writes oracles.csv.
    CrossValidateOracles {
        #[arg(long, default_value_t = 401)]
        lattice: usize,
        #[arg(long, default_value_t = 41)]
        u_points: usize,
        #[arg(long, default_value_t = 0.02)]
        tolerance: f64,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SimulateForward { .. } => "simulate-forward",
            Command::SolveAdjoint { .. } => "solve-adjoint",
            Command::SolveSecondAdjoint { .. } => "solve-second-adjoint",
            Command::VerifyDuality { .. } => "verify-duality",
            Command::CheckMp { .. } => "check-mp",
            Command::Optimize { .. } => "optimize",
            Command::SpikeExperiment { .. } => "spike-experiment",
            Command::CrossValidateOracles { .. } => "cross-validate-oracles",
        }
    }

    /// Resolved command parameters, in manifest order.
    fn parameters(&self, horizon: f64, control_dim: usize, seed: u64) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| out.push((k.to_string(), v));
        let list = |v: &[f64]| v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(", ");
        match self {
            Command::SimulateForward { control } | Command::SolveAdjoint { control } => {
                put("control", control.name().into())
            }
            Command::SolveSecondAdjoint {
                control,
                lipschitz_deltas,
            } => {
                put("control", control.name().into());
                put("lipschitz_deltas", list(lipschitz_deltas));
            }
            Command::VerifyDuality {
                control,
                tests,
                second_tests,
                test_seed,
            } => {
                put("control", control.name().into());
                put("tests", tests.to_string());
                put("second_tests", second_tests.to_string());
                put("test_seed", test_seed.unwrap_or(seed).to_string());
            }
            Command::CheckMp {
                control,
                u_points,
                t_points,
            } => {
                put("control", control.name().into());
                put("u_points", u_points.to_string());
                put("t_points", t_points.to_string());
            }
            Command::Optimize {
                init,
                step,
                iters,
                tolerance,
            } => {
                let d = StepRule::default();
                put("init", init.name().into());
                put("step", fmt_f64(*step));
                put("iters", iters.to_string());
                put("step_tol", fmt_f64(d.step_tol));
                put("rel_tol", fmt_f64(d.rel_tol));
                put("stat_tol", fmt_f64(d.stat_tol));
                put("tolerance", fmt_f64(*tolerance));
            }
            Command::SpikeExperiment {
                control,
                tau,
                eps,
                u_alt,
                max_inversions,
            } => {
                put("control", control.name().into());
                put("tau", fmt_f64(tau.unwrap_or(horizon / 3.0)));
                put("eps", list(eps));
                put("u_alt", list(&resolve_u_alt(u_alt, control_dim)));
                put("max_inversions", max_inversions.to_string());
            }
            Command::CrossValidateOracles {
                lattice,
                u_points,
                tolerance,
            } => {
                put("lattice", lattice.to_string());
                put("u_points", u_points.to_string());
                put("tolerance", fmt_f64(*tolerance));
            }
        }
        out
    }
}

fn resolve_u_alt(u_alt: &[f64], control_dim: usize) -> Vec<f64> {
    if u_alt.is_empty() {
        vec![0.0; control_dim]
    } else {
        u_alt.to_vec()
    }
}

/// What a command produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub pass: bool,
    /// The artifact holding the pass-rule evidence.
    pub report: PathBuf,
    pub artifacts: Vec<PathBuf>,
}

struct Out {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Out {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn csv(&mut self, name: &str, table: &impl CsvTable) -> Result<PathBuf> {
        let path = self.dir.join(name);
        table.write_csv(fs::File::create(&path)?)?;
        self.written.push(path.clone());
        Ok(path)
    }

    fn done(self, pass: bool, report: PathBuf) -> Outcome {
        Outcome {
            pass,
            report,
            artifacts: self.written,
        }
    }
}

fn write_manifest(dir: &Path, cmd: &Command, cfg: &RunConfig, setup: &Setup) -> Result<PathBuf> {
    let mut s = String::new();
    let mut line = |k: &str, v: &str| {
        s.push_str(k);
        s.push_str(" = ");
        s.push_str(v);
        s.push('\n');
    };
    line("smpkit_version", env!("CARGO_PKG_VERSION"));
    line("command", cmd.name());
    line("preset", &cfg.preset);
    line("dt", &fmt_f64(setup.grid().dt()));
    line("n_steps", &setup.grid().n_steps().to_string());
    line("paths", &cfg.paths.to_string());
    line("seed", &cfg.seed.to_string());
    line("ensemble_fingerprint", &format!("{:016x}", setup.ens.fingerprint()));
    line("k_sigma", &fmt_f64(cfg.k_sigma));
    line("degree", &cfg.degree.to_string());
    line("max_modes", &cfg.max_modes.to_string());
    line("ridge", &fmt_f64(cfg.ridge));
    for (k, v) in cmd.parameters(setup.scenario.horizon, setup.scenario.control_dim, cfg.seed) {
        line(&k, &v);
    }
    for (k, v) in setup.preset.entries() {
        line(&format!("preset.{k}"), v);
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, s)?;
    Ok(path)
}

/// Runs one command with the given configuration.
pub fn run(cmd: &Command, cfg: &RunConfig) -> Result<Outcome> {
    let preset = Preset::load(&cfg.preset)?;
    let basis = RegressionBasis::new(cfg.degree, cfg.max_modes, cfg.ridge)?;
    let setup = Setup::new(preset, cfg.dt, cfg.paths, cfg.seed, basis)?;
    let mut out = Out::new(&cfg.out)?;
    let manifest = write_manifest(&cfg.out, cmd, cfg, &setup)?;
    out.written.push(manifest);
    let mut summary = Summary::default();
    summary.text("command", cmd.name());
    let k = cfg.k_sigma;

    let (pass, report) = match cmd {
        Command::SimulateForward { control } => {
            let run = experiments::forward(&setup, *control)?;
            let path = out.csv("forward.csv", &experiments::forward_table(&run.traj))?;
            summary.num("cost", run.cost.estimate);
            summary.num("cost_stderr", run.cost.stderr);
            (true, path)
        }
        Command::SolveAdjoint { control } => {
            let (_, pair) = experiments::first_adjoint(&setup, *control)?;
            (true, out.csv("adjoint.csv", &experiments::adjoint_table(&pair))?)
        }
        Command::SolveSecondAdjoint {
            control,
            lipschitz_deltas,
        } => {
            let run = experiments::second_adjoint(&setup, *control)?;
            let path = out.csv("second_adjoint.csv", &experiments::second_table(&run))?;
            summary.num("symmetry_drift", run.sa.symmetry_drift);
            if let Some(gap) = experiments::lyapunov_gap(&run) {
                summary.num("max_lyapunov_gap", gap);
            }
            let mut pass = run.sa.symmetry_drift <= SYMMETRY_TOLERANCE;
            if !lipschitz_deltas.is_empty() {
                let rows = experiments::lipschitz(&setup, *control, lipschitz_deltas)?;
                out.csv("lipschitz.csv", &rows)?;
                if rows.iter().filter(|r| r.delta > 0.0).count() >= 2 {
                    let spread = experiments::lipschitz_spread(&rows);
                    summary.num("lipschitz_ratio_spread", spread);
                    pass &= spread <= 2.0;
                }
            }
            (pass, path)
        }
        Command::VerifyDuality {
            control,
            tests,
            second_tests,
            test_seed,
        } => {
            let ts = test_seed.unwrap_or(cfg.seed);
            let mut rep = experiments::DualityReport::default();
            if setup.preset.kind() != crate::scenarios::PresetKind::SecondOrderScalar {
                rep.rows.extend(experiments::first_duality(&setup, *control, *tests, ts, k)?.rows);
            }
            rep.rows
                .extend(experiments::second_duality(&setup, *control, *second_tests, ts, k)?.rows);
            let path = out.csv("duality.csv", &rep)?;
            summary.text("failures", rep.rows.iter().filter(|(_, r)| !r.pass).count());
            (rep.pass(), path)
        }
        Command::CheckMp {
            control,
            u_points,
            t_points,
        } => {
            let rep = experiments::check_mp(&setup, *control, *u_points, *t_points, k)?;
            let path = out.csv("mp_report.csv", &rep)?;
            let w = rep.worst_entry();
            summary.num("max_violation", rep.max_violation);
            summary.text("worst_condition", w.condition.name());
            summary.num("worst_t", w.t);
            summary.text("failures", rep.failing().count());
            (rep.pass, path)
        }
        Command::Optimize {
            init,
            step,
            iters,
            tolerance,
        } => {
            let rule = StepRule {
                step: *step,
                max_iters: *iters,
                ..StepRule::default()
            };
            let run = experiments::optimize(&setup, *init, &rule)?;
            let path = out.csv("optimizer_history.csv", &run.result)?;
            summary.num("final_cost", run.result.final_cost());
            summary.num("oracle_value", run.oracle_value);
            summary.num("relative_gap", run.relative_gap);
            summary.text("iterations", run.result.effective_steps());
            summary.text("converged", run.result.converged);
            (run.relative_gap.abs() <= *tolerance, path)
        }
        Command::SpikeExperiment {
            control,
            tau,
            eps,
            u_alt,
            max_inversions,
        } => {
            let tau = tau.unwrap_or(setup.grid().t0() + setup.scenario.horizon / 3.0);
            let alt = resolve_u_alt(u_alt, setup.scenario.control_dim);
            let table = experiments::spike(&setup, *control, &alt, tau, eps)?;
            let path = out.csv("spike_table.csv", &table)?;
            summary.text("inversions", table.inversions());
            (table.inversions() <= *max_inversions, path)
        }
        Command::CrossValidateOracles {
            lattice,
            u_points,
            tolerance,
        } => {
            let cmp = experiments::cross_validate(&setup, *lattice, *u_points)?;
            let path = out.csv("oracles.csv", &cmp.table)?;
            summary.num("riccati_value", cmp.riccati_value);
            summary.num("dp_value", cmp.dp_value);
            summary.num("relative_gap", cmp.relative_gap);
            (cmp.relative_gap.abs() <= *tolerance, path)
        }
    };
    summary.text("pass", pass);
    out.csv("summary.csv", &summary)?;
    Ok(out.done(pass, report))
}

/// Parses arguments, runs, and maps the outcome to an exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if cli.config.workers > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.config.workers)
            .build_global()
        {
            eprintln!("warning: could not size the worker pool: {e}");
        }
    }
    let start = Instant::now();
    let result = run(&cli.command, &cli.config);
    eprintln!("{}: wall time {:.3} s", cli.command.name(), start.elapsed().as_secs_f64());
    match result {
        Ok(o) if o.pass => {
            eprintln!("pass; artifacts in {}", cli.config.out.display());
            0
        }
        Ok(o) => {
            eprintln!("pass rule failed; see {}", o.report.display());
            1
        }
        Err(e @ (Error::Preset(_) | Error::Io(_))) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
