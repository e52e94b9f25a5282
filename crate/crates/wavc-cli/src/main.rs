//! Command-line front end: simulate scenarios, estimate sensitivities
//! from trajectory files, run closed-loop control, orchestrate
//! experiments, rank PMU placements, and export plot-ready columns.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use wavc::control::ControllerMode;
use wavc::estim::{estimate_sensitivities, EstimationOptions, SensitivityEstimate};
use wavc::harness::{
    ambient_window, blocks_for_mode, emit_plot_data, prepare, rank_pmu_locations,
    read_trajectory, run_closed_loop, run_experiment, write_trajectory, ExperimentSpec,
    ModeBlocks, RunReport,
};
use wavc::net::{BusId, GridCase};
use wavc::sim::Scenario;

#[derive(Parser)]
#[command(name = "wavc", version, about = "Grid ambient simulation, sensitivity identification, and wide-area voltage control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate a scenario open loop and write the trajectory CSV.
    Simulate {
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Identify sensitivities from a trajectory CSV and write a JSON report.
    Estimate {
        #[arg(long)]
        trajectory: PathBuf,
        /// Restrict the time-constant regression to the first window of
        /// this many seconds.
        #[arg(long)]
        regression_window_s: Option<f64>,
        /// Optional analytic Jacobian file for a per-entry comparison.
        #[arg(long)]
        analytic_jacobian: Option<PathBuf>,
        #[arg(long, default_value = "estimate.json")]
        out: PathBuf,
    },
    /// Run one closed-loop scenario with the controller configured in it.
    Control {
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run a mode x seed experiment grid from a spec file.
    Experiment {
        #[arg(long)]
        spec: PathBuf,
        /// Overrides the spec's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank dynamic load buses by branch-flow sensitivity to a load step.
    RankPmu {
        #[arg(long)]
        case: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        step: f64,
    },
    /// Export aligned per-mode voltage columns for one bus.
    PlotData {
        /// Path to a report.json produced by `experiment`.
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        bus: u32,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "plot.csv")]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate {
            case,
            scenario,
            seed,
            out,
        } => simulate(case, scenario, seed, out),
        Command::Estimate {
            trajectory,
            regression_window_s,
            analytic_jacobian,
            out,
        } => estimate(trajectory, regression_window_s, analytic_jacobian, out),
        Command::Control {
            case,
            scenario,
            seed,
            out,
        } => control(case, scenario, seed, out),
        Command::Experiment { spec, out } => experiment(spec, out),
        Command::RankPmu { case, step } => rank(case, step),
        Command::PlotData {
            report,
            bus,
            seed,
            out,
        } => plot(report, bus, seed, out),
    }
}

fn load_inputs(case: &PathBuf, scenario: &PathBuf, seed: Option<u64>) -> Result<(GridCase, Scenario)> {
    let case = GridCase::load(case).with_context(|| format!("loading case {}", case.display()))?;
    let mut scenario =
        Scenario::load(scenario).with_context(|| format!("loading scenario {}", scenario.display()))?;
    if let Some(seed) = seed {
        scenario.seed = seed;
    }
    Ok((case, scenario))
}

fn simulate(case: PathBuf, scenario: PathBuf, seed: Option<u64>, out: PathBuf) -> Result<()> {
    let (case, scenario) = load_inputs(&case, &scenario, seed)?;
    let prep = prepare(&case, &scenario)?;
    let run = run_closed_loop(&prep, &scenario, ModeBlocks::NoController, scenario.seed, None)?;
    std::fs::create_dir_all(&out)?;
    let path = out.join(format!("trajectory_{}.csv", scenario.seed));
    write_trajectory(&path, &run.window)?;
    println!(
        "simulated {:.1} s, {} load buses; steady-state deviation index {:.6}",
        scenario.duration_s,
        run.window.n_buses(),
        run.lambda
    );
    println!("trajectory written to {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct EstimateFile {
    bus_ids: Vec<u32>,
    sample_rate_hz: f64,
    a_hat: Vec<Vec<f64>>,
    j_hat: Vec<Vec<f64>>,
    s_hat: Vec<Vec<f64>>,
    t_theta: Vec<f64>,
    t_v: Vec<f64>,
    log_residual: f64,
    covariance_condition: f64,
    stable: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    comparison: Option<Comparison>,
}

#[derive(Serialize)]
struct Comparison {
    jacobian_rel_frobenius_err: f64,
    max_abs_entry_err: f64,
    /// Entry-wise estimate minus reference.
    entry_errors: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct AnalyticJacobianFile {
    j: Vec<Vec<f64>>,
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn estimate(
    trajectory: PathBuf,
    regression_window_s: Option<f64>,
    analytic: Option<PathBuf>,
    out: PathBuf,
) -> Result<()> {
    let window = read_trajectory(&trajectory)
        .with_context(|| format!("reading {}", trajectory.display()))?;
    let options = EstimationOptions {
        regression_samples: regression_window_s.map(|w| (w * window.sample_rate).round() as usize),
    };
    let est: SensitivityEstimate = estimate_sensitivities(&window, &options)?;
    let comparison = match analytic {
        Some(path) => {
            let file: AnalyticJacobianFile =
                serde_json::from_str(&std::fs::read_to_string(&path)?)
                    .with_context(|| format!("parsing {}", path.display()))?;
            let n = file.j.len();
            if n != est.j_hat.nrows() {
                bail!(
                    "analytic Jacobian is {n}x{n}, estimate is {}x{}",
                    est.j_hat.nrows(),
                    est.j_hat.ncols()
                );
            }
            let j_ref = DMatrix::from_fn(n, n, |i, k| file.j[i][k]);
            let diff = &est.j_hat - &j_ref;
            Some(Comparison {
                jacobian_rel_frobenius_err: diff.norm() / j_ref.norm(),
                max_abs_entry_err: diff.amax(),
                entry_errors: matrix_rows(&diff),
            })
        }
        None => None,
    };
    if !est.stable {
        eprintln!("warning: estimated dynamics carry a non-decaying mode");
    }
    let file = EstimateFile {
        bus_ids: est.bus_ids.iter().map(|b| b.0).collect(),
        sample_rate_hz: window.sample_rate,
        a_hat: matrix_rows(&est.a_hat),
        j_hat: matrix_rows(&est.j_hat),
        s_hat: matrix_rows(&est.s_hat),
        t_theta: est.t_theta.iter().copied().collect(),
        t_v: est.t_v.iter().copied().collect(),
        log_residual: est.log_residual,
        covariance_condition: est.condition,
        stable: est.stable,
        comparison,
    };
    std::fs::write(&out, serde_json::to_string_pretty(&file)?)?;
    println!(
        "estimated {} states from {} samples; log residual {:.3e}, condition {:.3e}",
        2 * est.bus_ids.len(),
        window.n_samples(),
        est.log_residual,
        est.condition
    );
    println!("report written to {}", out.display());
    Ok(())
}

fn control(case: PathBuf, scenario: PathBuf, seed: Option<u64>, out: PathBuf) -> Result<()> {
    let (case, scenario) = load_inputs(&case, &scenario, seed)?;
    let settings = scenario
        .controller
        .clone()
        .context("scenario lacks a controller section")?;
    let prep = prepare(&case, &scenario)?;
    let seed = scenario.seed;
    let (blocks, est_note) = match settings.mode {
        ControllerMode::None => (ModeBlocks::NoController, String::new()),
        mode => {
            let (truth, measured) = ambient_window(&prep, &scenario, seed)?;
            let est = estimate_sensitivities(
                &measured,
                &EstimationOptions {
                    regression_samples: scenario
                        .regression_window_s
                        .map(|w| (w * scenario.sample_rate_hz).round() as usize),
                },
            )?;
            let note = format!(
                "; estimate log residual {:.2e}, condition {:.2e}",
                est.log_residual, est.condition
            );
            let blocks = blocks_for_mode(mode, &prep, &case, Some(&est), &scenario)?;
            // The ambient truth is needed for low-noise calibration.
            let run = run_closed_loop(&prep, &scenario, blocks, seed, Some(&truth))?;
            std::fs::create_dir_all(&out)?;
            let path = out.join(format!("trajectory_{}_{}.csv",
                match settings.mode {
                    ControllerMode::None => "none",
                    ControllerMode::ModelFree => "model_free",
                    ControllerMode::ModelBased => "model_based",
                    ControllerMode::ModelBasedStale => "model_based_stale",
                }, seed));
            write_trajectory(&path, &run.window)?;
            println!(
                "lambda {:.6}; {} actions, {} skipped ticks{}",
                run.lambda, run.action_count, run.skipped_ticks, note
            );
            println!("trajectory written to {}", path.display());
            return Ok(());
        }
    };
    let run = run_closed_loop(&prep, &scenario, blocks, seed, None)?;
    std::fs::create_dir_all(&out)?;
    let path = out.join(format!("trajectory_none_{seed}.csv"));
    write_trajectory(&path, &run.window)?;
    println!("lambda {:.6} (no controller){est_note}", run.lambda);
    println!("trajectory written to {}", path.display());
    Ok(())
}

fn experiment(spec: PathBuf, out: Option<PathBuf>) -> Result<()> {
    let mut spec = ExperimentSpec::load(&spec)?;
    if let Some(out) = out {
        spec.outputs = out;
    }
    let report = run_experiment(&spec)?;
    println!("{:<20} {:>6} {:>12} {:>8} {:>8}", "mode", "seed", "lambda", "actions", "skipped");
    for cell in &report.cells {
        match &cell.error {
            Some(e) => println!("{:<20} {:>6} failed: {e}", mode_name(cell.mode), cell.seed),
            None => println!(
                "{:<20} {:>6} {:>12.6} {:>8} {:>8}",
                mode_name(cell.mode),
                cell.seed,
                cell.lambda,
                cell.action_count,
                cell.skipped_ticks
            ),
        }
    }
    println!("report written to {}", spec.outputs.join("report.json").display());
    Ok(())
}

fn mode_name(mode: ControllerMode) -> &'static str {
    match mode {
        ControllerMode::None => "none",
        ControllerMode::ModelFree => "model_free",
        ControllerMode::ModelBased => "model_based",
        ControllerMode::ModelBasedStale => "model_based_stale",
    }
}

fn rank(case: PathBuf, step: f64) -> Result<()> {
    let case = GridCase::load(&case)?;
    let ranking = rank_pmu_locations(&case, step)?;
    println!("{:>6} {:>12}", "bus", "score");
    for (bus, score) in ranking {
        println!("{:>6} {:>12.5}", bus.0, score);
    }
    Ok(())
}

fn plot(report: PathBuf, bus: u32, seed: Option<u64>, out: PathBuf) -> Result<()> {
    let dir = report
        .parent()
        .context("report path needs a parent directory")?
        .to_path_buf();
    let report = RunReport::load(&report)?;
    let seed = seed.or_else(|| report.seeds.first().copied()).context("no seeds")?;
    let text = emit_plot_data(&report, &dir, BusId(bus), seed)?;
    std::fs::write(&out, text)?;
    println!("plot data written to {}", out.display());
    Ok(())
}
