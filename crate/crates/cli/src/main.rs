mod config;
mod scripts;

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use binmhe::estimator::{MovingHorizonEstimator, StepOutput, Variant};
use binmhe::experiments::{
    armse_sweep, certify, monte_carlo, sweep_observability, timing_table, ExperimentSpec, ScenarioSetup, StabilityCertificate,
    SweepVariable,
};
use binmhe::io;
use binmhe::Level;
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::Serialize;

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "binmhe", version, about = "Moving-horizon estimation from binary threshold sensors")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `experiment.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir`.
    #[arg(long, global = true, env = "BINMHE_OUT_DIR")]
    out: Option<PathBuf>,
    /// Restricts the run to one estimator variant.
    #[arg(long, global = true, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Worker threads for Monte Carlo trials; all cores when omitted.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the plant and write the trajectory and binary readings.
    Simulate,
    /// Run the estimators on a measurement log.
    Estimate {
        #[arg(long)]
        measurements: PathBuf,
        /// Trajectory CSV supplying the inputs `u`.
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Stability constants, observability sweeps, RMSE and timing.
    Analyze {
        #[arg(value_enum)]
        what: Analysis,
    },
    /// Write every figure and table analog with plot scripts.
    ReproducePaper {
        /// Monte Carlo trials per figure.
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Analysis {
    Stability,
    Observability,
    Rmse,
    Armse,
    Timing,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: binmhe::Error| e.to_string())
}

/// Failure classes mapped to exit codes 1 and 2.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

type Outcome = std::result::Result<(), Failure>;

trait UsageContext<T> {
    fn usage(self) -> std::result::Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> UsageContext<T> for std::result::Result<T, E> {
    fn usage(self) -> std::result::Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into()))
    }
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

struct Run {
    config: RunConfig,
    setup: ScenarioSetup,
    variants: Vec<Variant>,
    seed: u64,
    out: PathBuf,
    workers: Option<usize>,
}

impl Run {
    fn file(&self, name: &str) -> std::result::Result<BufWriter<File>, Failure> {
        let path = self.out.join(name);
        let f = File::create(&path).with_context(|| format!("creating {}", path.display())).map_err(runtime)?;
        Ok(BufWriter::new(f))
    }

    fn spec(&self, trials: usize, duration_s: f64, variants: Vec<Variant>) -> ExperimentSpec {
        let mut spec = ExperimentSpec::new(trials, duration_s, variants, self.seed);
        spec.alignment = self.config.experiment.alignment;
        spec.normalized = self.config.experiment.normalized;
        spec.record_wall_time = self.config.experiment.record_wall_time;
        spec
    }
}

fn dispatch(cli: Cli) -> Outcome {
    let config = match &cli.common.config {
        Some(path) => RunConfig::load(path).usage()?,
        None => RunConfig::default(),
    };
    let setup = config.setup().usage()?;
    let variants = match cli.common.variant {
        Some(v) => vec![v],
        None => config.variants(),
    };
    let out = cli
        .common
        .out
        .clone()
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    if cli.common.workers == Some(0) {
        return Err(Failure::Usage(anyhow!("--workers must be at least 1")));
    }
    let ctx = Run {
        seed: cli.common.seed.unwrap_or(config.experiment.seed),
        workers: cli.common.workers,
        config,
        setup,
        variants,
        out,
    };
    // inputs are checked before anything is written
    match &cli.command {
        Command::Estimate { measurements, trajectory } => {
            for p in std::iter::once(measurements).chain(trajectory) {
                if !p.is_file() {
                    return Err(Failure::Usage(anyhow!("input file {} does not exist", p.display())));
                }
            }
        }
        Command::ReproducePaper { trials: 0 } => return Err(Failure::Usage(anyhow!("--trials must be at least 1"))),
        _ => {}
    }
    fs::create_dir_all(&ctx.out)
        .with_context(|| format!("creating output directory {}", ctx.out.display()))
        .map_err(runtime)?;
    match cli.command {
        Command::Simulate => simulate(&ctx),
        Command::Estimate { measurements, trajectory } => estimate(&ctx, &measurements, trajectory.as_deref()),
        Command::Analyze { what } => analyze(&ctx, what),
        Command::ReproducePaper { trials } => reproduce(&ctx, trials),
    }
}

fn simulate(ctx: &Run) -> Outcome {
    let steps = ctx.setup.steps(ctx.setup.duration_s).usage()?;
    let traj = ctx.setup.simulate(ctx.seed, steps).map_err(runtime)?;
    let readings: Vec<Vec<Level>> = traj.outputs.iter().map(|z| ctx.setup.sensors.measure(z)).collect();
    io::write_trajectory(ctx.file("trajectory.csv")?, &traj).map_err(runtime)?;
    io::write_measurements(ctx.file("measurements.csv")?, &readings).map_err(runtime)?;
    println!(
        "simulated {} steps of {} states and {} sensors into {}",
        steps,
        ctx.setup.n(),
        ctx.setup.sensors.len(),
        ctx.out.display()
    );
    Ok(())
}

fn estimate(ctx: &Run, measurements: &Path, trajectory: Option<&Path>) -> Outcome {
    let file = File::open(measurements).with_context(|| format!("opening {}", measurements.display())).usage()?;
    let readings = io::read_measurements(file)
        .with_context(|| format!("reading {}", measurements.display()))
        .usage()?;
    let p = ctx.setup.sensors.len();
    if readings[0].len() != p {
        return Err(Failure::Usage(anyhow!("measurement log has {} sensors, the model has {p}", readings[0].len())));
    }
    let m = ctx.setup.model.m();
    let inputs: Vec<DVector<f64>> = match trajectory {
        Some(path) => {
            let f = File::open(path).with_context(|| format!("opening {}", path.display())).usage()?;
            let traj = io::read_trajectory(f).with_context(|| format!("reading {}", path.display())).usage()?;
            if traj.inputs.first().is_some_and(|u| u.len() != m) {
                return Err(Failure::Usage(anyhow!("trajectory inputs have the wrong dimension (model has m = {m})")));
            }
            if traj.inputs.len() + 1 < readings.len() {
                return Err(Failure::Usage(anyhow!(
                    "trajectory has {} inputs, the log needs {}",
                    traj.inputs.len(),
                    readings.len() - 1
                )));
            }
            traj.inputs
        }
        None if m == 0 => Vec::new(),
        None => return Err(Failure::Usage(anyhow!("the model has inputs; pass --trajectory to supply them"))),
    };
    let zero = DVector::zeros(m);
    let mut rows: Vec<(Variant, StepOutput)> = Vec::new();
    for &variant in &ctx.variants {
        let s = &ctx.setup;
        let mut est =
            MovingHorizonEstimator::new(s.model.clone(), s.sensors.clone(), s.config.clone(), variant, s.prior(ctx.seed)).map_err(runtime)?;
        if !ctx.config.experiment.record_wall_time {
            est = est.without_wall_time();
        }
        for (t, y) in readings.iter().enumerate() {
            let u = inputs.get(t).unwrap_or(&zero);
            if let Some(o) = est.step(u, y.clone()).with_context(|| format!("{variant} at t = {t}")).map_err(runtime)? {
                rows.push((variant, o));
            }
        }
    }
    io::write_estimates(ctx.file("estimates.csv")?, ctx.setup.n(), &rows).map_err(runtime)?;
    io::write_diagnostics(ctx.file("diagnostics.csv")?, &rows).map_err(runtime)?;
    println!("{} window estimates written to {}", rows.len(), ctx.out.display());
    Ok(())
}

#[derive(Serialize)]
struct StabilityReport {
    scenario: String,
    seed: u64,
    duration_s: f64,
    /// Minimum over the run's windows; empirical over the simulated horizon.
    delta_empirical: f64,
    certified_at_configured_epsilon: bool,
    certificate: StabilityCertificate,
}

impl StabilityReport {
    fn new(scenario: &str, s: &ScenarioSetup, seed: u64) -> binmhe::Result<Self> {
        let certificate = certify(s, seed, s.duration_s, s.config.state_box.is_some())?;
        Ok(Self {
            scenario: scenario.to_string(),
            seed,
            duration_s: s.duration_s,
            delta_empirical: certificate.observability.delta,
            certified_at_configured_epsilon: certificate.constants.a1 < 1.0,
            certificate,
        })
    }
}

fn stability(ctx: &Run, name: &str) -> Outcome {
    let report = StabilityReport::new(ctx.config.scenario.name.as_str(), &ctx.setup, ctx.seed).map_err(runtime)?;
    io::write_json(ctx.file(name)?, &report).map_err(runtime)?;
    let cert = &report.certificate;
    println!(
        "delta = {:.4e}, a1 = {:.4e} at epsilon = {:e}",
        cert.observability.delta, cert.constants.a1, cert.configured_epsilon
    );
    match &cert.bracket {
        Some(b) => println!("largest certified epsilon = {:.4e} (a1 = {:.4}, a1(2 eps) = {:.4})", b.epsilon, b.a1_at_epsilon, b.a1_at_double),
        None => println!("no epsilon certifies a1 < 1"),
    }
    Ok(())
}

fn sweep_values(ctx: &Run, default_var: SweepVariable, default: &[f64]) -> (SweepVariable, Vec<f64>) {
    let e = &ctx.config.experiment;
    let var = e.sweep_variable.unwrap_or(default_var);
    let values = e.sweep_values.clone().unwrap_or_else(|| match var {
        v if v == default_var => default.to_vec(),
        SweepVariable::Horizon => config::HORIZON_GRID.to_vec(),
        SweepVariable::Threshold => config::threshold_grid(),
        SweepVariable::NoiseLevel => config::NOISE_GRID.to_vec(),
    });
    (var, values)
}

fn analyze(ctx: &Run, what: Analysis) -> Outcome {
    let e = &ctx.config.experiment;
    let s = &ctx.setup;
    match what {
        Analysis::Stability => stability(ctx, "stability.json"),
        Analysis::Observability => {
            let (var, values) = sweep_values(ctx, SweepVariable::Horizon, &config::HORIZON_GRID);
            let rows =
                sweep_observability(s, var, &values, e.trials, s.duration_s, ctx.seed, ctx.workers).map_err(runtime)?;
            let name = format!("observability_{}.csv", var.as_str());
            io::write_sweep(ctx.file(&name)?, &rows).map_err(runtime)?;
            println!("{} sweep points written to {name}", rows.len());
            Ok(())
        }
        Analysis::Rmse => {
            let spec = ctx.spec(e.trials, s.duration_s, ctx.variants.clone());
            let mc = monte_carlo(s, &spec, ctx.workers).map_err(runtime)?;
            io::write_rmse(ctx.file("rmse.csv")?, &mc.summaries).map_err(runtime)?;
            report_failures(&mc.failures);
            for sum in &mc.summaries {
                println!("{}: final RMSE {:.4}", sum.variant, sum.rmse.rmse.last().copied().unwrap_or(f64::NAN));
            }
            Ok(())
        }
        Analysis::Armse => {
            let (var, values) = sweep_values(ctx, SweepVariable::NoiseLevel, &config::NOISE_GRID);
            let spec = ctx.spec(e.trials, s.duration_s, ctx.variants.clone());
            let (lo, hi) = (e.armse_window[0], e.armse_window[1]);
            if hi > s.duration_s {
                return Err(Failure::Usage(anyhow!("ARMSE window ends at {hi} s but the run lasts {} s", s.duration_s)));
            }
            let rows = armse_sweep(s, var, &values, &spec, (lo, hi), ctx.workers).map_err(runtime)?;
            io::write_armse(ctx.file("armse.csv")?, &rows).map_err(runtime)?;
            println!("{} ARMSE rows written", rows.len());
            Ok(())
        }
        Analysis::Timing => {
            // timing runs on the calling thread only
            let rows = timing_table(s, &e.timing_horizons, &ctx.variants, e.timing_steps, e.timing_runs, ctx.seed).map_err(runtime)?;
            io::write_timing(ctx.file("timing.csv")?, &rows).map_err(runtime)?;
            for r in &rows {
                println!("N = {:>3} {:>8}: {:.3e} s/step", r.horizon, r.variant.as_str(), r.median_step_s);
            }
            Ok(())
        }
    }
}

fn report_failures(failures: &[(usize, String)]) {
    for (l, msg) in failures {
        eprintln!("trial {l} excluded: {msg}");
    }
}

fn reproduce(ctx: &Run, trials: usize) -> Outcome {
    let ex1 = binmhe::experiments::example1_setup().map_err(runtime)?;
    let ex2 = binmhe::experiments::example2_setup().map_err(runtime)?;
    let both = vec![Variant::Lsmhe, Variant::Pwmhe];
    let seed = ctx.seed;
    let w = ctx.workers;
    let step = |name: &str| println!("{name} ...");

    step("fig2a");
    let rows = sweep_observability(&ex1, SweepVariable::Horizon, &config::HORIZON_GRID, trials, 50.0, seed, w).map_err(runtime)?;
    io::write_sweep(ctx.file("fig2a.csv")?, &rows).map_err(runtime)?;

    step("fig2b");
    let rows = sweep_observability(&ex1, SweepVariable::Threshold, &config::threshold_grid(), trials, 50.0, seed, w).map_err(runtime)?;
    io::write_sweep(ctx.file("fig2b.csv")?, &rows).map_err(runtime)?;

    step("fig5");
    let mc = monte_carlo(&ex1, &ctx.spec(trials, 40.0, both.clone()), w).map_err(runtime)?;
    report_failures(&mc.failures);
    io::write_rmse(ctx.file("fig5.csv")?, &mc.summaries).map_err(runtime)?;

    step("fig6a");
    let spec = ctx.spec(trials, 40.0, vec![Variant::Lsmhe]);
    let rows = armse_sweep(&ex1, SweepVariable::Threshold, &config::ARMSE_THRESHOLDS, &spec, (25.0, 40.0), w).map_err(runtime)?;
    io::write_armse(ctx.file("fig6a.csv")?, &rows).map_err(runtime)?;

    step("fig6b");
    let rows = armse_sweep(&ex1, SweepVariable::NoiseLevel, &config::NOISE_GRID, &spec, (25.0, 40.0), w).map_err(runtime)?;
    io::write_armse(ctx.file("fig6b.csv")?, &rows).map_err(runtime)?;

    step("fig8");
    let mc = monte_carlo(&ex2, &ctx.spec(trials.min(10).max(1), 35.0, both.clone()), w).map_err(runtime)?;
    report_failures(&mc.failures);
    io::write_rmse(ctx.file("fig8.csv")?, &mc.summaries).map_err(runtime)?;

    step("table1");
    let rows = timing_table(&ex1, &config::TIMING_HORIZONS, &both, 200, 9, seed).map_err(runtime)?;
    io::write_timing(ctx.file("table1.csv")?, &rows).map_err(runtime)?;

    step("stability");
    let certs = [("example1", &ex1), ("example2", &ex2)]
        .into_iter()
        .map(|(name, s)| StabilityReport::new(name, s, seed))
        .collect::<binmhe::Result<Vec<_>>>()
        .map_err(runtime)?;
    io::write_json(ctx.file("stability.json")?, &certs).map_err(runtime)?;

    for (name, body) in scripts::all() {
        fs::write(ctx.out.join(format!("{name}.py")), body)
            .with_context(|| format!("writing {name}.py"))
            .map_err(runtime)?;
    }
    println!("artifacts written to {}", ctx.out.display());
    Ok(())
}
