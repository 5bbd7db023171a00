use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use mmslam::association::ConfusionMatrix;
use mmslam::evalio::{
    append_results, parse_dataset, read_trajectory_csv, serialize_dataset, trajectory_error,
    write_results, write_trajectory_csv, Alignment, Dataset, ErrorStats, ResultRecord, RunInfo,
};
use mmslam::pipeline::{run, MethodKind, SlamConfig};
use mmslam::simulator::{generate, SimConfig};
use mmslam::SlamError;

#[derive(Parser, Debug)]
#[command(
    name = "mmslam",
    version,
    about = "Semantic SLAM with max-mixture data association"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Simulate(SimulateArgs),
    /// Run one method on a dataset.
    Run(RunArgs),
    /// Simulate and run a grid of odometry scales, misclassification rates and seeds.
    Sweep(SweepArgs),
    /// Compare a trajectory CSV against a dataset's ground truth.
    Eval(EvalArgs),
}

#[derive(clap::Args, Debug)]
struct WorldArgs {
    #[arg(long, default_value_t = 60)]
    landmarks: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 3)]
    laps: usize,
}

impl WorldArgs {
    fn config(&self, seed: u64, odom_scale: f64, misclass_rate: f64) -> SimConfig {
        SimConfig {
            seed,
            num_landmarks: self.landmarks,
            num_classes: self.classes,
            laps: self.laps,
            odom_scale,
            misclass_rate,
            ..SimConfig::default()
        }
    }
}

#[derive(clap::Args, Debug)]
struct SimulateArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    world: WorldArgs,
    #[arg(long, default_value_t = 1.0)]
    odom_scale: f64,
    #[arg(long, default_value_t = 0.0)]
    misclass_rate: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args, Debug)]
struct SolverArgs {
    #[arg(long, default_value_t = 0.9)]
    gate_confidence: f64,
    #[arg(long, default_value_t = 0.1)]
    null_weight: f64,
    #[arg(long, default_value_t = mmslam::mixture::DEFAULT_NULL_SIGMA)]
    null_sigma: f64,
}

impl SolverArgs {
    fn config(&self, confusion: ConfusionMatrix) -> Result<SlamConfig, CliError> {
        let config = SlamConfig {
            gate_confidence: self.gate_confidence,
            null_weight: self.null_weight,
            null_sigma: self.null_sigma,
            ..SlamConfig::new(confusion)
        };
        config
            .validate()
            .map_err(|e| CliError::usage(e.to_string()))?;
        Ok(config)
    }
}

#[derive(clap::Args, Debug)]
struct RunArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_parser = parse_method)]
    method: MethodKind,
    #[command(flatten)]
    solver: SolverArgs,
    /// JSON-lines file receiving the result record (replaced).
    #[arg(long)]
    out: Option<PathBuf>,
    /// CSV file receiving the estimated trajectory.
    #[arg(long)]
    traj_out: Option<PathBuf>,
    /// Seed recorded in the result record.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Odometry scale recorded in the result record.
    #[arg(long, default_value_t = 0.0)]
    odom_scale: f64,
}

#[derive(clap::Args, Debug)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',', value_parser = parse_method,
          default_value = "known,ml,gpda,mm,mm-nh")]
    methods: Vec<MethodKind>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5,6,7,8,9,10")]
    odom_scales: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5")]
    misclass_rates: Vec<f64>,
    /// Seeds 0..N are run for every cell.
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[command(flatten)]
    world: WorldArgs,
    #[command(flatten)]
    solver: SolverArgs,
    /// JSON-lines file; truncated first, then one record appended per run.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AlignArg {
    Origin,
    Umeyama,
}

#[derive(clap::Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    est: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long, value_enum, default_value = "origin")]
    align: AlignArg,
}

fn parse_method(s: &str) -> Result<MethodKind, String> {
    s.parse().map_err(|e: SlamError| e.to_string())
}

#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    const USAGE: u8 = 1;
    const DATA: u8 = 2;
    const NUMERICAL: u8 = 3;

    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: Self::USAGE,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        Self {
            code: Self::DATA,
            message: message.into(),
        }
    }

    fn slam(context: &str, e: SlamError) -> Self {
        let code = if e.is_numerical() {
            Self::NUMERICAL
        } else {
            Self::DATA
        };
        Self {
            code,
            message: format!("{context}: {e}"),
        }
    }
}

fn read_dataset(path: &Path) -> Result<Dataset, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    parse_dataset(&text).map_err(|e| CliError::slam(&path.display().to_string(), e))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn simulate_cmd(args: &SimulateArgs) -> Result<(), CliError> {
    let config = args
        .world
        .config(args.seed, args.odom_scale, args.misclass_rate);
    config
        .validate()
        .map_err(|e| CliError::usage(e.to_string()))?;
    let (_, dataset) = generate(&config).map_err(|e| CliError::slam("simulate", e))?;
    write_file(&args.out, &serialize_dataset(&dataset))?;
    println!(
        "wrote {} keyframes, {} detections, {} landmarks to {}",
        dataset.num_keyframes(),
        dataset.detections.len(),
        dataset.landmarks.len(),
        args.out.display()
    );
    Ok(())
}

/// Off-diagonal mass of the first row, the rate a symmetric confusion
/// matrix was built from.
fn misclass_rate(confusion: &ConfusionMatrix) -> f64 {
    1.0 - confusion.prob(0, 0)
}

fn run_cmd(args: &RunArgs) -> Result<(), CliError> {
    let dataset = read_dataset(&args.dataset)?;
    let confusion = match &dataset.header {
        Some(h) => h.confusion.clone(),
        None => ConfusionMatrix::symmetric(2, 0.0).expect("valid rate"),
    };
    let info_rate = misclass_rate(&confusion);
    let config = args.solver.config(confusion)?;

    let start = Instant::now();
    let result = run(&dataset, args.method, &config).map_err(|e| CliError::slam("run", e))?;
    let info = RunInfo {
        seed: args.seed,
        odom_scale: args.odom_scale,
        misclass_rate: info_rate,
        runtime_s: start.elapsed().as_secs_f64(),
    };
    let record =
        ResultRecord::new(&result, &dataset, info).map_err(|e| CliError::slam("evaluate", e))?;

    if let Some(path) = &args.out {
        write_results(path, std::slice::from_ref(&record))
            .map_err(|e| CliError::slam(&path.display().to_string(), e))?;
    }
    if let Some(path) = &args.traj_out {
        write_trajectory_csv(path, &result.trajectory)
            .map_err(|e| CliError::slam(&path.display().to_string(), e))?;
    }
    print_summary(&record);
    Ok(())
}

fn print_summary(r: &ResultRecord) {
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    println!(
        "{:6} poses={} landmarks={} rmse_t={} rmse_r={} assoc_acc={} class_acc={} time={:.2}s",
        r.method,
        r.num_poses,
        r.landmark_count,
        fmt(r.translation.map(|s| s.rmse)),
        fmt(r.rotation.map(|s| s.rmse)),
        fmt(r.association_accuracy),
        fmt(r.class_accuracy),
        r.runtime_s
    );
}

fn sweep_cmd(args: &SweepArgs) -> Result<(), CliError> {
    if args.methods.is_empty() || args.odom_scales.is_empty() || args.misclass_rates.is_empty() {
        return Err(CliError::usage(
            "methods, odometry scales and misclassification rates must be non-empty",
        ));
    }
    for &s in &args.odom_scales {
        for &a in &args.misclass_rates {
            args.world
                .config(0, s, a)
                .validate()
                .map_err(|e| CliError::usage(e.to_string()))?;
        }
    }
    let probe = args.world.config(0, 0.0, 0.0);
    args.solver.config(
        probe
            .confusion()
            .map_err(|e| CliError::usage(e.to_string()))?,
    )?;

    write_results(&args.out, &[])
        .map_err(|e| CliError::slam(&args.out.display().to_string(), e))?;
    let total = args.odom_scales.len() * args.misclass_rates.len() * args.seeds as usize;
    let mut done = 0;
    for &odom_scale in &args.odom_scales {
        for &misclass in &args.misclass_rates {
            for seed in 0..args.seeds {
                let sim = args.world.config(seed, odom_scale, misclass);
                let (_, dataset) = generate(&sim).map_err(|e| CliError::slam("simulate", e))?;
                let confusion = sim
                    .confusion()
                    .map_err(|e| CliError::usage(e.to_string()))?;
                let config = args.solver.config(confusion)?;
                let mut records = Vec::with_capacity(args.methods.len());
                for &method in &args.methods {
                    let start = Instant::now();
                    let context = format!(
                        "{} seed {seed} odom-scale {odom_scale} misclass-rate {misclass}",
                        method.name()
                    );
                    let result =
                        run(&dataset, method, &config).map_err(|e| CliError::slam(&context, e))?;
                    let info = RunInfo {
                        seed,
                        odom_scale,
                        misclass_rate: misclass,
                        runtime_s: start.elapsed().as_secs_f64(),
                    };
                    records.push(
                        ResultRecord::new(&result, &dataset, info)
                            .map_err(|e| CliError::slam(&context, e))?,
                    );
                }
                append_results(&args.out, &records)
                    .map_err(|e| CliError::slam(&args.out.display().to_string(), e))?;
                done += 1;
                eprintln!(
                    "[{done}/{total}] odom-scale {odom_scale} misclass-rate {misclass} seed {seed}"
                );
            }
        }
    }
    println!(
        "wrote {} records to {}",
        total * args.methods.len(),
        args.out.display()
    );
    Ok(())
}

fn stats_row(label: &str, s: &ErrorStats) -> String {
    format!(
        "{label:<16}{:>12.6}{:>12.6}{:>14.6}{:>12.6}",
        s.max, s.mean, s.median, s.rmse
    )
}

fn eval_cmd(args: &EvalArgs) -> Result<(), CliError> {
    let estimate = read_trajectory_csv(&args.est)
        .map_err(|e| CliError::slam(&args.est.display().to_string(), e))?;
    let dataset = read_dataset(&args.reference)?;
    let reference = dataset.reference_trajectory().ok_or_else(|| {
        CliError::data(format!(
            "{}: no complete POSE_GT trajectory",
            args.reference.display()
        ))
    })?;
    let align = match args.align {
        AlignArg::Origin => Alignment::Origin,
        AlignArg::Umeyama => Alignment::Umeyama,
    };
    let (t, r) =
        trajectory_error(&estimate, &reference, align).map_err(|e| CliError::slam("eval", e))?;
    println!(
        "{:<16}{:>12}{:>12}{:>14}{:>12}",
        "", "Max Error", "Mean Error", "Median Error", "RMSE"
    );
    println!("{}", stats_row("Translation (m)", &t));
    println!("{}", stats_row("Rotation (rad)", &r));
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { CliError::USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match &cli.command {
        Command::Simulate(a) => simulate_cmd(a),
        Command::Run(a) => run_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Eval(a) => eval_cmd(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
