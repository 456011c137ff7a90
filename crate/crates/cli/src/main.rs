//! `dspal`: covariate selection and effect estimation for multivariate
//! continuous treatments, plus the simulation harness.
//!
//! Exit status: 0 success, 1 configuration or usage error, 2 data error,
//! 3 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dspal::config::PipelineConfig;
use dspal::pipeline::{analyze, Method};
use dspal::report::{write_atomic, write_json};
use dspal::sim::{run_simulation, DgpSpec, OutcomeKind, SimSettings};
use dspal::{Dataset, Error, ErrorClass};

#[derive(Parser, Debug)]
#[command(name = "dspal", version, about = "Double-screening prior adaptive lasso for multivariate continuous treatments")]
struct Cli {
    /// More log output on standard error (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Select covariates and estimate treatment effects on a CSV file.
    Analyze(AnalyzeArgs),
    /// Run replicated simulations on synthetic data with known covariate roles.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// Input file with a header row. Every column that is neither a treatment nor the outcome is a covariate.
    #[arg(long)]
    csv: PathBuf,
    /// Comma-separated treatment column names.
    #[arg(long, value_delimiter = ',', required = true)]
    treatments: Vec<String>,
    /// Outcome column name.
    #[arg(long)]
    outcome: String,
    #[command(flatten)]
    tuning: Tuning,
    /// Effect model: linear, quadratic or spline.
    #[arg(long)]
    effect_model: Option<String>,
    #[arg(long)]
    n_boot: Option<usize>,
    /// Output directory for report.json and stages.log.
    #[arg(long, default_value = "dspal-out")]
    out: PathBuf,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args, Debug)]
struct Tuning {
    /// key = value configuration file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Size of the independence-screening set.
    #[arg(long)]
    d: Option<usize>,
    /// Size of the conditional-screening set (default ⌊n / ln n⌋).
    #[arg(long)]
    k: Option<usize>,
}

impl Tuning {
    fn resolve(&self) -> Result<PipelineConfig, Error> {
        let mut config = match &self.config {
            Some(path) => PipelineConfig::from_file(path)?,
            None => PipelineConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(d) = self.d {
            config.set("d", &d.to_string())?;
        }
        if let Some(k) = self.k {
            config.set("k", &k.to_string())?;
        }
        Ok(config)
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Outcome {
    Linear,
    Nonlinear,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum MethodArg {
    Dspal,
    Palut,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, default_value_t = 300)]
    n: usize,
    #[arg(long, default_value_t = 100)]
    p: usize,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long, value_enum, default_value = "linear")]
    outcome: Outcome,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "dspal,palut")]
    methods: Vec<MethodArg>,
    #[command(flatten)]
    tuning: Tuning,
    /// Output directory for sim_report.json and replicates.csv.
    #[arg(long, default_value = "dspal-sim")]
    out: PathBuf,
}

/// Failure carrying the exit status it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: exit_code(e.class()),
            message: e.to_string(),
        }
    }
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Config => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numerical => 3,
    }
}

fn cmd_analyze(args: &AnalyzeArgs) -> Result<(), Failure> {
    let mut config = args.tuning.resolve()?;
    if let Some(model) = &args.effect_model {
        config.set("effect_model", model)?;
    }
    if let Some(n_boot) = args.n_boot {
        config.n_boot = n_boot;
    }
    config.validate()?;
    let treatments: Vec<&str> = args.treatments.iter().map(String::as_str).collect();
    let data = Dataset::load_csv(&args.csv, &treatments, &args.outcome)?;
    log::info!("loaded {} rows, {} covariates, {} treatments", data.n(), data.p(), data.q());

    if args.dry_run {
        let resolved = config.resolve(data.n(), data.p())?;
        println!("{}", serde_json::to_string_pretty(&resolved).expect("config serializes"));
        return Ok(());
    }

    let report = analyze(&data, &config).map_err(|e| Failure {
        code: exit_code(e.source.class()),
        message: e.to_string(),
    })?;
    let log: String = report
        .stages
        .iter()
        .map(|s| format!("{}\t{:.3}s\t{}\n", s.stage, s.seconds, s.detail))
        .collect();
    write_json(&args.out.join("report.json"), &report)?;
    write_atomic(&args.out.join("stages.log"), log.as_bytes()).map_err(Error::from)?;
    println!("selected: {}", report.selected.join(", "));
    for term in &report.effect {
        match (term.ci_lower, term.ci_upper) {
            (Some(lo), Some(hi)) => println!("{}: {:.4} ({:.4}, {:.4})", term.name, term.estimate, lo, hi),
            _ => println!("{}: {:.4}", term.name, term.estimate),
        }
    }
    println!("report written to {}", args.out.join("report.json").display());
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(), Failure> {
    let pipeline = args.tuning.resolve()?;
    let outcome = match args.outcome {
        Outcome::Linear => OutcomeKind::Linear,
        Outcome::Nonlinear => OutcomeKind::Nonlinear,
    };
    let spec = DgpSpec::new(args.n, args.p, outcome, pipeline.seed)?;
    let mut methods: Vec<Method> = args
        .methods
        .iter()
        .map(|m| match m {
            MethodArg::Dspal => Method::Dspal,
            MethodArg::Palut => Method::Palut,
        })
        .collect();
    methods.dedup();
    let settings = SimSettings {
        pipeline,
        ..SimSettings::default()
    };
    let report = run_simulation(&spec, args.reps, &methods, &settings)?;
    write_json(&args.out.join("sim_report.json"), &report)?;
    report.write_csv(&args.out.join("replicates.csv"))?;
    println!(
        "sure screening {:.3}, ranking consistency {:.3}",
        report.sure_screening_rate, report.ranking_consistency_rate
    );
    for m in &report.methods {
        let mut line = format!("{}: {} ok, {} failed", m.method, m.successes, m.failures);
        if let (Some(bias), Some(rmse)) = (&m.mean_bias, &m.rmse) {
            line += &format!(", bias {bias:.4?}, rmse {rmse:.4?}");
        }
        if let Some(r) = m.mean_effect_rmse {
            line += &format!(", mean effect rmse {r:.4}");
        }
        println!("{line}");
    }
    println!("report written to {}", args.out.display());
    Ok(())
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    init_logging(cli.verbose);
    let result = match &cli.command {
        Command::Analyze(args) => cmd_analyze(args),
        Command::Simulate(args) => cmd_simulate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
