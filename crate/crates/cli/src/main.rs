//! `reshuffle` - simulate SGD-without-replacement dynamics, compare the
//! predicted bias step against exact enumeration, and run the built-in
//! verification suite.
//!
//! Exit codes: 0 success, 1 validation failure, 2 usage/config error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DVector;

use reshuffle_core::bias::{bias_report, EmpiricalMode};
use reshuffle_core::expectation::{
    expectation_closed_form, expectation_enumerated, ClosedFormOrder, FunctionSequence,
    MomentTable,
};
use reshuffle_core::harness::{
    run_experiment, standard_saddle_setup, to_json_17, write_report, write_trajectory_csv,
    ExperimentConfig,
};
use reshuffle_core::optimize::{run_epochs, NoiseSpec};
use reshuffle_core::predictors::{measure_escape_epochs, strict_saddle_epochs};
use reshuffle_core::schedule::SamplingPolicy;
use reshuffle_core::validate;
use reshuffle_core::LossOracle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutputFormat {
    Csv,
    Json,
}

#[derive(Parser)]
#[command(
    name = "reshuffle",
    about = "Desk-scale laboratory for the implicit bias of SGD without replacement",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured policies and emit trajectories.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "csv")]
        format: OutputFormat,
    },
    /// Predicted vs empirical expected deviation at one point.
    Bias {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Monte-Carlo samples when exact enumeration is over budget.
        #[arg(long, default_value_t = 2000)]
        samples: u64,
    },
    /// Expectation-engine oracle comparison (enumeration vs closed form).
    Enumerate {
        /// JSON file {"values": [..], "k": <int>}; defaults to the
        /// three-point identity example.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Saddle forecasts vs measured escape epochs on the built-in benchmark.
    Predict {
        /// Step size eta; the benchmark uses n = k = round(1/eta), b = 1.
        #[arg(long, default_value_t = 0.01)]
        eta: f64,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long, default_value_t = 400)]
        max_epochs: usize,
        #[arg(long, default_value_t = 1.0)]
        loss_drop: f64,
        #[arg(long, default_value_t = 5)]
        benchmark_seed: u64,
    },
    /// Full config-driven run with a JSON report.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the built-in invariant suite.
    Validate,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load_config(path: &PathBuf, seed: Option<u64>) -> anyhow::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| anyhow::anyhow!("cannot read {}: {e}", path.display()))?;
    let mut config = ExperimentConfig::from_json(&text)?;
    if let Some(s) = seed {
        config.seeds = vec![s];
    }
    Ok(config)
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Simulate {
            config,
            out,
            seed,
            format,
        } => {
            let config = load_config(&config, seed)?;
            let oracle = config.problem.build()?;
            let theta0 = match &config.theta0 {
                Some(v) => DVector::from_vec(v.clone()),
                None => config.problem.default_init(config.seeds[0])?,
            };
            for &policy in &config.policies {
                for &run_seed in &config.seeds {
                    let noise = if policy == SamplingPolicy::NoisedFullBatch {
                        NoiseSpec::GaussianIsotropic {
                            sigma: config.noise_sigma,
                        }
                    } else {
                        NoiseSpec::None
                    };
                    let record = run_epochs(
                        oracle.as_ref(),
                        &theta0,
                        &config.hyper,
                        policy,
                        config.epochs,
                        run_seed,
                        noise,
                    )?;
                    let end = record.final_theta();
                    let theta_str: Vec<String> =
                        end.iter().map(|v| format!("{v:.12e}")).collect();
                    println!(
                        "{policy:?} seed={run_seed} final_theta=[{}] final_loss={:.12e}",
                        theta_str.join(", "),
                        record.losses.last().unwrap()
                    );
                    if let Some(dir) = &out {
                        std::fs::create_dir_all(dir)?;
                        match format {
                            OutputFormat::Csv => {
                                let path =
                                    dir.join(format!("trajectory_{policy:?}_{run_seed}.csv"));
                                write_trajectory_csv(&path, &record, config.hyper.k)?;
                            }
                            OutputFormat::Json => {
                                let path =
                                    dir.join(format!("trajectory_{policy:?}_{run_seed}.json"));
                                let thetas: Vec<Vec<f64>> = record
                                    .thetas
                                    .iter()
                                    .map(|t| t.as_slice().to_vec())
                                    .collect();
                                let doc = serde_json::json!({
                                    "policy": policy,
                                    "seed": run_seed,
                                    "thetas": thetas,
                                    "losses": record.losses,
                                });
                                std::fs::write(&path, to_json_17(&doc)?)?;
                            }
                        }
                    }
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Bias {
            config,
            out,
            seed,
            samples,
        } => {
            let config = load_config(&config, seed)?;
            let oracle = config.problem.build()?;
            let theta0 = match &config.theta0 {
                Some(v) => DVector::from_vec(v.clone()),
                None => config.problem.default_init(config.seeds[0])?,
            };
            let policy = config
                .policies
                .first()
                .copied()
                .unwrap_or(SamplingPolicy::WithoutReplacement);
            let n = oracle.n_examples();
            let count = reshuffle_core::schedule::schedule_count(
                n,
                config.hyper.k,
                config.hyper.b,
                policy,
            );
            let mode = if count <= 100_000 {
                EmpiricalMode::Exact
            } else {
                EmpiricalMode::MonteCarlo {
                    samples,
                    seed: config.seeds[0],
                }
            };
            let report = bias_report(oracle.as_ref(), &theta0, &config.hyper, policy, mode)?;
            let text = to_json_17(&report)?;
            println!("{text}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("bias_report.json"), text)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Enumerate { config } => {
            let (values, k) = match config {
                None => (vec![1.0, 2.0, 3.0], 2),
                Some(path) => {
                    let text = std::fs::read_to_string(&path)?;
                    let doc: serde_json::Value = serde_json::from_str(&text)?;
                    let values: Vec<f64> = doc["values"]
                        .as_array()
                        .ok_or_else(|| anyhow::anyhow!("config needs a \"values\" array"))?
                        .iter()
                        .map(|v| v.as_f64().ok_or_else(|| anyhow::anyhow!("non-number value")))
                        .collect::<anyhow::Result<_>>()?;
                    let k = doc["k"]
                        .as_u64()
                        .ok_or_else(|| anyhow::anyhow!("config needs an integer \"k\""))?
                        as usize;
                    (values, k)
                }
            };
            let n = values.len();
            let fs = FunctionSequence::scalar_identity(values, k);
            let enumerated = expectation_enumerated(&fs, n)?;
            let table = MomentTable::build(&fs, n);
            let closed = expectation_closed_form(&table, ClosedFormOrder::FullPartition)?;
            let pair = expectation_closed_form(&table, ClosedFormOrder::PairCovariance)?;
            println!("enumeration      = {:.12}", enumerated.value[(0, 0)]);
            println!("closed_form_full = {:.12}", closed.value[(0, 0)]);
            println!("closed_form_pair = {:.12}", pair.value[(0, 0)]);
            let gap = (enumerated.value[(0, 0)] - closed.value[(0, 0)]).abs();
            println!("abs_gap          = {gap:.3e}");
            Ok(ExitCode::SUCCESS)
        }
        Command::Predict {
            eta,
            seeds,
            max_epochs,
            loss_drop,
            benchmark_seed,
        } => {
            let (bench, hyper, init) = standard_saddle_setup(eta, benchmark_seed);
            let u = bench.u_at_saddle();
            let forecast = strict_saddle_epochs(u, -1.0, &hyper)?;
            println!(
                "benchmark: n={} k={} b=1 eta={eta} u={u:.4} lambda=-1",
                bench.n_examples(),
                hyper.k
            );
            println!("predicted escape epochs: {:.2}", forecast.epochs_predicted);
            println!("policy                 median  min  max");
            for policy in [
                SamplingPolicy::WithoutReplacement,
                SamplingPolicy::WithReplacement,
            ] {
                let mut measured = Vec::with_capacity(seeds);
                for s in 0..seeds {
                    measured.push(measure_escape_epochs(
                        &bench,
                        &init,
                        &hyper,
                        policy,
                        loss_drop,
                        max_epochs,
                        s as u64,
                    )?);
                }
                let med = validate::median(&measured);
                let min = measured.iter().min().unwrap();
                let max = measured.iter().max().unwrap();
                println!("{policy:<22?} {med:>6.1} {min:>4} {max:>4}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Experiment { config, out, seed } => {
            let config = load_config(&config, seed)?;
            let report = run_experiment(&config, out.as_deref())?;
            match &out {
                Some(dir) => {
                    let path = write_report(dir, &report)?;
                    println!("report written to {}", path.display());
                }
                None => println!("{}", to_json_17(&report)?),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate => {
            let results = validate::run_all();
            let mut failed = 0;
            for r in &results {
                let status = if r.passed { "PASS" } else { "FAIL" };
                println!("[{status}] {:<40} {}", r.name, r.detail);
                if !r.passed {
                    failed += 1;
                }
            }
            println!(
                "{} checks, {} failed",
                results.len(),
                failed
            );
            if failed > 0 {
                Ok(ExitCode::from(1))
            } else {
                Ok(ExitCode::SUCCESS)
            }
        }
    }
}
