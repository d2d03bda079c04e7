//! Config-driven experiments: scenario grids over sampling policies and
//! seeds, with machine-readable reports and plot data.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bias::{bias_report, BiasReport, EmpiricalMode};
use crate::error::{Error, Result};
use crate::expectation::ENUMERATION_BUDGET;
use crate::optimize::{run_epochs, NoiseSpec, TrajectoryRecord};
use crate::par::run_indexed;
use crate::predictors::{measure_escape_epochs, strict_saddle_epochs};
use crate::problem::{Hyperparams, LossOracle, ParamVector};
use crate::problems::{ProblemSpec, SaddleBenchmark, ToyDiagonalProblem, WReluProblem};
use crate::schedule::{schedule_count, SamplingPolicy};

/// The three-point problem behind the phase-plot experiments.
pub fn toy_diagonal_problem() -> ToyDiagonalProblem {
    ToyDiagonalProblem::new()
}

/// The W-shaped shallow-ReLU regression problem.
pub fn w_relu_problem(width: usize, n: usize) -> Result<WReluProblem> {
    WReluProblem::new(width, n)
}

/// Bias-analysis settings inside an experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasAnalysisConfig {
    /// Compute a report every this many epochs (0 = only at the start).
    #[serde(default)]
    pub every: usize,
    /// Use exact schedule enumeration when the count is within budget,
    /// otherwise Monte Carlo with `mc_samples`.
    #[serde(default = "default_mc_samples")]
    pub mc_samples: u64,
}

fn default_mc_samples() -> u64 {
    2000
}

/// Saddle-predictor settings inside an experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorConfig {
    pub loss_drop: f64,
    pub max_epochs: usize,
}

/// Analysis toggles.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default)]
    pub bias: Option<BiasAnalysisConfig>,
    #[serde(default)]
    pub predictors: Option<PredictorConfig>,
}

/// A full experiment description. Unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Schema version; current version is 1.
    #[serde(default = "default_version")]
    pub version: u32,
    pub problem: ProblemSpec,
    pub hyper: Hyperparams,
    pub policies: Vec<SamplingPolicy>,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub theta0: Option<Vec<f64>>,
    /// Noise scale for the NoisedFullBatch policy.
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

fn default_version() -> u32 {
    1
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        if cfg.version != 1 {
            return Err(Error::InvalidConfig(format!(
                "unsupported config version {}",
                cfg.version
            )));
        }
        if cfg.policies.is_empty() || cfg.seeds.is_empty() {
            return Err(Error::InvalidConfig(
                "policies and seeds must be non-empty".into(),
            ));
        }
        Hyperparams::new(cfg.hyper.eta, cfg.hyper.k, cfg.hyper.b)?;
        Ok(cfg)
    }
}

/// Result of one (policy, seed) scenario.
#[derive(Debug, Clone, Serialize)]
pub struct ScenarioReport {
    pub policy: SamplingPolicy,
    pub seed: u64,
    pub final_theta: Option<Vec<f64>>,
    pub final_loss: Option<f64>,
    pub steps: usize,
    pub bias_reports: Vec<EpochBiasReport>,
    pub trajectory_file: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochBiasReport {
    pub epoch: usize,
    pub report: BiasReport,
}

/// Saddle predictor comparison attached to a report.
#[derive(Debug, Clone, Serialize)]
pub struct PredictorReport {
    pub u: f64,
    pub lambda: f64,
    pub predicted_epochs: f64,
    pub measured: Vec<PredictorMeasurement>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PredictorMeasurement {
    pub policy: SamplingPolicy,
    pub seed: u64,
    pub escape_epochs: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub config_hash: String,
    pub crate_version: String,
    pub seeds: Vec<u64>,
}

/// The full machine-readable experiment output.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub provenance: Provenance,
    pub scenarios: Vec<ScenarioReport>,
    pub predictors: Option<PredictorReport>,
}

/// FNV-1a over the canonical config JSON.
fn config_hash(config: &ExperimentConfig) -> String {
    let text = serde_json::to_string(config).expect("config serializes");
    let mut hash: u64 = 0xcbf29ce484222325;
    for byte in text.as_bytes() {
        hash ^= *byte as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    format!("{hash:016x}")
}

/// Run every (policy, seed) scenario of the config. Scenario failures are
/// recorded and the remaining scenarios continue. With `out_dir` set, one
/// trajectory CSV per scenario is written
/// (header `step,epoch,theta_0..theta_{d-1},loss`).
pub fn run_experiment(
    config: &ExperimentConfig,
    out_dir: Option<&Path>,
) -> Result<ExperimentReport> {
    let oracle = config.problem.build()?;
    let theta0: ParamVector = match &config.theta0 {
        Some(v) => {
            if v.len() != oracle.dim() {
                return Err(Error::InvalidConfig(format!(
                    "theta0 has dimension {} but the problem has {}",
                    v.len(),
                    oracle.dim()
                )));
            }
            nalgebra::DVector::from_vec(v.clone())
        }
        None => config.problem.default_init(config.seeds[0])?,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let grid: Vec<(SamplingPolicy, u64)> = config
        .policies
        .iter()
        .flat_map(|&p| config.seeds.iter().map(move |&s| (p, s)))
        .collect();

    let oracle_ref: &(dyn LossOracle + Send) = oracle.as_ref();
    let scenarios: Vec<ScenarioReport> = run_indexed(grid.len(), |i| {
        let (policy, seed) = grid[i];
        run_scenario(oracle_ref, &theta0, config, policy, seed, out_dir)
    });

    let predictors = match &config.analysis.predictors {
        Some(pcfg) => Some(run_predictor_analysis(oracle_ref, &theta0, config, pcfg)?),
        None => None,
    };

    Ok(ExperimentReport {
        provenance: Provenance {
            config_hash: config_hash(config),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            seeds: config.seeds.clone(),
        },
        scenarios,
        predictors,
    })
}

fn run_scenario(
    oracle: &(dyn LossOracle + Send),
    theta0: &ParamVector,
    config: &ExperimentConfig,
    policy: SamplingPolicy,
    seed: u64,
    out_dir: Option<&Path>,
) -> ScenarioReport {
    let noise = if policy == SamplingPolicy::NoisedFullBatch {
        NoiseSpec::GaussianIsotropic {
            sigma: config.noise_sigma,
        }
    } else {
        NoiseSpec::None
    };
    let mut report = ScenarioReport {
        policy,
        seed,
        final_theta: None,
        final_loss: None,
        steps: 0,
        bias_reports: Vec::new(),
        trajectory_file: None,
        error: None,
    };
    let record = match run_epochs(
        oracle,
        theta0,
        &config.hyper,
        policy,
        config.epochs,
        seed,
        noise,
    ) {
        Ok(r) => r,
        Err(e) => {
            report.error = Some(e.to_string());
            return report;
        }
    };
    report.steps = record.thetas.len() - 1;
    report.final_theta = Some(record.final_theta().as_slice().to_vec());
    report.final_loss = record.losses.last().copied();

    if let Some(bias_cfg) = &config.analysis.bias {
        match bias_epochs_for(config.epochs, bias_cfg.every) {
            epochs_list => {
                for epoch in epochs_list {
                    let theta = &record.thetas[epoch * config.hyper.k];
                    let n = oracle.n_examples();
                    let mode = if schedule_count(
                        n,
                        config.hyper.k,
                        config.hyper.b,
                        policy,
                    ) <= ENUMERATION_BUDGET / 100
                    {
                        EmpiricalMode::Exact
                    } else {
                        EmpiricalMode::MonteCarlo {
                            samples: bias_cfg.mc_samples,
                            seed,
                        }
                    };
                    match bias_report(oracle, theta, &config.hyper, policy, mode) {
                        Ok(r) => report.bias_reports.push(EpochBiasReport { epoch, report: r }),
                        Err(e) => {
                            report.error = Some(format!("bias analysis failed: {e}"));
                            break;
                        }
                    }
                }
            }
        }
    }

    if let Some(dir) = out_dir {
        let name = format!("trajectory_{policy:?}_{seed}.csv");
        let path = dir.join(&name);
        match write_trajectory_csv(&path, &record, config.hyper.k) {
            Ok(()) => report.trajectory_file = Some(name),
            Err(e) => report.error = Some(format!("csv write failed: {e}")),
        }
    }
    report
}

fn bias_epochs_for(total: usize, every: usize) -> Vec<usize> {
    if every == 0 {
        vec![0]
    } else {
        (0..=total).step_by(every).collect()
    }
}

fn run_predictor_analysis(
    oracle: &(dyn LossOracle + Send),
    theta0: &ParamVector,
    config: &ExperimentConfig,
    pcfg: &PredictorConfig,
) -> Result<PredictorReport> {
    let spectrum = crate::problem::hessian_spectrum(oracle, theta0)?;
    let d = oracle.dim();
    let lambda_min = spectrum.eigenvalues[d - 1];
    let v_min = spectrum.eigenvectors.column(d - 1).clone_owned();
    let overlap = crate::bias::overlap_u(oracle, theta0, &v_min)?;
    let predicted = if lambda_min < 0.0 && overlap.u != 0.0 {
        strict_saddle_epochs(overlap.u, lambda_min, &config.hyper)?
            .epochs_predicted
    } else {
        f64::NAN
    };
    let mut measured = Vec::new();
    for &policy in &config.policies {
        for &seed in &config.seeds {
            let escape = measure_escape_epochs(
                oracle,
                theta0,
                &config.hyper,
                policy,
                pcfg.loss_drop,
                pcfg.max_epochs,
                seed,
            )?;
            measured.push(PredictorMeasurement {
                policy,
                seed,
                escape_epochs: escape,
            });
        }
    }
    Ok(PredictorReport {
        u: overlap.u,
        lambda: lambda_min,
        predicted_epochs: predicted,
        measured,
    })
}

/// Write a trajectory CSV with epoch boundaries, floats at 17 significant
/// digits.
pub fn write_trajectory_csv(path: &Path, record: &TrajectoryRecord, k: usize) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    let d = record.thetas[0].len();
    let mut header = String::from("step,epoch");
    for i in 0..d {
        header.push_str(&format!(",theta_{i}"));
    }
    header.push_str(",loss\n");
    file.write_all(header.as_bytes())?;
    for (step, (theta, loss)) in record.thetas.iter().zip(&record.losses).enumerate() {
        let epoch = if step == 0 { 0 } else { (step - 1) / k };
        let mut line = format!("{step},{epoch}");
        for v in theta.iter() {
            line.push_str(&format!(",{v:.16e}"));
        }
        line.push_str(&format!(",{loss:.16e}\n"));
        file.write_all(line.as_bytes())?;
    }
    Ok(())
}

/// Serialize any value to JSON with every float rendered at 17 significant
/// digits, so reports are byte-identical across runs.
pub fn to_json_17<T: Serialize>(value: &T) -> Result<String> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, SciFormatter);
    value
        .serialize(&mut ser)
        .map_err(|e| Error::InvalidConfig(format!("serialization failed: {e}")))?;
    String::from_utf8(out).map_err(|e| Error::InvalidConfig(e.to_string()))
}

struct SciFormatter;

impl serde_json::ser::Formatter for SciFormatter {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W>(&mut self, writer: &mut W, value: f32) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        write!(writer, "{value:.8e}")
    }
}

/// Write the report JSON next to the trajectories.
pub fn write_report(dir: &Path, report: &ExperimentReport) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join("report.json");
    std::fs::write(&path, to_json_17(report)?)?;
    Ok(path)
}

/// A deterministic end-to-end run used by tests: the toy problem under
/// several policies.
pub fn example_config() -> ExperimentConfig {
    ExperimentConfig {
        version: 1,
        problem: ProblemSpec::ToyDiagonal,
        hyper: Hyperparams::new(0.01, 3, 1).expect("valid"),
        policies: vec![
            SamplingPolicy::WithoutReplacement,
            SamplingPolicy::FullBatch,
        ],
        epochs: 50,
        seeds: vec![1, 2],
        theta0: Some(vec![1.0, 6.0]),
        noise_sigma: 0.0,
        analysis: AnalysisConfig::default(),
    }
}

/// The standard strict-saddle benchmark instance for a given step size, with
/// `n = k = round(1/eta)` so one epoch is a full pass at `b = 1`.
pub fn standard_saddle_setup(eta: f64, seed: u64) -> (SaddleBenchmark, Hyperparams, ParamVector) {
    let k = (1.0 / eta).round() as usize;
    let bench = SaddleBenchmark::standard(k, seed);
    let hyper = Hyperparams::new(eta, k, 1).expect("valid");
    let init = bench.recommended_init(eta);
    (bench, hyper, init)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_problem_matches_cited_setup() {
        let p = toy_diagonal_problem();
        assert_eq!(p.n_examples(), 3);
        assert_eq!(ToyDiagonalProblem::default_init().as_slice(), &[1.0, 6.0]);
        assert!((p.manifold_product() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn w_relu_rejects_zero_width_and_traces_a_w() {
        assert!(w_relu_problem(0, 9).is_err());
        let p = w_relu_problem(8, 9).unwrap();
        assert_eq!(p.n_examples(), 9);
        // Count monotone segments of the target: a W has 4.
        let mut segments = 0;
        let mut last_sign = 0i32;
        for w in p.ys.windows(2) {
            let sign = if w[1] > w[0] { 1 } else { -1 };
            if sign != last_sign {
                segments += 1;
                last_sign = sign;
            }
        }
        assert_eq!(segments, 4);
        // Network output at theta = 0 is 0 for all inputs.
        let theta = nalgebra::DVector::zeros(p.dim());
        for &x in &p.xs {
            assert_eq!(p.forward(&theta, x), 0.0);
        }
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let bad = r#"{
            "problem": {"kind": "toy_diagonal"},
            "hyper": {"eta": 0.01, "k": 3, "b": 1},
            "policies": ["full_batch"],
            "epochs": 1,
            "seeds": [1],
            "notakey": true
        }"#;
        let err = ExperimentConfig::from_json(bad).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("notakey"), "diagnostic should name the key: {msg}");
    }

    #[test]
    fn reports_are_deterministic() {
        let config = example_config();
        let a = run_experiment(&config, None).unwrap();
        let b = run_experiment(&config, None).unwrap();
        assert_eq!(to_json_17(&a).unwrap(), to_json_17(&b).unwrap());
    }

    #[test]
    fn full_batch_bias_on_symmetric_dataset_is_zero() {
        // All examples identical: predicted and empirical steps both vanish.
        use crate::problems::QuadraticProblem;
        let a = nalgebra::DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 1.5]);
        let g = nalgebra::DVector::from_vec(vec![0.3, -0.4]);
        let p = QuadraticProblem::new(vec![a.clone(), a.clone(), a], vec![g.clone(), g.clone(), g]);
        let hyper = Hyperparams::new(0.05, 3, 1).unwrap();
        let theta0 = nalgebra::DVector::from_vec(vec![0.5, 0.5]);
        let report = bias_report(
            &p,
            &theta0,
            &hyper,
            SamplingPolicy::FullBatch,
            EmpiricalMode::Exact,
        )
        .unwrap();
        let pred = nalgebra::DVector::from_vec(report.predicted_step.clone()).norm();
        let emp = nalgebra::DVector::from_vec(report.empirical_step.clone()).norm();
        assert!(pred < 1e-12, "predicted {pred}");
        assert!(emp < 1e-12, "empirical {emp}");
    }

    #[test]
    fn scenario_errors_do_not_abort_the_run() {
        let mut config = example_config();
        // Infeasible k*b for the disjoint policy, feasible for full batch.
        config.hyper = Hyperparams::new(0.01, 5, 1).unwrap();
        let report = run_experiment(&config, None).unwrap();
        let wor = report
            .scenarios
            .iter()
            .find(|s| s.policy == SamplingPolicy::WithoutReplacement)
            .unwrap();
        assert!(wor.error.is_some());
        let full = report
            .scenarios
            .iter()
            .find(|s| s.policy == SamplingPolicy::FullBatch)
            .unwrap();
        assert!(full.error.is_none());
    }
}
