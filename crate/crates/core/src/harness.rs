//! End-to-end pipeline and the reproduction drivers.

use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::evaluation::{self, run_monte_carlo, EvaluationReport, Method, Metric};
use crate::lti::{converged_impulse_response, lsim, simulate, white_input, Dataset, TransferFunction};
use crate::plot::{self, Marker, Series};
use crate::rng;
use crate::scenario::{required_scenarios, sample_scenarios, ScenarioSet};
use crate::solver::{solve_min_max, solve_min_max_regret, SynthesisResult};
use crate::synthesis::{build_regret_program, solve_nominal, ControllerBasis, CriterionBuilder, RegretProgram};
use crate::sysid::{least_squares_fir, uncertainty_set, UncertaintySet};

/// Environment variable read by the CLI to size the worker pool.
pub const THREADS_ENV: &str = "REGRET_TUNE_THREADS";

/// Runs `f` on a dedicated pool of `threads` workers (the global pool if `None`).
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioCount {
    /// Count from the sample-complexity bound.
    pub bound: usize,
    /// Count actually drawn.
    pub used: usize,
    pub reported: Option<usize>,
    pub overridden: bool,
}

/// A configuration with its derived, reusable pieces.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub basis: ControllerBasis,
    pub reference: TransferFunction,
    pub builder: CriterionBuilder,
    /// First `n` impulse-response taps of the true system.
    pub truth_fir: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub data: Dataset,
    pub uset: UncertaintySet,
    pub scenarios: ScenarioSet,
    pub program: RegretProgram,
    pub min_max: SynthesisResult,
    pub min_max_baseline: SynthesisResult,
    pub nominal: Vec<f64>,
    pub contains_truth: bool,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let basis = config.controller_basis()?;
        let reference = config.reference_tf()?;
        let builder = CriterionBuilder::new(&reference, &basis, &config.study.truncation)?;
        let order = config.identification.order;
        let mut truth_fir = converged_impulse_response(&config.true_system, &config.study.truncation, "true system")?
            .into_taps();
        truth_fir.resize(order, 0.0);
        Ok(Experiment {
            config,
            basis,
            reference,
            builder,
            truth_fir,
        })
    }

    pub fn scenario_count(&self) -> Result<ScenarioCount> {
        let s = &self.config.scenario;
        let bound = required_scenarios(s.epsilon, s.eta, self.basis.len())?;
        Ok(ScenarioCount {
            bound,
            used: s.m_override.unwrap_or(bound),
            reported: s.reported_m,
            overridden: s.m_override.is_some(),
        })
    }

    /// Excites the true system with white noise and records the noisy output.
    pub fn collect_data(&self, samples: usize, seed: u64) -> Result<Dataset> {
        let id = &self.config.identification;
        let u = white_input(samples, id.input_std, seed);
        let clean = lsim(&self.config.true_system, &u);
        simulate(&self.config.true_system, &u, id.noise.noise_std(&clean), seed)
    }

    pub fn identify(&self, data: &Dataset) -> Result<UncertaintySet> {
        let est = least_squares_fir(data, self.config.identification.order)?;
        uncertainty_set(est, self.config.set.alpha, self.config.set.radius)
    }

    pub fn sample(&self, uset: &UncertaintySet, seed: u64) -> Result<ScenarioSet> {
        let m = self.scenario_count()?.used;
        sample_scenarios(uset, m, rng::derive_seed(seed, &[rng::tag::SCENARIO]))
    }

    pub fn program(&self, scenarios: &ScenarioSet, rho_b: &[f64]) -> Result<RegretProgram> {
        let bounds = self.config.solver.bounds(self.basis.len());
        build_regret_program(scenarios, &self.builder, rho_b, &bounds)
    }

    pub fn nominal(&self, uset: &UncertaintySet) -> Result<Vec<f64>> {
        let g: Vec<f64> = uset.center().g_hat().iter().copied().collect();
        solve_nominal(&self.builder.criterion(&g)?)
    }

    /// Data, identification, sampling and all three syntheses for one seed.
    pub fn run(&self, samples: usize, seed: u64) -> Result<RunOutcome> {
        let data = self.collect_data(samples, seed).map_err(|e| e.context("data collection"))?;
        let uset = self.identify(&data).map_err(|e| e.context("identification"))?;
        let scenarios = self.sample(&uset, seed).map_err(|e| e.context("scenario sampling"))?;
        let program = self
            .program(&scenarios, &self.config.rho_b)
            .map_err(|e| e.context("scenario criteria"))?;
        let opts = self.config.solver.options();
        let min_max_baseline = solve_min_max_regret(&program, &opts);
        let min_max = solve_min_max(&program, &opts);
        let nominal = self.nominal(&uset).map_err(|e| e.context("nominal synthesis"))?;
        let contains_truth = uset.contains(&self.truth_fir)?;
        Ok(RunOutcome {
            data,
            uset,
            scenarios,
            program,
            min_max,
            min_max_baseline,
            nominal,
            contains_truth,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// Bound-derived scenario counts and the configured run count.
    Desk,
    /// Reported scenario counts and run counts; slow.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentId {
    /// One-parameter proportional tuning.
    #[serde(rename = "1d")]
    OneDim,
    #[serde(rename = "highdim")]
    HighDim,
}

impl std::str::FromStr for ExperimentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1d" => Ok(ExperimentId::OneDim),
            "highdim" => Ok(ExperimentId::HighDim),
            _ => Err(Error::InvalidArgument(format!("unknown experiment `{s}` (1d | highdim)"))),
        }
    }
}

/// Built-in configuration for an experiment at a given scale.
pub fn experiment_config(id: ExperimentId, scale: Scale) -> ExperimentConfig {
    let mut cfg = match id {
        ExperimentId::OneDim => ExperimentConfig::builtin_p_controller(),
        ExperimentId::HighDim => ExperimentConfig::builtin_high_dim(),
    };
    if scale == Scale::Full {
        cfg.scenario.m_override = cfg.scenario.reported_m;
        if id == ExperimentId::HighDim {
            cfg.study.runs = 100;
        }
    }
    cfg
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metadata {
    pub experiment: String,
    pub scale: Option<Scale>,
    pub scenarios: ScenarioCount,
    pub params: usize,
    pub truncation_length: usize,
    pub master_seed: u64,
    pub config: ExperimentConfig,
}

/// Run metadata: scenario counts, truncation and the full configuration.
pub fn metadata(exp: &Experiment, scale: Option<Scale>) -> Result<Metadata> {
    Ok(Metadata {
        experiment: exp.config.name.clone(),
        scale,
        scenarios: exp.scenario_count()?,
        params: exp.basis.len(),
        truncation_length: exp.builder.truncation(),
        master_seed: exp.config.study.master_seed,
        config: exp.config.clone(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// One-parameter study for a single data set: min-max and one min-max-regret
/// solution per baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OneDimTrial {
    pub samples: usize,
    pub seed: u64,
    pub scenario_count: usize,
    pub contains_truth: bool,
    pub k_nominal: f64,
    pub min_max: SynthesisResult,
    pub baselines: Vec<BaselineSolution>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineSolution {
    pub k_b: f64,
    pub result: SynthesisResult,
    pub f_w: f64,
    pub f_w_baseline: f64,
}

impl OneDimTrial {
    pub fn k_min_max(&self) -> f64 {
        self.min_max.rho_star[0]
    }
}

/// Runs the one-parameter study for data length `samples`; also returns the
/// programs so callers can sweep the criteria.
pub fn one_dim_trial(exp: &Experiment, samples: usize, seed: u64) -> Result<(OneDimTrial, RunOutcome, Vec<RegretProgram>)> {
    if exp.basis.len() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: exp.basis.len(),
        });
    }
    let outcome = exp.run(samples, seed)?;
    let opts = exp.config.solver.options();
    let mut programs = Vec::new();
    let mut baselines = Vec::new();
    for rho_b in exp.config.baselines() {
        let prog = exp.program(&outcome.scenarios, &rho_b)?;
        let result = solve_min_max_regret(&prog, &opts);
        let (f_w, _, _) = evaluation::evaluate_controller(exp, &result.rho_star)?;
        let (f_w_baseline, _, _) = evaluation::evaluate_controller(exp, &rho_b)?;
        baselines.push(BaselineSolution {
            k_b: rho_b[0],
            result,
            f_w,
            f_w_baseline,
        });
        programs.push(prog);
    }
    let trial = OneDimTrial {
        samples,
        seed,
        scenario_count: outcome.scenarios.len(),
        contains_truth: outcome.contains_truth,
        k_nominal: outcome.nominal[0],
        min_max: outcome.min_max.clone(),
        baselines,
    };
    Ok((trial, outcome, programs))
}

/// Gain grid used by the cost-curve outputs.
pub fn gain_grid(lower: f64, upper: f64, points: usize) -> Vec<f64> {
    (0..points)
        .map(|i| lower + (upper - lower) * i as f64 / (points - 1) as f64)
        .collect()
}

const CURVE_SCENARIOS: usize = 40;

fn write_cost_curves(
    dir: &Path,
    exp: &Experiment,
    trial: &OneDimTrial,
    programs: &[RegretProgram],
) -> Result<()> {
    let grid = gain_grid(exp.config.solver.lower, exp.config.solver.upper, 401);
    let base = programs[0].without_baseline();
    let shown = base.len().min(CURVE_SCENARIOS);
    let rows: Vec<(Vec<f64>, f64, Vec<f64>)> = grid
        .par_iter()
        .map(|&k| {
            let rho = DVector::from_element(1, k);
            let vals = base.scenario_values(&rho);
            let worst = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let regrets = programs.iter().map(|p| p.objective(&rho).0).collect();
            (vals[..shown].to_vec(), worst, regrets)
        })
        .collect();
    let true_costs: Vec<f64> = grid
        .par_iter()
        .map(|&k| {
            let c = crate::synthesis::Controller::new(vec![k], exp.basis.clone())?;
            evaluation::true_cost(&c, &exp.config.true_system, &exp.reference, &exp.config.study.truncation)
        })
        .collect::<Result<_>>()?;

    let n = trial.samples;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("curves_N{n}.csv")))?);
    write!(f, "k,true_cost,worst_case")?;
    for b in &trial.baselines {
        write!(f, ",worst_regret_kb{}", b.k_b)?;
    }
    for i in 0..shown {
        write!(f, ",scenario_{i}")?;
    }
    writeln!(f)?;
    for ((k, (vals, worst, regrets)), tc) in grid.iter().zip(&rows).zip(&true_costs) {
        write!(f, "{k},{tc},{worst}")?;
        for r in regrets {
            write!(f, ",{r}")?;
        }
        for v in vals {
            write!(f, ",{v}")?;
        }
        writeln!(f)?;
    }
    f.flush()?;

    let mut series: Vec<Series> = (0..shown)
        .map(|i| Series {
            points: grid.iter().zip(&rows).map(|(&k, r)| (k, r.0[i])).collect(),
            color: "#bbbbbb",
            width: 0.6,
            label: None,
        })
        .collect();
    series.push(Series {
        points: grid.iter().zip(&rows).map(|(&k, r)| (k, r.1)).collect(),
        color: "#000000",
        width: 2.0,
        label: Some("worst case".into()),
    });
    series.push(Series {
        points: grid.iter().copied().zip(true_costs.iter().copied()).collect(),
        color: "#2ca02c",
        width: 1.5,
        label: Some("true system".into()),
    });
    let mut markers = vec![
        Marker {
            x: trial.k_min_max(),
            color: "#d62728",
            label: format!("K_MM = {:.4}", trial.k_min_max()),
        },
        Marker {
            x: trial.k_nominal,
            color: "#9467bd",
            label: format!("K_nom = {:.4}", trial.k_nominal),
        },
    ];
    for b in &trial.baselines {
        markers.push(Marker {
            x: b.result.rho_star[0],
            color: "#1f77b4",
            label: format!("K_MMB = {:.4} (K_b = {})", b.result.rho_star[0], b.k_b),
        });
    }
    let svg = plot::line_chart(
        &format!("Scenario criteria, N = {n}, M = {}", trial.scenario_count),
        "K",
        "criterion",
        &series,
        &markers,
    );
    std::fs::write(dir.join(format!("cost_curves_N{n}.svg")), svg)?;
    Ok(())
}

/// Writes the data, estimate, scenarios and results of one pipeline run.
pub fn write_run_artifacts(dir: &Path, tag: &str, outcome: &RunOutcome) -> Result<()> {
    outcome.data.write_csv(&dir.join(format!("data_{tag}.csv")))?;
    write_json(&dir.join(format!("estimate_{tag}.json")), &crate::sysid::EstimateFile::from(&outcome.uset))?;
    write_json(&dir.join(format!("scenarios_{tag}.json")), &outcome.scenarios)?;
    outcome
        .min_max_baseline
        .write_trace_csv(&dir.join(format!("trace_mmb_{tag}.csv")))?;
    Ok(())
}

/// Full one-parameter reproduction into `dir`.
pub fn repro_one_dim(exp: &Experiment, scale: Option<Scale>, dir: &Path) -> Result<Vec<OneDimTrial>> {
    std::fs::create_dir_all(dir)?;
    write_json(&dir.join("metadata.json"), &metadata(exp, scale)?)?;
    let master = exp.config.study.master_seed;
    let mut trials = Vec::new();
    for &n in &exp.config.identification.samples {
        let seed = evaluation::run_seed(master, n, 0);
        let (trial, outcome, programs) = one_dim_trial(exp, n, seed).map_err(|e| e.context(format!("N = {n}")))?;
        let tag = format!("N{n}");
        write_run_artifacts(dir, &tag, &outcome)?;
        write_cost_curves(dir, exp, &trial, &programs)?;
        write_json(&dir.join(format!("results_{tag}.json")), &trial)?;
        trials.push(trial);
    }
    Ok(trials)
}

/// Monte-Carlo reproduction: per-run metrics, aggregates and box plots.
pub fn repro_monte_carlo(exp: &Experiment, scale: Option<Scale>, dir: &Path) -> Result<EvaluationReport> {
    std::fs::create_dir_all(dir)?;
    write_json(&dir.join("metadata.json"), &metadata(exp, scale)?)?;
    let report = run_monte_carlo(&exp.config)?;
    report.write_csv(&dir.join("metrics.csv"))?;
    report.write_aggregate_json(&dir.join("aggregates.json"))?;
    if !report.failures.is_empty() {
        write_json(&dir.join("failures.json"), &report.failures)?;
    }
    for n in report.sample_sizes() {
        for metric in [Metric::Fw, Metric::Fc] {
            let boxes: Vec<(String, _)> = Method::ALL
                .into_iter()
                .filter_map(|m| report.aggregate(n, m, metric).map(|a| (m.to_string(), a)))
                .collect();
            let name = match metric {
                Metric::Fw => "fw",
                Metric::Fc => "fc",
            };
            let svg = plot::box_plot(&format!("{metric}, N = {n}"), &metric.to_string(), &boxes);
            std::fs::write(dir.join(format!("boxplot_{name}_N{n}.svg")), svg)?;
        }
    }
    let first = exp.config.identification.samples[0];
    let outcome = exp.run(first, evaluation::run_seed(exp.config.study.master_seed, first, 0))?;
    write_run_artifacts(dir, &format!("N{first}_run0"), &outcome)?;
    Ok(report)
}

#[derive(Debug)]
pub enum ReproOutput {
    OneDim(Vec<OneDimTrial>),
    MonteCarlo(EvaluationReport),
}

/// Reproduces a built-in experiment into `dir`.
pub fn repro(id: ExperimentId, scale: Scale, dir: &Path) -> Result<ReproOutput> {
    let exp = Experiment::new(experiment_config(id, scale))?;
    match id {
        ExperimentId::OneDim => Ok(ReproOutput::OneDim(repro_one_dim(&exp, Some(scale), dir)?)),
        ExperimentId::HighDim => Ok(ReproOutput::MonteCarlo(repro_monte_carlo(&exp, Some(scale), dir)?)),
    }
}
