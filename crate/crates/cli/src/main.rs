use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use regret_tune::config::ExperimentConfig;
use regret_tune::evaluation::evaluate_controller;
use regret_tune::harness::{self, Experiment, ExperimentId, ReproOutput, Scale, THREADS_ENV};
use regret_tune::lti::Dataset;
use regret_tune::solver::{solve_min_max, solve_min_max_regret, SynthesisResult};
use regret_tune::sysid::EstimateFile;

#[derive(Parser)]
#[command(name = "regret-tune", version, about = "Baseline-safe data-driven controller tuning")]
struct Cli {
    /// Worker threads (defaults to $REGRET_TUNE_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Nominal,
    Minmax,
    MinmaxBaseline,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Desk,
    Full,
}

#[derive(Subcommand)]
enum Command {
    /// Fit an FIR model and its confidence ellipsoid.
    Identify {
        /// Config file, or `1d` / `highdim` for a built-in one.
        #[arg(long)]
        config: String,
        /// Input/output CSV with columns u,y; simulated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Data length for simulated data (first configured length by default).
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the simulated data here.
        #[arg(long)]
        save_data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample scenarios from an estimate and solve for the controller.
    Synthesize {
        #[arg(long)]
        config: String,
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = MethodArg::All)]
        method: MethodArg,
        #[arg(long)]
        m_override: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit metrics of a controller on the configured true system.
    Evaluate {
        #[arg(long)]
        config: String,
        /// Controller parameters, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        rho: Vec<f64>,
    },
    /// Monte-Carlo study of every method over the configured runs.
    Mc {
        #[arg(long)]
        config: String,
        #[arg(long)]
        m_override: Option<usize>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Regenerate the one-parameter or high-dimensional study.
    Repro {
        #[arg(long, value_parser = ["1d", "highdim"])]
        experiment: String,
        /// Replaces the built-in config of the experiment.
        #[arg(long)]
        config: Option<String>,
        #[arg(long, value_enum, default_value_t = ScaleArg::Desk)]
        scale: ScaleArg,
        #[arg(long)]
        m_override: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(spec: &str) -> Result<ExperimentConfig> {
    Ok(match spec {
        "1d" => ExperimentConfig::builtin_p_controller(),
        "highdim" => ExperimentConfig::builtin_high_dim(),
        path => ExperimentConfig::load(Path::new(path))?,
    })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => Ok(Some(v.parse().with_context(|| format!("{THREADS_ENV}={v} is not a count"))?)),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Identify {
            config,
            data,
            samples,
            seed,
            save_data,
            out,
        } => {
            let exp = Experiment::new(load_config(&config)?)?;
            let data = match data {
                Some(path) => Dataset::read_csv(&path)?,
                None => {
                    let n = samples.unwrap_or(exp.config.identification.samples[0]);
                    exp.collect_data(n, seed)?
                }
            };
            if let Some(path) = save_data {
                data.write_csv(&path)?;
            }
            let uset = exp.identify(&data)?;
            write_json(&out, &EstimateFile::from(&uset))?;
            eprintln!(
                "identified n = {} from N = {}: sigma_v^2 = {:.4e}, radius^2 = {:.4}",
                uset.order(),
                data.len(),
                uset.center().sigma_v_sq_hat(),
                uset.radius_sq()
            );
        }
        Command::Synthesize {
            config,
            estimate,
            seed,
            method,
            m_override,
            out,
        } => {
            let mut cfg = load_config(&config)?;
            if m_override.is_some() {
                cfg.scenario.m_override = m_override;
            }
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            let exp = Experiment::new(cfg)?;
            let text = std::fs::read_to_string(&estimate).with_context(|| format!("reading {}", estimate.display()))?;
            let uset = serde_json::from_str::<EstimateFile>(&text)?.into_set()?;
            let mut results: BTreeMap<&str, serde_json::Value> = BTreeMap::new();
            if matches!(method, MethodArg::Nominal | MethodArg::All) {
                results.insert("nominal", serde_json::json!({ "rho_star": exp.nominal(&uset)? }));
            }
            if matches!(method, MethodArg::Minmax | MethodArg::MinmaxBaseline | MethodArg::All) {
                let scenarios = exp.sample(&uset, seed)?;
                let program = exp.program(&scenarios, &exp.config.rho_b)?;
                let opts = exp.config.solver.options();
                let mut add = |name: &'static str, r: SynthesisResult| -> Result<()> {
                    let trace = out.with_file_name(format!("trace_{name}.csv"));
                    r.write_trace_csv(&trace)?;
                    results.insert(name, serde_json::to_value(&r)?);
                    Ok(())
                };
                if matches!(method, MethodArg::Minmax | MethodArg::All) {
                    add("min-max", solve_min_max(&program, &opts))?;
                }
                if matches!(method, MethodArg::MinmaxBaseline | MethodArg::All) {
                    add("min-max-baseline", solve_min_max_regret(&program, &opts))?;
                }
            }
            let doc = serde_json::json!({
                "scenarios": exp.scenario_count()?,
                "seed": seed,
                "rho_b": exp.config.rho_b,
                "results": results,
            });
            write_json(&out, &doc)?;
        }
        Command::Evaluate { config, rho } => {
            let exp = Experiment::new(load_config(&config)?)?;
            if rho.len() != exp.basis.len() {
                bail!("expected {} controller parameters, got {}", exp.basis.len(), rho.len());
            }
            let (fw, fc, stable) = evaluate_controller(&exp, &rho)?;
            let doc = serde_json::json!({ "rho": rho, "f_w": fw, "f_c": fc, "stable": stable });
            println!("{}", serde_json::to_string_pretty(&doc)?);
        }
        Command::Mc {
            config,
            m_override,
            runs,
            seed,
            out,
        } => {
            let mut cfg = load_config(&config)?;
            if m_override.is_some() {
                cfg.scenario.m_override = m_override;
            }
            if let Some(r) = runs {
                cfg.study.runs = r;
            }
            if let Some(s) = seed {
                cfg.study.master_seed = s;
            }
            let exp = Experiment::new(cfg)?;
            let report = harness::repro_monte_carlo(&exp, None, &out)?;
            summarize(&report);
        }
        Command::Repro {
            experiment,
            config,
            scale,
            m_override,
            seed,
            out,
        } => {
            let id: ExperimentId = experiment.parse()?;
            let scale = match scale {
                ScaleArg::Desk => Scale::Desk,
                ScaleArg::Full => Scale::Full,
            };
            let mut cfg = match config {
                Some(c) => load_config(&c)?,
                None => harness::experiment_config(id, scale),
            };
            if m_override.is_some() {
                cfg.scenario.m_override = m_override;
            }
            if let Some(s) = seed {
                cfg.study.master_seed = s;
            }
            let exp = Experiment::new(cfg)?;
            let output = match id {
                ExperimentId::OneDim => ReproOutput::OneDim(harness::repro_one_dim(&exp, Some(scale), &out)?),
                ExperimentId::HighDim => {
                    ReproOutput::MonteCarlo(harness::repro_monte_carlo(&exp, Some(scale), &out)?)
                }
            };
            match output {
                ReproOutput::OneDim(trials) => {
                    for t in trials {
                        eprint!("N = {}: K_nom = {:.4}, K_MM = {:.4}", t.samples, t.k_nominal, t.k_min_max());
                        for b in &t.baselines {
                            eprint!(", K_MMB(K_b = {}) = {:.4}", b.k_b, b.result.rho_star[0]);
                        }
                        eprintln!();
                    }
                }
                ReproOutput::MonteCarlo(report) => summarize(&report),
            }
        }
    }
    Ok(())
}

fn summarize(report: &regret_tune::evaluation::EvaluationReport) {
    for a in report.aggregates() {
        eprintln!(
            "N = {:5} {:17} {}: median {:.4}, IQR [{:.4}, {:.4}], whiskers [{:.4}, {:.4}]",
            a.n_data,
            a.method.to_string(),
            a.metric,
            a.median,
            a.q1,
            a.q3,
            a.whisker_low,
            a.whisker_high
        );
    }
    for (n, (covered, frac)) in report.safety_summary() {
        eprintln!("N = {n:5}: {covered} runs covered the truth, {:.1}% no worse than baseline", 100.0 * frac);
    }
    if !report.failures.is_empty() {
        eprintln!("{} run(s) failed", report.failures.len());
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = match thread_count(cli.threads) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
