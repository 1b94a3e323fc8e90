//! Exact-criterion evaluation on the true system, fit metrics, and the
//! Monte-Carlo study.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::harness::Experiment;
use crate::lti::{
    closed_loop, converged_impulse_response, is_stable, lsim, tf_mul, tf_one_minus, tf_sub,
    TransferFunction, Truncation,
};
use crate::rng;
use crate::synthesis::Controller;

/// `||W - GC/(1+GC)||_2^2`, or `+inf` when the closed loop is unstable.
pub fn true_cost(
    c: &Controller,
    g: &TransferFunction,
    w: &TransferFunction,
    trunc: &Truncation,
) -> Result<f64> {
    let t = closed_loop(g, &c.to_tf()?)?;
    if !is_stable(&t) {
        return Ok(f64::INFINITY);
    }
    let err = tf_sub(w, &t)?;
    Ok(converged_impulse_response(&err, trunc, "W - GC/(1+GC)")?.energy())
}

/// Surrogate `||W - (1 - W) G C||_2^2` evaluated by operator algebra.
pub fn surrogate_cost(
    c: &Controller,
    g: &TransferFunction,
    w: &TransferFunction,
    trunc: &Truncation,
) -> Result<f64> {
    let shaped = tf_mul(&tf_mul(&tf_one_minus(w)?, g)?, &c.to_tf()?)?;
    let err = tf_sub(w, &shaped)?.cancel_marginal_modes();
    Ok(converged_impulse_response(&err, trunc, "W - (1 - W) G C")?.energy())
}

fn reference_energy(w: &TransferFunction, trunc: &Truncation) -> Result<f64> {
    let e = converged_impulse_response(w, trunc, "reference model W")?.energy();
    if e == 0.0 {
        return Err(Error::InvalidArgument(
            "fit metrics need a nonzero reference model".into(),
        ));
    }
    Ok(e)
}

/// `F_W = 1 - J / ||W||^2`; `-inf` for an unstable closed loop.
pub fn fit_fw(c: &Controller, g: &TransferFunction, w: &TransferFunction, trunc: &Truncation) -> Result<f64> {
    let j = true_cost(c, g, w, trunc)?;
    Ok(1.0 - j / reference_energy(w, trunc)?)
}

/// `F_C = 1 - J_surrogate / ||W||^2`.
pub fn fit_fc(c: &Controller, g: &TransferFunction, w: &TransferFunction, trunc: &Truncation) -> Result<f64> {
    let j = match surrogate_cost(c, g, w, trunc) {
        Ok(j) => j,
        Err(Error::NonDecaying { .. }) => f64::INFINITY,
        Err(e) => return Err(e),
    };
    Ok(1.0 - j / reference_energy(w, trunc)?)
}

/// Closed-loop output for a unit-step reference from rest.
pub fn step_response(c: &Controller, g: &TransferFunction, len: usize) -> Result<Vec<f64>> {
    let t = closed_loop(g, &c.to_tf()?)?;
    if !is_stable(&t) {
        return Err(Error::Unstable("closed loop GC/(1+GC) is unstable".into()));
    }
    Ok(lsim(&t, &vec![1.0; len]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Nominal,
    MinMax,
    MinMaxBaseline,
    Baseline,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Nominal,
        Method::MinMaxBaseline,
        Method::MinMax,
        Method::Baseline,
    ];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Nominal => "nominal",
            Method::MinMax => "min-max",
            Method::MinMaxBaseline => "min-max-baseline",
            Method::Baseline => "baseline",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Fw,
    Fc,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Fw => "F_W",
            Metric::Fc => "F_C",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub n_data: usize,
    pub run: usize,
    pub seed: u64,
    pub method: Method,
    pub fw: f64,
    pub fc: f64,
    pub stable: bool,
    /// Solver convergence (always true for closed-form methods).
    pub converged: bool,
    pub rho: Vec<f64>,
}

impl RunRecord {
    pub fn metric(&self, m: Metric) -> f64 {
        match m {
            Metric::Fw => self.fw,
            Metric::Fc => self.fc,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub n_data: usize,
    pub run: usize,
    pub message: String,
}

/// Whether the identified set held the truth and whether the regret
/// controller matched the baseline on the true system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyRecord {
    pub n_data: usize,
    pub run: usize,
    pub contains_truth: bool,
    pub no_worse_than_baseline: bool,
}

/// Box-plot statistics; whiskers cover the central 99.3% of the runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n_data: usize,
    pub method: Method,
    pub metric: Metric,
    pub count: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
}

impl Aggregate {
    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

pub const WHISKER_LOW: f64 = 0.0035;
pub const WHISKER_HIGH: f64 = 0.9965;

/// Linearly interpolated empirical quantile of sorted data.
pub fn quantile(sorted: &[f64], prob: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = prob.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let (a, b) = (sorted[lo], sorted[hi]);
    if lo == hi || a == b || a.is_infinite() {
        return a;
    }
    if b.is_infinite() {
        return b;
    }
    a + (pos - lo as f64) * (b - a)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub records: Vec<RunRecord>,
    pub failures: Vec<RunFailure>,
    pub safety: Vec<SafetyRecord>,
}

impl EvaluationReport {
    pub fn values(&self, n_data: usize, method: Method, metric: Metric) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.n_data == n_data && r.method == method)
            .map(|r| r.metric(metric))
            .collect()
    }

    pub fn sample_sizes(&self) -> Vec<usize> {
        let mut n: Vec<usize> = self.records.iter().map(|r| r.n_data).collect();
        n.sort_unstable();
        n.dedup();
        n
    }

    pub fn aggregate(&self, n_data: usize, method: Method, metric: Metric) -> Option<Aggregate> {
        let mut v = self.values(n_data, method, metric);
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let whisker_low = quantile(&v, WHISKER_LOW);
        let whisker_high = quantile(&v, WHISKER_HIGH);
        Some(Aggregate {
            n_data,
            method,
            metric,
            count: v.len(),
            median: quantile(&v, 0.5),
            q1: quantile(&v, 0.25),
            q3: quantile(&v, 0.75),
            whisker_low,
            whisker_high,
            outliers: v
                .iter()
                .copied()
                .filter(|&x| x < whisker_low || x > whisker_high)
                .collect(),
        })
    }

    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut out = Vec::new();
        for n in self.sample_sizes() {
            for metric in [Metric::Fw, Metric::Fc] {
                for method in Method::ALL {
                    out.extend(self.aggregate(n, method, metric));
                }
            }
        }
        out
    }

    /// Fraction of truth-covering runs where the regret controller was no
    /// worse than the baseline, per data length: `(covered runs, fraction)`.
    pub fn safety_summary(&self) -> BTreeMap<usize, (usize, f64)> {
        let mut acc: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for s in self.safety.iter().filter(|s| s.contains_truth) {
            let e = acc.entry(s.n_data).or_default();
            e.0 += 1;
            e.1 += s.no_worse_than_baseline as usize;
        }
        acc.into_iter()
            .map(|(n, (tot, ok))| (n, (tot, ok as f64 / tot as f64)))
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "n_data,run,seed,method,fw,fc,stable,converged,rho")?;
        for r in &self.records {
            let rho: Vec<String> = r.rho.iter().map(|x| x.to_string()).collect();
            writeln!(
                f,
                "{},{},{},{},{},{},{},{},{}",
                r.n_data,
                r.run,
                r.seed,
                r.method,
                r.fw,
                r.fc,
                r.stable,
                r.converged,
                rho.join(";")
            )?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn write_aggregate_json(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Summary<'a> {
            aggregates: Vec<Aggregate>,
            safety: BTreeMap<usize, (usize, f64)>,
            failures: &'a [RunFailure],
        }
        let s = Summary {
            aggregates: self.aggregates(),
            safety: self.safety_summary(),
            failures: &self.failures,
        };
        std::fs::write(path, serde_json::to_string_pretty(&s)?)?;
        Ok(())
    }
}

/// Metrics of one controller on the true system.
pub fn evaluate_controller(
    exp: &Experiment,
    rho: &[f64],
) -> Result<(f64, f64, bool)> {
    let c = Controller::new(rho.to_vec(), exp.basis.clone())?;
    let g = &exp.config.true_system;
    let trunc = &exp.config.study.truncation;
    let fw = fit_fw(&c, g, &exp.reference, trunc)?;
    let fc = fit_fc(&c, g, &exp.reference, trunc)?;
    Ok((fw, fc, fw.is_finite()))
}

struct RunOutput {
    records: Vec<RunRecord>,
    safety: SafetyRecord,
}

fn one_run(exp: &Experiment, n_data: usize, run: usize, seed: u64) -> Result<RunOutput> {
    let outcome = exp.run(n_data, seed)?;
    let mut records = Vec::with_capacity(4);
    let mut push = |method: Method, rho: &[f64], converged: bool| -> Result<f64> {
        let (fw, fc, stable) = evaluate_controller(exp, rho)?;
        records.push(RunRecord {
            n_data,
            run,
            seed,
            method,
            fw,
            fc,
            stable,
            converged,
            rho: rho.to_vec(),
        });
        Ok(fw)
    };
    push(Method::Nominal, &outcome.nominal, true)?;
    let fw_mmb = push(
        Method::MinMaxBaseline,
        &outcome.min_max_baseline.rho_star,
        outcome.min_max_baseline.converged,
    )?;
    push(Method::MinMax, &outcome.min_max.rho_star, outcome.min_max.converged)?;
    let fw_b = push(Method::Baseline, &exp.config.rho_b, true)?;
    Ok(RunOutput {
        records,
        safety: SafetyRecord {
            n_data,
            run,
            contains_truth: outcome.contains_truth,
            no_worse_than_baseline: fw_mmb >= fw_b - exp.config.study.safety_tol,
        },
    })
}

/// Seed of run `run` at data length `n_data`.
pub fn run_seed(master: u64, n_data: usize, run: usize) -> u64 {
    rng::derive_seed(master, &[rng::tag::RUN, n_data as u64, run as u64])
}

/// Full study: every data length in the config times `study.runs` runs.
///
/// Runs execute in parallel; per-run failures are recorded, not propagated.
pub fn run_monte_carlo(config: &ExperimentConfig) -> Result<EvaluationReport> {
    let exp = Experiment::new(config.clone())?;
    let jobs: Vec<(usize, usize)> = config
        .identification
        .samples
        .iter()
        .flat_map(|&n| (0..config.study.runs).map(move |r| (n, r)))
        .collect();
    let outputs: Vec<(usize, usize, Result<RunOutput>)> = jobs
        .par_iter()
        .map(|&(n, r)| (n, r, one_run(&exp, n, r, run_seed(config.study.master_seed, n, r))))
        .collect();

    let mut report = EvaluationReport::default();
    for (n_data, run, out) in outputs {
        match out {
            Ok(o) => {
                report.records.extend(o.records);
                report.safety.push(o.safety);
            }
            Err(e) => report.failures.push(RunFailure {
                n_data,
                run,
                message: e.to_string(),
            }),
        }
    }
    Ok(report)
}
