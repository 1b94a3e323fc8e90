//! Experiment configuration, read from and written to JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lti::{closed_loop, TransferFunction, Truncation};
use crate::solver::SolverOptions;
use crate::synthesis::{Bounds, Controller, ControllerBasis};
use crate::sysid::RadiusRule;

const ONE_DIM_JSON: &str = include_str!("../configs/p_controller.json");
const HIGH_DIM_JSON: &str = include_str!("../configs/high_dim.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceModel {
    /// An explicit reference model.
    Tf(TransferFunction),
    /// `C G / (1 + C G)` for the controller with parameters `rho` on the true system.
    ClosedLoop { rho: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasisSpec {
    Proportional,
    IntegratorFir { order: usize },
    Custom { elements: Vec<TransferFunction> },
}

impl BasisSpec {
    pub fn build(&self) -> Result<ControllerBasis> {
        match self {
            BasisSpec::Proportional => Ok(ControllerBasis::proportional()),
            BasisSpec::IntegratorFir { order } => Ok(ControllerBasis::integrator_fir(*order)),
            BasisSpec::Custom { elements } => ControllerBasis::new(elements.clone()),
        }
    }
}

/// Measurement noise; exactly one interpretation per config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSpec {
    Variance(f64),
    /// Noise-free output power over noise power.
    SnrLinear(f64),
    SnrDb(f64),
}

impl NoiseSpec {
    /// Noise standard deviation for a noise-free output `y`.
    pub fn noise_std(&self, clean: &[f64]) -> f64 {
        let power = || clean.iter().map(|y| y * y).sum::<f64>() / clean.len().max(1) as f64;
        match *self {
            NoiseSpec::Variance(v) => v.sqrt(),
            NoiseSpec::SnrLinear(r) => (power() / r).sqrt(),
            NoiseSpec::SnrDb(db) => (power() / 10f64.powf(db / 10.0)).sqrt(),
        }
    }

    fn validate(&self) -> Result<()> {
        let v = match *self {
            NoiseSpec::Variance(v) => v >= 0.0,
            NoiseSpec::SnrLinear(r) => r > 0.0,
            NoiseSpec::SnrDb(d) => d.is_finite(),
        };
        if v {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid noise spec {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentificationConfig {
    /// FIR order `n`.
    pub order: usize,
    /// Data lengths `N` studied.
    pub samples: Vec<usize>,
    #[serde(default = "one")]
    pub input_std: f64,
    pub noise: NoiseSpec,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetConfig {
    pub alpha: f64,
    #[serde(default)]
    pub radius: RadiusRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub epsilon: f64,
    pub eta: f64,
    /// Replaces the bound-derived scenario count when set.
    #[serde(default)]
    pub m_override: Option<usize>,
    /// Count used by the full-size study, kept for the metadata.
    #[serde(default)]
    pub reported_m: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub tol: f64,
    pub feas_tol: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol: 1e-6,
            feas_tol: 1e-8,
            lower: -10.0,
            upper: 10.0,
        }
    }
}

impl SolverConfig {
    pub fn options(&self) -> SolverOptions {
        SolverOptions {
            tol: self.tol,
            feas_tol: self.feas_tol,
            ..Default::default()
        }
    }

    pub fn bounds(&self, dim: usize) -> Bounds {
        Bounds::uniform(dim, self.lower, self.upper)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub runs: usize,
    pub master_seed: u64,
    #[serde(default)]
    pub truncation: Truncation,
    /// Tolerance on `F_W(rho_MMB) >= F_W(rho_b) - tol` in the safety statistic.
    #[serde(default = "safety_tol")]
    pub safety_tol: f64,
}

fn safety_tol() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub true_system: TransferFunction,
    pub reference_model: ReferenceModel,
    pub basis: BasisSpec,
    pub rho_b: Vec<f64>,
    /// Additional baselines studied side by side (one-parameter sweeps).
    #[serde(default)]
    pub extra_baselines: Vec<Vec<f64>>,
    pub identification: IdentificationConfig,
    pub set: SetConfig,
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    pub study: StudyConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| e.context(format!("config {}", path.display())))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Proportional-gain tuning on a second-order low-pass plant.
    pub fn builtin_p_controller() -> Self {
        Self::from_json(ONE_DIM_JSON).expect("built-in config is valid")
    }

    /// Integrator-plus-FIR(5) tuning on a fourth-order plant.
    pub fn builtin_high_dim() -> Self {
        Self::from_json(HIGH_DIM_JSON).expect("built-in config is valid")
    }

    pub fn validate(&self) -> Result<()> {
        let basis = self.basis.build()?;
        let p = basis.len();
        if self.rho_b.len() != p || self.extra_baselines.iter().any(|r| r.len() != p) {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: self.rho_b.len(),
            });
        }
        if let ReferenceModel::ClosedLoop { rho } = &self.reference_model {
            if rho.len() != p {
                return Err(Error::DimensionMismatch {
                    expected: p,
                    got: rho.len(),
                });
            }
        }
        let id = &self.identification;
        if id.order == 0 || id.samples.is_empty() || id.samples.iter().any(|&n| n <= id.order + 1) {
            return Err(Error::InvalidArgument(
                "identification needs order >= 1 and every N > order + 1".into(),
            ));
        }
        id.noise.validate()?;
        if self.study.runs == 0 {
            return Err(Error::InvalidArgument("run count must be positive".into()));
        }
        if !(self.set.alpha > 0.0 && self.set.alpha < 1.0) {
            return Err(Error::InvalidArgument("alpha must lie in (0, 1)".into()));
        }
        if self.scenario.m_override == Some(0) {
            return Err(Error::InvalidArgument("scenario override must be positive".into()));
        }
        if !(self.solver.lower < self.solver.upper) {
            return Err(Error::InvalidArgument("solver box must satisfy lower < upper".into()));
        }
        Ok(())
    }

    pub fn controller_basis(&self) -> Result<ControllerBasis> {
        self.basis.build()
    }

    pub fn reference_tf(&self) -> Result<TransferFunction> {
        match &self.reference_model {
            ReferenceModel::Tf(tf) => Ok(tf.clone()),
            ReferenceModel::ClosedLoop { rho } => {
                let c = Controller::new(rho.clone(), self.controller_basis()?)?;
                closed_loop(&self.true_system, &c.to_tf()?)
            }
        }
    }

    /// All baselines: `rho_b` first, then the extras.
    pub fn baselines(&self) -> Vec<Vec<f64>> {
        std::iter::once(self.rho_b.clone())
            .chain(self.extra_baselines.iter().cloned())
            .collect()
    }
}
