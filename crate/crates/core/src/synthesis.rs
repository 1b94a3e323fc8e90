//! Linear-in-parameters controllers, the convex surrogate criterion as an
//! explicit least-squares form, and the scenario baseline-regret program.
//!
//! For a controller `C_rho = sum rho_k phi_k` and a plant `G`, the surrogate
//! `||W - (1 - W) G C_rho||_2^2` equals `||w - T rho||^2`, where `w` holds the
//! impulse response of `W` and column `k` of `T` the impulse response of
//! `(1 - W) G phi_k`. `(1 - W) phi_k` does not depend on the plant, so it is
//! computed once and each scenario only costs one convolution per column.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lti::{
    converged_impulse_response, impulse_response, tail_energy, tf_add, tf_mul, tf_one_minus,
    tf_scale, TransferFunction, Truncation,
};
use crate::scenario::ScenarioSet;

/// Basis operators `phi_1..phi_p` spanning the controller class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<TransferFunction>", into = "Vec<TransferFunction>")]
pub struct ControllerBasis {
    elements: Vec<TransferFunction>,
}

impl TryFrom<Vec<TransferFunction>> for ControllerBasis {
    type Error = Error;

    fn try_from(v: Vec<TransferFunction>) -> Result<Self> {
        ControllerBasis::new(v)
    }
}

impl From<ControllerBasis> for Vec<TransferFunction> {
    fn from(b: ControllerBasis) -> Self {
        b.elements
    }
}

impl ControllerBasis {
    pub fn new(elements: Vec<TransferFunction>) -> Result<Self> {
        if elements.is_empty() {
            return Err(Error::InvalidArgument(
                "controller basis needs at least one element".into(),
            ));
        }
        Ok(ControllerBasis { elements })
    }

    /// `C(q) = K`.
    pub fn proportional() -> Self {
        ControllerBasis {
            elements: vec![TransferFunction::one()],
        }
    }

    /// `q^{-k} / (1 - q^{-1})` for `k = 0..=order`: an integrator in series
    /// with an FIR filter of the given order.
    pub fn integrator_fir(order: usize) -> Self {
        let elements = (0..=order)
            .map(|k| {
                let mut num = vec![0.0; k + 1];
                num[k] = 1.0;
                TransferFunction::new(num, vec![1.0, -1.0]).expect("valid basis element")
            })
            .collect();
        ControllerBasis { elements }
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn elements(&self) -> &[TransferFunction] {
        &self.elements
    }
}

/// A point `rho` in the controller class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Controller {
    pub rho: Vec<f64>,
    pub basis: ControllerBasis,
}

impl Controller {
    pub fn new(rho: Vec<f64>, basis: ControllerBasis) -> Result<Self> {
        if rho.len() != basis.len() {
            return Err(Error::DimensionMismatch {
                expected: basis.len(),
                got: rho.len(),
            });
        }
        Ok(Controller { rho, basis })
    }

    /// `sum rho_k phi_k` as a single rational operator.
    pub fn to_tf(&self) -> Result<TransferFunction> {
        let mut acc = TransferFunction::zero();
        let mut first = true;
        for (&r, phi) in self.rho.iter().zip(self.basis.elements()) {
            let term = tf_scale(phi, r)?;
            if first {
                // keep phi's denominator even when r == 0 so later sums share it
                acc = TransferFunction::new(term.num().to_vec(), phi.den().to_vec())?;
                first = false;
            } else if term.is_zero() {
                continue;
            } else {
                acc = tf_add(&acc, &term)?;
            }
        }
        Ok(acc)
    }
}

/// `J(rho) = e - 2 b^T rho + rho^T H rho`, the Gram form of `||w - T rho||^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioQuadratic {
    pub h: DMatrix<f64>,
    pub b: DVector<f64>,
    pub e: f64,
}

impl ScenarioQuadratic {
    pub fn new(h: DMatrix<f64>, b: DVector<f64>, e: f64) -> Result<Self> {
        if h.nrows() != h.ncols() || h.nrows() != b.len() {
            return Err(Error::DimensionMismatch {
                expected: h.nrows(),
                got: b.len(),
            });
        }
        Ok(ScenarioQuadratic { h, b, e })
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn eval(&self, rho: &DVector<f64>) -> f64 {
        self.e - 2.0 * self.b.dot(rho) + rho.dot(&(&self.h * rho))
    }

    pub fn gradient(&self, rho: &DVector<f64>) -> DVector<f64> {
        (&self.h * rho - &self.b) * 2.0
    }
}

/// Surrogate criterion `||w - T rho||^2` for one plant.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCriterion {
    pub t: DMatrix<f64>,
    pub w: DVector<f64>,
}

impl QuadraticCriterion {
    pub fn eval(&self, rho: &[f64]) -> f64 {
        let r = DVector::from_column_slice(rho);
        (&self.w - &self.t * r).norm_squared()
    }

    pub fn truncation(&self) -> usize {
        self.w.len()
    }

    pub fn params(&self) -> usize {
        self.t.ncols()
    }

    pub fn to_quadratic(&self) -> ScenarioQuadratic {
        ScenarioQuadratic {
            h: self.t.tr_mul(&self.t),
            b: self.t.tr_mul(&self.w),
            e: self.w.norm_squared(),
        }
    }
}

/// Plant-independent part of the criterion: `w` and the responses of
/// `(1 - W) phi_k`, at a truncation length where all of them have decayed.
#[derive(Debug, Clone)]
pub struct CriterionBuilder {
    w: Vec<f64>,
    shaped: Vec<Vec<f64>>,
    tail_tol: f64,
}

impl CriterionBuilder {
    pub fn new(w: &TransferFunction, basis: &ControllerBasis, trunc: &Truncation) -> Result<Self> {
        let sens = tf_one_minus(w)?;
        let shaped_tfs: Vec<TransferFunction> = basis
            .elements()
            .iter()
            .map(|phi| tf_mul(&sens, phi).map(|tf| tf.cancel_marginal_modes()))
            .collect::<Result<_>>()?;

        let mut last_len = trunc.initial;
        'lengths: for len in trunc.lengths() {
            last_len = len;
            let w_ir = impulse_response(w, len);
            if !w_ir.is_converged(trunc.tail_tol) {
                continue;
            }
            let mut shaped = Vec::with_capacity(shaped_tfs.len());
            for tf in &shaped_tfs {
                let ir = impulse_response(tf, len);
                if !ir.is_converged(trunc.tail_tol) {
                    continue 'lengths;
                }
                shaped.push(ir.into_taps());
            }
            return Ok(CriterionBuilder {
                w: w_ir.into_taps(),
                shaped,
                tail_tol: trunc.tail_tol,
            });
        }
        // name the first offending operator
        let what = if !impulse_response(w, last_len).is_converged(trunc.tail_tol) {
            "reference model W".to_string()
        } else {
            let k = shaped_tfs
                .iter()
                .position(|tf| !impulse_response(tf, last_len).is_converged(trunc.tail_tol))
                .unwrap_or(0);
            format!("(1 - W) * basis element {k}")
        };
        Err(Error::NonDecaying {
            what,
            max_len: last_len,
        })
    }

    pub fn truncation(&self) -> usize {
        self.w.len()
    }

    pub fn params(&self) -> usize {
        self.shaped.len()
    }

    pub fn reference_response(&self) -> &[f64] {
        &self.w
    }

    /// Criterion for the plant with impulse response (or FIR taps) `g`.
    pub fn criterion(&self, g: &[f64]) -> Result<QuadraticCriterion> {
        let len = self.w.len();
        let p = self.shaped.len();
        let mut t = DMatrix::zeros(len, p);
        for (k, h) in self.shaped.iter().enumerate() {
            let col = truncated_convolution(g, h, len);
            let energy: f64 = col.iter().map(|x| x * x).sum();
            let tail = tail_energy(&col);
            if tail > 0.0 && !(tail <= self.tail_tol * energy) {
                return Err(Error::NonDecaying {
                    what: format!("(1 - W) * G * basis element {k}"),
                    max_len: len,
                });
            }
            t.set_column(k, &DVector::from_vec(col));
        }
        Ok(QuadraticCriterion {
            t,
            w: DVector::from_column_slice(&self.w),
        })
    }

    /// Criterion for a rational plant, via its impulse response.
    pub fn criterion_for_tf(&self, g: &TransferFunction) -> Result<QuadraticCriterion> {
        let ir = impulse_response(g, self.w.len());
        if !ir.tail_energy_bound().is_finite() {
            return Err(Error::NonDecaying {
                what: "plant G".into(),
                max_len: self.w.len(),
            });
        }
        self.criterion(ir.taps())
    }
}

/// First `len` samples of `g * h`.
fn truncated_convolution(g: &[f64], h: &[f64], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for (a, &ga) in g.iter().enumerate().take(len) {
        if ga == 0.0 {
            continue;
        }
        for (o, &hv) in out[a..].iter_mut().zip(h) {
            *o += ga * hv;
        }
    }
    out
}

/// Surrogate criterion for FIR plant taps `g`.
pub fn criterion_quadratic(
    g: &[f64],
    w: &TransferFunction,
    basis: &ControllerBasis,
    trunc: &Truncation,
) -> Result<QuadraticCriterion> {
    CriterionBuilder::new(w, basis, trunc)?.criterion(g)
}

/// Per-coordinate box on `rho`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn uniform(dim: usize, lower: f64, upper: f64) -> Self {
        Bounds {
            lower: vec![lower; dim],
            upper: vec![upper; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, rho: &[f64]) -> bool {
        rho.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(r, (lo, hi))| lo <= r && r <= hi)
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.lower.len() != dim || self.upper.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: self.lower.len(),
            });
        }
        for (lo, hi) in self.lower.iter().zip(&self.upper) {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::InvalidArgument(format!(
                    "box bounds must be finite with lower < upper, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }
}

/// `min_rho max_i (J_i(rho) - c_i)` over a box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretProgram {
    pub quadratics: Vec<ScenarioQuadratic>,
    /// Baseline cost `c_i = J_i(rho_b)`, or zero for the plain min-max program.
    pub costs: Vec<f64>,
    pub rho_b: DVector<f64>,
    pub bounds: Bounds,
}

impl RegretProgram {
    /// Program with baseline costs evaluated from the same quadratics.
    pub fn new(quadratics: Vec<ScenarioQuadratic>, rho_b: Vec<f64>, bounds: Bounds) -> Result<Self> {
        if quadratics.is_empty() {
            return Err(Error::InvalidArgument("program needs at least one scenario".into()));
        }
        let p = rho_b.len();
        if let Some(q) = quadratics.iter().find(|q| q.dim() != p) {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: q.dim(),
            });
        }
        bounds.validate(p)?;
        let rho_b = DVector::from_vec(rho_b);
        let costs = quadratics.iter().map(|q| q.eval(&rho_b)).collect();
        Ok(RegretProgram {
            quadratics,
            costs,
            rho_b,
            bounds,
        })
    }

    /// The same scenarios with all baseline costs set to zero.
    pub fn without_baseline(&self) -> RegretProgram {
        RegretProgram {
            costs: vec![0.0; self.costs.len()],
            ..self.clone()
        }
    }

    pub fn dim(&self) -> usize {
        self.rho_b.len()
    }

    pub fn len(&self) -> usize {
        self.quadratics.len()
    }

    pub fn is_empty(&self) -> bool {
        self.quadratics.is_empty()
    }

    /// Regret (or cost) on every scenario.
    pub fn scenario_values(&self, rho: &DVector<f64>) -> Vec<f64> {
        self.quadratics
            .iter()
            .zip(&self.costs)
            .map(|(q, c)| q.eval(rho) - c)
            .collect()
    }

    /// `(max_i value_i, argmax)`.
    pub fn objective(&self, rho: &DVector<f64>) -> (f64, usize) {
        self.scenario_values(rho)
            .into_iter()
            .enumerate()
            .fold((f64::NEG_INFINITY, 0), |(best, bi), (i, v)| {
                if v > best {
                    (v, i)
                } else {
                    (best, bi)
                }
            })
    }
}

/// Assembles one regret constraint per sampled system.
pub fn build_regret_program(
    scenarios: &ScenarioSet,
    builder: &CriterionBuilder,
    rho_b: &[f64],
    bounds: &Bounds,
) -> Result<RegretProgram> {
    if scenarios.is_empty() {
        return Err(Error::InvalidArgument("empty scenario set".into()));
    }
    if rho_b.len() != builder.params() {
        return Err(Error::DimensionMismatch {
            expected: builder.params(),
            got: rho_b.len(),
        });
    }
    let quadratics: Vec<ScenarioQuadratic> = scenarios
        .systems
        .par_iter()
        .enumerate()
        .map(|(index, g)| {
            builder
                .criterion(g)
                .map(|c| c.to_quadratic())
                .map_err(|e| Error::Scenario {
                    index,
                    source: Box::new(e),
                })
        })
        .collect::<Result<_>>()?;
    RegretProgram::new(quadratics, rho_b.to_vec(), bounds.clone())
}

/// Least-squares minimizer of the surrogate at a single (nominal) plant.
pub fn solve_nominal(criterion: &QuadraticCriterion) -> Result<Vec<f64>> {
    let p = criterion.params();
    let qr = criterion.t.clone().qr();
    let r = qr.r();
    let max_pivot = r.diagonal().iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let dependent: Vec<usize> = (0..p)
        .filter(|&k| !(r[(k, k)].abs() > 1e-10 * max_pivot))
        .collect();
    if !dependent.is_empty() {
        return Err(Error::RankDeficientBasis(dependent));
    }
    let qtw = qr.q().tr_mul(&criterion.w);
    let rho = r
        .solve_upper_triangular(&qtw)
        .ok_or_else(|| Error::RankDeficientBasis((0..p).collect()))?;
    Ok(rho.iter().copied().collect())
}

/// Nominal controller for FIR taps `g_hat`.
pub fn nominal_controller(
    g_hat: &[f64],
    w: &TransferFunction,
    basis: &ControllerBasis,
    trunc: &Truncation,
) -> Result<Controller> {
    let rho = solve_nominal(&criterion_quadratic(g_hat, w, basis, trunc)?)?;
    Controller::new(rho, basis.clone())
}

/// Impulse response of `W`, long enough to have converged.
pub fn reference_response(w: &TransferFunction, trunc: &Truncation) -> Result<Vec<f64>> {
    Ok(converged_impulse_response(w, trunc, "reference model W")?.into_taps())
}
