//! Discrete-time SISO transfer functions in the backward shift `q^{-1}`.
//!
//! A [`TransferFunction`] stores `b_0 + b_1 q^{-1} + ... + b_m q^{-m}` over
//! `1 + a_1 q^{-1} + ... + a_k q^{-k}`. Everything downstream (closed loops,
//! criteria, simulation) is built from these values, and every norm is taken
//! from a truncated impulse response whose neglected tail is estimated.

use nalgebra::{Complex, DMatrix};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Relative size below which a leading denominator coefficient counts as zero.
const LEADING_EPS: f64 = 1e-14;

/// Default modulus margin for [`is_stable`].
pub const STABILITY_MARGIN: f64 = 1e-9;

/// Rational operator in `q^{-1}`, normalized so that `den[0] == 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TfRepr", into = "TfRepr")]
pub struct TransferFunction {
    num: Vec<f64>,
    den: Vec<f64>,
}

/// Shift convention used by the JSON form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum ShiftVar {
    /// Descending powers of the forward shift `q`.
    #[serde(rename = "q")]
    Forward,
    /// Ascending powers of `q^{-1}`.
    #[serde(rename = "q_inv")]
    #[default]
    Backward,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TfRepr {
    num: Vec<f64>,
    den: Vec<f64>,
    #[serde(default)]
    var: ShiftVar,
}

impl TryFrom<TfRepr> for TransferFunction {
    type Error = Error;

    fn try_from(r: TfRepr) -> Result<Self> {
        match r.var {
            ShiftVar::Backward => TransferFunction::new(r.num, r.den),
            ShiftVar::Forward => TransferFunction::from_forward(&r.num, &r.den),
        }
    }
}

impl From<TransferFunction> for TfRepr {
    fn from(tf: TransferFunction) -> Self {
        TfRepr {
            num: tf.num,
            den: tf.den,
            var: ShiftVar::Backward,
        }
    }
}

fn trim_trailing(mut v: Vec<f64>) -> Vec<f64> {
    while v.last() == Some(&0.0) {
        v.pop();
    }
    v
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub(crate) fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_add(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len().max(b.len())];
    for (i, &x) in a.iter().enumerate() {
        out[i] += x;
    }
    for (i, &y) in b.iter().enumerate() {
        out[i] += y;
    }
    out
}

fn poly_sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    let neg: Vec<f64> = b.iter().map(|x| -x).collect();
    poly_add(a, &neg)
}

/// Evaluates `sum c_i x^i`.
fn poly_eval(c: &[f64], x: Complex<f64>) -> Complex<f64> {
    c.iter()
        .rev()
        .fold(Complex::new(0.0, 0.0), |acc, &ci| acc * x + ci)
}

/// Divides `p` by a monic (in `q^{-1}`) factor, dropping the remainder.
fn deflate(p: &[f64], factor: &[f64]) -> Vec<f64> {
    if p.len() < factor.len() {
        return Vec::new();
    }
    let qlen = p.len() - factor.len() + 1;
    let mut quot = vec![0.0; qlen];
    for i in 0..qlen {
        let mut v = p[i];
        for j in 1..factor.len().min(i + 1) {
            v -= factor[j] * quot[i - j];
        }
        quot[i] = v;
    }
    quot
}

impl TransferFunction {
    /// Builds and normalizes `num / den`, both in ascending powers of `q^{-1}`.
    pub fn new(num: Vec<f64>, den: Vec<f64>) -> Result<Self> {
        if num.iter().chain(den.iter()).any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(
                "transfer function coefficients must be finite".into(),
            ));
        }
        let den = trim_trailing(den);
        if den.is_empty() {
            return Err(Error::Degenerate("denominator is identically zero".into()));
        }
        let lead = den[0];
        if lead.abs() <= LEADING_EPS * max_abs(&den) {
            return Err(Error::Degenerate(
                "leading denominator coefficient is zero".into(),
            ));
        }
        let num = trim_trailing(num.into_iter().map(|b| b / lead).collect());
        if num.is_empty() {
            return Ok(Self::zero());
        }
        let mut den: Vec<f64> = den.into_iter().map(|a| a / lead).collect();
        den[0] = 1.0;
        Ok(TransferFunction { num, den })
    }

    /// Converts from descending powers of the forward shift `q`.
    ///
    /// The operator must be proper (numerator degree ≤ denominator degree).
    pub fn from_forward(num: &[f64], den: &[f64]) -> Result<Self> {
        let strip = |v: &[f64]| -> Vec<f64> { v.iter().copied().skip_while(|&x| x == 0.0).collect() };
        let num = strip(num);
        let den = strip(den);
        if den.is_empty() {
            return Err(Error::Degenerate("denominator is identically zero".into()));
        }
        if num.len() > den.len() {
            return Err(Error::InvalidArgument(format!(
                "improper transfer function: numerator degree {} exceeds denominator degree {}",
                num.len() - 1,
                den.len() - 1
            )));
        }
        let delay = den.len() - num.len();
        let mut b = vec![0.0; delay];
        b.extend_from_slice(&num);
        Self::new(b, den)
    }

    pub fn zero() -> Self {
        TransferFunction {
            num: Vec::new(),
            den: vec![1.0],
        }
    }

    pub fn one() -> Self {
        Self::gain(1.0)
    }

    pub fn gain(k: f64) -> Self {
        Self::new(vec![k], vec![1.0]).expect("finite gain")
    }

    /// FIR operator `sum g_i q^{-i}`.
    pub fn fir(taps: &[f64]) -> Self {
        Self::new(taps.to_vec(), vec![1.0]).expect("finite taps")
    }

    /// Pure delay `q^{-d}`.
    pub fn delay(d: usize) -> Self {
        let mut b = vec![0.0; d + 1];
        b[d] = 1.0;
        Self::fir(&b)
    }

    pub fn num(&self) -> &[f64] {
        &self.num
    }

    pub fn den(&self) -> &[f64] {
        &self.den
    }

    pub fn is_zero(&self) -> bool {
        self.num.is_empty()
    }

    /// Value at `q = z`, i.e. with `q^{-1} = 1/z`.
    pub fn eval(&self, z: Complex<f64>) -> Complex<f64> {
        let zi = z.inv();
        poly_eval(&self.num, zi) / poly_eval(&self.den, zi)
    }

    /// Frequency response at `ω` (radians per sample).
    pub fn freq_response(&self, omega: f64) -> Complex<f64> {
        self.eval(Complex::from_polar(1.0, omega))
    }

    /// Static gain `num(1) / den(1)`.
    pub fn dc_gain(&self) -> f64 {
        self.num.iter().sum::<f64>() / self.den.iter().sum::<f64>()
    }

    /// Poles as roots of the denominator in the forward variable.
    pub fn poles(&self) -> Vec<Complex<f64>> {
        roots_forward(&self.den)
    }

    /// Cancels pole/zero pairs that sit on or outside the unit circle.
    ///
    /// Products such as `(1 - W) * phi` with an integrating `phi` carry a
    /// pole at `z = 1` that the numerator exactly annihilates; the recursion
    /// in [`impulse_response`] would otherwise keep a rounding-level constant
    /// tail alive forever.
    pub fn cancel_marginal_modes(&self) -> TransferFunction {
        const RADIUS: f64 = 1.0 - 1e-6;
        const ZERO_REL: f64 = 1e-7;
        let mut num = self.num.clone();
        let mut den = self.den.clone();
        'outer: loop {
            if num.is_empty() || den.len() < 2 {
                break;
            }
            for z in roots_forward(&den) {
                if z.norm() < RADIUS || z.im < 0.0 {
                    continue;
                }
                let zi = polish_root(&den, z.inv());
                let z = zi.inv();
                let scale: f64 = num
                    .iter()
                    .enumerate()
                    .map(|(i, b)| b.abs() * zi.norm().powi(i as i32))
                    .sum();
                if poly_eval(&num, zi).norm() > ZERO_REL * scale {
                    continue;
                }
                let factor = if z.im.abs() <= 1e-9 * z.norm() {
                    vec![1.0, -z.re]
                } else {
                    vec![1.0, -2.0 * z.re, z.norm_sqr()]
                };
                if num.len() < factor.len() {
                    continue;
                }
                num = deflate(&num, &factor);
                den = deflate(&den, &factor);
                continue 'outer;
            }
            break;
        }
        TransferFunction::new(num, den).unwrap_or_else(|_| self.clone())
    }
}

/// Newton refinement of a root `w` of `sum c_i w^i`; unit-circle roots at
/// `+-1` within rounding are snapped exactly.
fn polish_root(c: &[f64], mut w: Complex<f64>) -> Complex<f64> {
    let d: Vec<f64> = c.iter().enumerate().skip(1).map(|(i, ci)| i as f64 * ci).collect();
    for _ in 0..60 {
        let f = poly_eval(c, w);
        let fd = poly_eval(&d, w);
        if fd.norm() == 0.0 {
            break;
        }
        let next = w - f / fd;
        if !(next.re.is_finite() && next.im.is_finite()) || poly_eval(c, next).norm() >= f.norm() {
            break;
        }
        w = next;
    }
    for s in [1.0, -1.0] {
        if (w - s).norm() < 1e-6 && poly_eval(c, Complex::new(s, 0.0)).norm() <= poly_eval(c, w).norm() * 4.0 + 1e-15 {
            return Complex::new(s, 0.0);
        }
    }
    w
}

/// Roots of `c_0 x^k + c_1 x^{k-1} + ... + c_k` via companion eigenvalues.
fn roots_forward(coeffs: &[f64]) -> Vec<Complex<f64>> {
    let c = trim_trailing(coeffs.to_vec());
    let zeros_at_origin = coeffs.len().saturating_sub(c.len());
    if c.len() < 2 {
        return vec![Complex::new(0.0, 0.0); zeros_at_origin];
    }
    let k = c.len() - 1;
    let mut comp = DMatrix::<f64>::zeros(k, k);
    for j in 0..k {
        comp[(0, j)] = -c[j + 1] / c[0];
    }
    for i in 1..k {
        comp[(i, i - 1)] = 1.0;
    }
    let mut roots: Vec<Complex<f64>> = comp.complex_eigenvalues().iter().copied().collect();
    roots.extend(std::iter::repeat_n(Complex::new(0.0, 0.0), zeros_at_origin));
    roots
}

/// `a * b`.
pub fn tf_mul(a: &TransferFunction, b: &TransferFunction) -> Result<TransferFunction> {
    TransferFunction::new(poly_mul(&a.num, &b.num), poly_mul(&a.den, &b.den))
}

/// `a + b`; shares the denominator when both are equal.
pub fn tf_add(a: &TransferFunction, b: &TransferFunction) -> Result<TransferFunction> {
    if a.den == b.den {
        return TransferFunction::new(poly_add(&a.num, &b.num), a.den.clone());
    }
    TransferFunction::new(
        poly_add(&poly_mul(&a.num, &b.den), &poly_mul(&b.num, &a.den)),
        poly_mul(&a.den, &b.den),
    )
}

/// `a - b`; shares the denominator when both are equal.
pub fn tf_sub(a: &TransferFunction, b: &TransferFunction) -> Result<TransferFunction> {
    if a.den == b.den {
        return TransferFunction::new(poly_sub(&a.num, &b.num), a.den.clone());
    }
    TransferFunction::new(
        poly_sub(&poly_mul(&a.num, &b.den), &poly_mul(&b.num, &a.den)),
        poly_mul(&a.den, &b.den),
    )
}

/// `1 - a`.
pub fn tf_one_minus(a: &TransferFunction) -> Result<TransferFunction> {
    TransferFunction::new(poly_sub(&a.den, &a.num), a.den.clone())
}

/// `c * a` for a scalar `c`.
pub fn tf_scale(a: &TransferFunction, c: f64) -> Result<TransferFunction> {
    TransferFunction::new(a.num.iter().map(|b| b * c).collect(), a.den.clone())
}

/// Complementary sensitivity `GC / (1 + GC)`.
pub fn closed_loop(g: &TransferFunction, c: &TransferFunction) -> Result<TransferFunction> {
    let open_num = poly_mul(&g.num, &c.num);
    let den = poly_add(&poly_mul(&g.den, &c.den), &open_num);
    TransferFunction::new(open_num, den)
        .map_err(|e| e.context("closed loop 1 + GC is degenerate"))
}

/// True iff every pole has modulus below `1 - margin`.
pub fn is_stable_with_margin(tf: &TransferFunction, margin: f64) -> bool {
    tf.poles().iter().all(|p| p.norm() < 1.0 - margin)
}

pub fn is_stable(tf: &TransferFunction) -> bool {
    is_stable_with_margin(tf, STABILITY_MARGIN)
}

/// Truncated impulse response with an estimate of the neglected energy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpulseResponse {
    taps: Vec<f64>,
    tail_energy_bound: f64,
}

impl ImpulseResponse {
    /// Wraps explicit taps, estimating the tail from their decay.
    pub fn from_taps(taps: Vec<f64>) -> Self {
        assert!(!taps.is_empty(), "impulse response needs at least one tap");
        let tail_energy_bound = tail_energy(&taps);
        ImpulseResponse {
            taps,
            tail_energy_bound,
        }
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn into_taps(self) -> Vec<f64> {
        self.taps
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn tail_energy_bound(&self) -> f64 {
        self.tail_energy_bound
    }

    /// Sum of squared taps.
    pub fn energy(&self) -> f64 {
        self.taps.iter().map(|h| h * h).sum()
    }

    /// Tail bound relative to the stored energy; zero for an all-zero response.
    pub fn tail_ratio(&self) -> f64 {
        let e = self.energy();
        if self.tail_energy_bound == 0.0 {
            0.0
        } else if e == 0.0 {
            f64::INFINITY
        } else {
            self.tail_energy_bound / e
        }
    }

    pub fn is_converged(&self, tail_tol: f64) -> bool {
        self.tail_ratio() <= tail_tol
    }
}

/// Geometric extrapolation of the energy past the last tap.
///
/// Compares the energy of the last decade of taps with the decade before it;
/// a ratio `r < 1` per decade gives the tail `E_last * r / (1 - r)`.
pub fn tail_energy(taps: &[f64]) -> f64 {
    let len = taps.len();
    let decade = (len / 10).max(1);
    let last: f64 = taps[len - decade..].iter().map(|h| h * h).sum();
    if last == 0.0 {
        return 0.0;
    }
    if len < 2 * decade {
        return f64::INFINITY;
    }
    let prev: f64 = taps[len - 2 * decade..len - decade]
        .iter()
        .map(|h| h * h)
        .sum();
    if prev == 0.0 {
        return f64::INFINITY;
    }
    let r = last / prev;
    if r < 1.0 {
        last * r / (1.0 - r)
    } else {
        f64::INFINITY
    }
}

/// First `len` taps of the impulse response of `tf`.
pub fn impulse_response(tf: &TransferFunction, len: usize) -> ImpulseResponse {
    assert!(len >= 1, "truncation length must be positive");
    let mut impulse = vec![0.0; len];
    impulse[0] = 1.0;
    let taps = lsim(tf, &impulse);
    if tf.den().len() == 1 {
        // FIR: the tail is known exactly
        let tail = tf.num().iter().skip(len).map(|b| b * b).sum();
        return ImpulseResponse {
            taps,
            tail_energy_bound: tail,
        };
    }
    ImpulseResponse::from_taps(taps)
}

/// Truncation policy for norm computations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Truncation {
    pub initial: usize,
    pub max: usize,
    pub tail_tol: f64,
}

impl Default for Truncation {
    fn default() -> Self {
        Truncation {
            initial: 2000,
            max: 16000,
            tail_tol: 1e-12,
        }
    }
}

impl Truncation {
    /// Fixed length with the default tail tolerance.
    pub fn fixed(len: usize) -> Self {
        Truncation {
            initial: len,
            max: len,
            ..Default::default()
        }
    }

    /// Lengths tried in order: `initial`, doubled until `max`.
    pub fn lengths(&self) -> impl Iterator<Item = usize> + '_ {
        std::iter::successors(Some(self.initial.max(1)), move |&l| {
            (l < self.max).then(|| (2 * l).min(self.max))
        })
    }
}

/// Impulse response long enough for its tail ratio to meet `trunc.tail_tol`.
pub fn converged_impulse_response(
    tf: &TransferFunction,
    trunc: &Truncation,
    what: &str,
) -> Result<ImpulseResponse> {
    let mut last_len = trunc.initial;
    for len in trunc.lengths() {
        let ir = impulse_response(tf, len);
        if ir.is_converged(trunc.tail_tol) {
            return Ok(ir);
        }
        last_len = len;
    }
    Err(Error::NonDecaying {
        what: what.to_string(),
        max_len: last_len,
    })
}

/// Squared 2-norm of the stored taps; error bounded by the tail estimate.
pub fn h2_norm_sq(ir: &ImpulseResponse) -> Result<f64> {
    if !ir.tail_energy_bound.is_finite() {
        return Err(Error::NonDecaying {
            what: "impulse response".into(),
            max_len: ir.len(),
        });
    }
    Ok(ir.energy())
}

/// Input/output record of an open-loop experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub u: Vec<f64>,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn new(u: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if u.len() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: u.len(),
                got: y.len(),
            });
        }
        if u.is_empty() {
            return Err(Error::InvalidArgument("dataset must not be empty".into()));
        }
        Ok(Dataset { u, y })
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    /// Reads a two-column `u,y` CSV with a header line.
    pub fn read_csv(path: &std::path::Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
        let (mut u, mut y) = (Vec::new(), Vec::new());
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            if rec.len() != 2 {
                return Err(Error::Parse {
                    line,
                    message: format!("expected 2 columns, found {}", rec.len()),
                });
            }
            let parse = |s: &str| {
                s.trim().parse::<f64>().map_err(|e| Error::Parse {
                    line,
                    message: format!("{s:?}: {e}"),
                })
            };
            u.push(parse(&rec[0])?);
            y.push(parse(&rec[1])?);
        }
        Dataset::new(u, y)
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["u", "y"])?;
        for (u, y) in self.u.iter().zip(&self.y) {
            w.write_record([u.to_string(), y.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Noise-free response to `u` from zero initial conditions.
pub fn lsim(tf: &TransferFunction, u: &[f64]) -> Vec<f64> {
    let b = tf.num();
    let a = tf.den();
    let mut y = vec![0.0; u.len()];
    for t in 0..u.len() {
        let mut acc = 0.0;
        for (i, &bi) in b.iter().enumerate().take(t + 1) {
            acc += bi * u[t - i];
        }
        for (j, &aj) in a.iter().enumerate().skip(1).take(t) {
            acc -= aj * y[t - j];
        }
        y[t] = acc;
    }
    y
}

/// `y = tf(q) u + v` with `v` i.i.d. `N(0, noise_std^2)` drawn from `seed`.
pub fn simulate(tf: &TransferFunction, u: &[f64], noise_std: f64, seed: u64) -> Result<Dataset> {
    if !is_stable(tf) {
        return Err(Error::Unstable("cannot simulate an unstable system".into()));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise standard deviation must be finite and nonnegative, got {noise_std}"
        )));
    }
    let mut y = lsim(tf, u);
    if noise_std > 0.0 {
        let mut rng = rng::substream(seed, rng::tag::NOISE);
        for yt in y.iter_mut() {
            let v: f64 = StandardNormal.sample(&mut rng);
            *yt += noise_std * v;
        }
    }
    Dataset::new(u.to_vec(), y)
}

/// Unit-variance white Gaussian excitation of length `len`.
pub fn white_input(len: usize, std: f64, seed: u64) -> Vec<f64> {
    let mut rng = rng::substream(seed, rng::tag::INPUT);
    (0..len)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            std * v
        })
        .collect()
}
