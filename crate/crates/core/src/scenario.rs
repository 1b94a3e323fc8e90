//! Scenario sample-size bound and truncated-Gaussian sampling of FIR systems
//! from an [`UncertaintySet`].

use nalgebra::DVector;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::sysid::UncertaintySet;

/// Minimum acceptable acceptance rate of the rejection sampler.
pub const MIN_ACCEPTANCE: f64 = 1e-3;
const PROBE_DRAWS: usize = 4096;
/// Per-sample cap on rejected draws.
const MAX_ATTEMPTS: usize = 1_000_000;

/// `ceil((2 / eps) (ln(1 / eta) + p))`.
pub fn required_scenarios(epsilon: f64, eta: f64, params: usize) -> Result<usize> {
    if !(epsilon > 0.0 && epsilon <= 1.0) || !(eta > 0.0 && eta < 1.0) || params == 0 {
        return Err(Error::InvalidArgument(format!(
            "need 0 < epsilon <= 1, 0 < eta < 1, p >= 1 (got {epsilon}, {eta}, {params})"
        )));
    }
    Ok(((2.0 / epsilon) * ((1.0 / eta).ln() + params as f64)).ceil() as usize)
}

/// Finite sample of FIR systems drawn from an uncertainty set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSet {
    pub seed: u64,
    #[serde(rename = "M")]
    pub count: usize,
    /// Radius of the generating ellipsoid.
    pub radius_sq: f64,
    /// Acceptance rate of the rejection sampler (accepted / drawn).
    pub acceptance_rate: f64,
    pub systems: Vec<Vec<f64>>,
}

impl ScenarioSet {
    pub fn len(&self) -> usize {
        self.systems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.systems.is_empty()
    }

    /// Checks every stored system against `uset`.
    pub fn verify(&self, uset: &UncertaintySet) -> Result<bool> {
        for g in &self.systems {
            if !uset.contains(g)? {
                return Ok(false);
            }
        }
        Ok(self.systems.len() == self.count)
    }
}

fn draw(uset: &UncertaintySet, rng: &mut impl rand::Rng) -> Vec<f64> {
    let c = uset.center();
    let z = DVector::from_fn(c.order(), |_, _| StandardNormal.sample(rng));
    (c.g_hat() + c.sigma_chol() * z).iter().copied().collect()
}

/// Draws `count` systems from `N(g_hat, Sigma)` restricted to the ellipsoid.
///
/// Sample `i` uses its own stream of `seed`, so the result does not depend
/// on the number of worker threads.
pub fn sample_scenarios(uset: &UncertaintySet, count: usize, seed: u64) -> Result<ScenarioSet> {
    if count == 0 {
        return Err(Error::InvalidArgument("scenario count must be positive".into()));
    }

    let mut probe = rng::substream(seed, rng::tag::PROBE);
    let mut hits = 0usize;
    for _ in 0..PROBE_DRAWS {
        if uset.contains(&draw(uset, &mut probe))? {
            hits += 1;
        }
    }
    let rate = hits as f64 / PROBE_DRAWS as f64;
    if rate < MIN_ACCEPTANCE {
        return Err(Error::LowAcceptance {
            rate,
            min: MIN_ACCEPTANCE,
        });
    }

    let drawn: Vec<(Vec<f64>, usize)> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::substream(seed, i as u64);
            for attempt in 1..=MAX_ATTEMPTS {
                let g = draw(uset, &mut rng);
                if uset.contains(&g)? {
                    return Ok((g, attempt));
                }
            }
            Err(Error::LowAcceptance {
                rate: 1.0 / MAX_ATTEMPTS as f64,
                min: MIN_ACCEPTANCE,
            })
        })
        .collect::<Result<_>>()?;

    let attempts: usize = drawn.iter().map(|(_, a)| a).sum();
    let systems: Vec<Vec<f64>> = drawn.into_iter().map(|(g, _)| g).collect();
    Ok(ScenarioSet {
        seed,
        count,
        radius_sq: uset.radius_sq(),
        acceptance_rate: count as f64 / attempts as f64,
        systems,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lti::{simulate, white_input, TransferFunction};
    use crate::sysid::{least_squares_fir, uncertainty_set, RadiusRule};

    fn small_set(radius: Option<f64>) -> UncertaintySet {
        let u = white_input(120, 1.0, 11);
        let d = simulate(&TransferFunction::fir(&[0.5, 0.3, 0.1]), &u, 0.4, 11).unwrap();
        let est = least_squares_fir(&d, 4).unwrap();
        match radius {
            Some(r) => UncertaintySet::with_radius(est, r, 0.0).unwrap(),
            None => uncertainty_set(est, 0.01, RadiusRule::OrderScaled).unwrap(),
        }
    }

    #[test]
    fn bound_matches_direct_evaluation() {
        assert_eq!(required_scenarios(0.01, 0.05, 1).unwrap(), 800);
        assert_eq!(required_scenarios(0.01, 0.05, 6).unwrap(), 1800);
        let minimal = (2.0 * ((1.0f64 / 0.05).ln() + 1.0)).ceil() as usize;
        assert_eq!(required_scenarios(1.0, 0.05, 1).unwrap(), minimal);
        assert!(required_scenarios(0.0, 0.05, 1).is_err());
        assert!(required_scenarios(0.1, 1.0, 1).is_err());
    }

    #[test]
    fn samples_lie_inside_the_ellipsoid() {
        let uset = small_set(None);
        let s = sample_scenarios(&uset, 500, 3).unwrap();
        assert_eq!(s.len(), 500);
        for g in &s.systems {
            assert!(uset.center().mahalanobis_sq(g).unwrap() <= uset.radius_sq() + 1e-12);
        }
        assert!(s.verify(&uset).unwrap());
    }

    #[test]
    fn tiny_radius_is_rejected() {
        let uset = small_set(Some(1e-6));
        assert!(matches!(sample_scenarios(&uset, 10, 1), Err(Error::LowAcceptance { .. })));
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let uset = small_set(None);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| sample_scenarios(&uset, 200, 42).unwrap());
        let b = four.install(|| sample_scenarios(&uset, 200, 42).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn untruncated_mean_matches_center() {
        let uset = small_set(Some(1e12));
        let m = 5000;
        let s = sample_scenarios(&uset, m, 9).unwrap();
        assert_eq!(s.acceptance_rate, 1.0);
        let sigma = uset.center().sigma_hat();
        for k in 0..uset.order() {
            let mean = s.systems.iter().map(|g| g[k]).sum::<f64>() / m as f64;
            let se = (sigma[(k, k)] / m as f64).sqrt();
            assert!((mean - uset.center().g_hat()[k]).abs() < 4.0 * se);
        }
    }

    #[test]
    fn json_round_trip() {
        let s = sample_scenarios(&small_set(None), 5, 1).unwrap();
        let back: ScenarioSet = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }
}
