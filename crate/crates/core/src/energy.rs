//! Bounded energies and importance-sampled normalizers for one-dimensional
//! conditionals.

use rand::Rng;

use crate::error::{AceError, Result};
use crate::math::{logsumexp, sigmoid, softplus};
use crate::proposal::MixtureParams;

/// Default upper bound on energies.
pub const DEFAULT_ENERGY_MAX: f64 = 30.0;

/// `min(softplus(raw), max)`.
#[inline]
pub fn clip_energy(raw: f64, max: f64) -> f64 {
    softplus(raw).min(max)
}

/// Derivative of [`clip_energy`] with respect to `raw` (zero once clipped).
#[inline]
pub fn clip_energy_grad(raw: f64, max: f64) -> f64 {
    if softplus(raw) < max {
        sigmoid(raw)
    } else {
        0.0
    }
}

/// A tractable one-dimensional density used as an importance-sampling source.
pub trait Proposal1d {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64;
    fn log_pdf(&self, x: f64) -> f64;
}

impl Proposal1d for MixtureParams {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        MixtureParams::sample(self, rng)
    }

    fn log_pdf(&self, x: f64) -> f64 {
        MixtureParams::log_pdf(self, x)
    }
}

/// Importance-sampling estimate of `Z = ∫ exp(-E(x)) dx`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizerEstimate {
    /// `log Ẑ`.
    pub log_z: f64,
    /// Number of proposal samples drawn.
    pub samples: usize,
    /// The proposal samples.
    pub points: Vec<f64>,
    /// `-E(x_s) - log q(x_s)` per sample.
    pub log_weights: Vec<f64>,
    /// Samples whose proposal density underflowed and were dropped.
    pub excluded: usize,
}

impl NormalizerEstimate {
    /// `Ẑ` itself.
    pub fn estimate(&self) -> f64 {
        self.log_z.exp()
    }

    /// Self-normalized importance weights.
    pub fn normalized_weights(&self) -> Vec<f64> {
        normalized_weights(&self.log_weights)
    }
}

/// Softmax of log-weights; non-finite entries get weight zero. Falls back to
/// uniform weights when nothing is finite.
pub fn normalized_weights(log_weights: &[f64]) -> Vec<f64> {
    let finite: Vec<f64> = log_weights
        .iter()
        .map(|w| if w.is_finite() { *w } else { f64::NEG_INFINITY })
        .collect();
    let lse = logsumexp(&finite);
    if !lse.is_finite() {
        let n = log_weights.len() as f64;
        return vec![1.0 / n; log_weights.len()];
    }
    finite.iter().map(|w| (w - lse).exp()).collect()
}

/// `log((1/S') Σ exp(w_s))` over the finite log-weights, with `S'` their count.
///
/// Returns the estimate and how many entries were excluded.
pub fn log_mean_exp(log_weights: &[f64]) -> (f64, usize) {
    let finite: Vec<f64> = log_weights.iter().copied().filter(|w| w.is_finite()).collect();
    let excluded = log_weights.len() - finite.len();
    if finite.is_empty() {
        return (f64::NEG_INFINITY, excluded);
    }
    (logsumexp(&finite) - (finite.len() as f64).ln(), excluded)
}

/// Estimates the normalizer of `exp(-energy(x))` by sampling `proposal`.
///
/// `energy` receives all samples at once and returns one energy per sample.
pub fn estimate_normalizer<P, F, R>(
    energy: F,
    proposal: &P,
    samples: usize,
    rng: &mut R,
) -> Result<NormalizerEstimate>
where
    P: Proposal1d,
    F: FnOnce(&[f64]) -> Result<Vec<f64>>,
    R: Rng + ?Sized,
{
    if samples == 0 {
        return Err(AceError::usage("importance sample count must be at least 1"));
    }
    let points: Vec<f64> = (0..samples).map(|_| proposal.sample(rng)).collect();
    let energies = energy(&points)?;
    if energies.len() != samples {
        return Err(AceError::usage("energy function returned the wrong number of values"));
    }
    let log_weights: Vec<f64> = points
        .iter()
        .zip(&energies)
        .map(|(&x, &e)| {
            let lq = proposal.log_pdf(x);
            if lq.is_finite() {
                -e - lq
            } else {
                f64::NAN
            }
        })
        .collect();
    let (log_z, excluded) = log_mean_exp(&log_weights);
    Ok(NormalizerEstimate {
        log_z,
        samples,
        points,
        log_weights,
        excluded,
    })
}

/// `-E(x) - log Ẑ` for a single value.
pub fn conditional_log_likelihood<P, F, R>(
    energy: F,
    proposal: &P,
    value: f64,
    samples: usize,
    rng: &mut R,
) -> Result<f64>
where
    P: Proposal1d,
    F: Fn(&[f64]) -> Result<Vec<f64>>,
    R: Rng + ?Sized,
{
    let est = estimate_normalizer(&energy, proposal, samples, rng)?;
    let e = energy(&[value])?[0];
    Ok(-e - est.log_z)
}

/// Self-normalized importance estimate of `E[x]` under the energy distribution.
pub fn self_normalized_mean(points: &[f64], log_weights: &[f64]) -> f64 {
    normalized_weights(log_weights)
        .iter()
        .zip(points)
        .map(|(w, x)| w * x)
        .sum()
}
