//! Proposal distributions: per-dimension Gaussian mixtures for continuous
//! features and categoricals for discrete ones.
//!
//! The proposal network emits, for every feature, one head of raw outputs:
//!
//! ```text
//! continuous:   [K logits | K means | K raw scales | latent]
//! categorical:  [C logits | latent]
//! ```
//!
//! Scales are `softplus(raw) + floor`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{AceError, Result};
use crate::math::{log_softmax, logsumexp, normal_log_pdf, softmax, softplus};

/// Default number of mixture components.
pub const DEFAULT_COMPONENTS: usize = 10;
/// Default lower bound on component scales.
pub const DEFAULT_SCALE_FLOOR: f64 = 1e-3;

/// Draws an index from unnormalized log-weights by inverse CDF.
pub(crate) fn sample_log_weights<R: Rng + ?Sized>(log_weights: &[f64], rng: &mut R) -> usize {
    let lse = logsumexp(log_weights);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, lw) in log_weights.iter().enumerate() {
        acc += (lw - lse).exp();
        if u < acc {
            return i;
        }
    }
    // Rounding can leave `acc` a hair under one.
    log_weights
        .iter()
        .rposition(|w| w.is_finite())
        .unwrap_or(log_weights.len() - 1)
}

/// Mixture of one-dimensional Gaussians (`ω`).
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    logits: Vec<f64>,
    means: Vec<f64>,
    scales: Vec<f64>,
}

/// Gradient of a mixture log-density with respect to its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureGrad {
    pub logits: Vec<f64>,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl MixtureParams {
    pub fn new(logits: Vec<f64>, means: Vec<f64>, scales: Vec<f64>) -> Result<Self> {
        let k = logits.len();
        if k == 0 || means.len() != k || scales.len() != k {
            return Err(AceError::usage(format!(
                "mixture needs matching non-empty parameter vectors, got {}/{}/{}",
                k,
                means.len(),
                scales.len()
            )));
        }
        if scales.iter().any(|s| !(s.is_finite() && *s > 0.0))
            || logits.iter().chain(&means).any(|v| !v.is_finite())
        {
            return Err(AceError::usage("mixture parameters must be finite with positive scales"));
        }
        Ok(MixtureParams {
            logits,
            means,
            scales,
        })
    }

    /// Builds a mixture from a raw head slice `[logits | means | raw scales]`.
    pub fn from_raw(raw: &[f64], components: usize, scale_floor: f64) -> Self {
        debug_assert!(raw.len() >= 3 * components);
        MixtureParams {
            logits: raw[..components].to_vec(),
            means: raw[components..2 * components].to_vec(),
            scales: raw[2 * components..3 * components]
                .iter()
                .map(|&r| softplus(r) + scale_floor)
                .collect(),
        }
    }

    /// A single Gaussian.
    pub fn gaussian(mean: f64, scale: f64) -> Result<Self> {
        MixtureParams::new(vec![0.0], vec![mean], vec![scale])
    }

    pub fn components(&self) -> usize {
        self.logits.len()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn weights(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    /// `ln Σ_k π_k N(x; μ_k, σ_k²)`.
    pub fn log_pdf(&self, x: f64) -> f64 {
        let log_w = log_softmax(&self.logits);
        let terms: Vec<f64> = (0..self.components())
            .map(|k| log_w[k] + normal_log_pdf(x, self.means[k], self.scales[k]))
            .collect();
        logsumexp(&terms)
    }

    /// Log-density and its gradient with respect to logits, means, and scales.
    pub fn log_pdf_grad(&self, x: f64) -> (f64, MixtureGrad) {
        let k = self.components();
        let log_w = log_softmax(&self.logits);
        let terms: Vec<f64> = (0..k)
            .map(|j| log_w[j] + normal_log_pdf(x, self.means[j], self.scales[j]))
            .collect();
        let lp = logsumexp(&terms);
        let mut grad = MixtureGrad {
            logits: vec![0.0; k],
            means: vec![0.0; k],
            scales: vec![0.0; k],
        };
        for j in 0..k {
            let resp = (terms[j] - lp).exp();
            let s = self.scales[j];
            let diff = x - self.means[j];
            grad.logits[j] = resp - log_w[j].exp();
            grad.means[j] = resp * diff / (s * s);
            grad.scales[j] = resp * (diff * diff / (s * s * s) - 1.0 / s);
        }
        (lp, grad)
    }

    /// Ancestral sample: component, then Gaussian.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let k = sample_log_weights(&self.logits, rng);
        let z: f64 = StandardNormal.sample(rng);
        self.means[k] + self.scales[k] * z
    }

    /// Analytic mean `Σ_k π_k μ_k`.
    pub fn mean(&self) -> f64 {
        self.weights()
            .iter()
            .zip(&self.means)
            .map(|(w, m)| w * m)
            .sum()
    }

    /// Smallest and largest component mean, and the largest scale.
    pub fn envelope(&self) -> (f64, f64, f64) {
        let lo = self.means.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s = self.scales.iter().copied().fold(0.0, f64::max);
        (lo, hi, s)
    }
}

/// Categorical distribution over a discrete feature, parameterized by logits.
///
/// The logits double as negative energies, so this distribution is both the
/// proposal and the model for discrete features.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalParams {
    logits: Vec<f64>,
}

impl CategoricalParams {
    pub fn new(logits: Vec<f64>) -> Result<Self> {
        if logits.len() < 2 || logits.iter().any(|l| !l.is_finite()) {
            return Err(AceError::usage("categorical needs at least two finite logits"));
        }
        Ok(CategoricalParams { logits })
    }

    /// Wraps network logits without validation.
    pub(crate) fn from_raw(raw: &[f64]) -> Self {
        CategoricalParams { logits: raw.to_vec() }
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn categories(&self) -> usize {
        self.logits.len()
    }

    pub fn log_probs(&self) -> Vec<f64> {
        log_softmax(&self.logits)
    }

    pub fn probs(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    /// `ℓ_c − logsumexp(ℓ)`; `-inf` for an out-of-range category.
    pub fn log_prob(&self, category: usize) -> f64 {
        match self.logits.get(category) {
            Some(l) => l - logsumexp(&self.logits),
            None => f64::NEG_INFINITY,
        }
    }

    /// Gradient of `log_prob(category)` with respect to the logits.
    pub fn log_prob_grad(&self, category: usize) -> Vec<f64> {
        let mut g: Vec<f64> = self.probs().into_iter().map(|p| -p).collect();
        g[category] += 1.0;
        g
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_log_weights(&self.logits, rng)
    }

    /// Most probable category (lowest index on ties).
    pub fn mode(&self) -> usize {
        let mut best = 0;
        for (i, l) in self.logits.iter().enumerate() {
            if *l > self.logits[best] {
                best = i;
            }
        }
        best
    }
}

/// Proposal parameters for one feature, plus its latent code `γ`.
#[derive(Debug, Clone, PartialEq)]
pub enum DimensionProposal {
    Continuous {
        mixture: MixtureParams,
        latent: Vec<f64>,
    },
    Categorical {
        categorical: CategoricalParams,
        latent: Vec<f64>,
    },
}

impl DimensionProposal {
    pub fn latent(&self) -> &[f64] {
        match self {
            DimensionProposal::Continuous { latent, .. } => latent,
            DimensionProposal::Categorical { latent, .. } => latent,
        }
    }

    pub fn mixture(&self) -> Option<&MixtureParams> {
        match self {
            DimensionProposal::Continuous { mixture, .. } => Some(mixture),
            DimensionProposal::Categorical { .. } => None,
        }
    }

    pub fn categorical(&self) -> Option<&CategoricalParams> {
        match self {
            DimensionProposal::Categorical { categorical, .. } => Some(categorical),
            DimensionProposal::Continuous { .. } => None,
        }
    }

    /// Proposal log-likelihood of `value` (a category index for discrete features).
    pub fn log_prob(&self, value: f64) -> f64 {
        match self {
            DimensionProposal::Continuous { mixture, .. } => mixture.log_pdf(value),
            DimensionProposal::Categorical { categorical, .. } => categorical.log_prob(value as usize),
        }
    }
}

/// Proposal output for every feature of one instance. Consumers read only
/// the unobserved features.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalOutput {
    pub dims: Vec<DimensionProposal>,
}

impl ProposalOutput {
    pub fn dim(&self, i: usize) -> &DimensionProposal {
        &self.dims[i]
    }
}
