//! Joint maximum-likelihood training of the proposal and energy networks.
//!
//! For a batch with `n` unobserved terms (`n_c` of them continuous) the loss is
//!
//! ```text
//! L = -(Σ log q + Σ_cont log p) / n + λ · Σ_cont (log p - sg(log q))² / n_c
//! ```
//!
//! Categorical terms appear once, through their logits. Proposal samples and
//! their densities inside `log Ẑ` are constants, and the penalty does not
//! reach the proposal network (not even through the latent codes).

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, Split};
use crate::error::{AceError, Result};
use crate::masking::{restrict_to_available, sample_bernoulli_mask, sample_uniform_cardinality_mask, MaskedInstance};
use crate::model::{AceModel, EvalOptions, ModelConfig, Term, TermCoefficients};
use crate::nn::{AdamState, Mode};
use crate::rng::{derive_seed, seeded, substream, AceRng};

/// All training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub dropout: f64,
    pub mse_penalty: f64,
    pub steps: u64,
    pub warmup_steps: u64,
    pub noise_scale: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub proposal_hidden: usize,
    pub proposal_blocks: usize,
    pub latent_dim: usize,
    pub energy_hidden: usize,
    pub energy_blocks: usize,
    pub importance_samples: usize,
    pub components: usize,
    pub energy_max: f64,
    pub scale_floor: f64,
    pub seed: u64,
    /// Steps between validation passes.
    pub validation_every: u64,
    /// Validation rows used per pass (0 uses the whole split).
    pub validation_rows: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        TrainConfig {
            dropout: 0.0,
            mse_penalty: 0.0,
            steps: 5000,
            warmup_steps: 500,
            noise_scale: 0.001,
            learning_rate: 1e-3,
            batch_size: 128,
            proposal_hidden: m.proposal_hidden,
            proposal_blocks: m.proposal_blocks,
            latent_dim: m.latent_dim,
            energy_hidden: m.energy_hidden,
            energy_blocks: m.energy_blocks,
            importance_samples: 20,
            components: m.components,
            energy_max: m.energy_max,
            scale_floor: m.scale_floor,
            seed: 0,
            validation_every: 500,
            validation_rows: 1024,
        }
    }
}

/// Names accepted by [`TrainConfig::preset`].
pub const PRESETS: [&str; 6] = ["power", "gas", "hepmass", "miniboone", "bsds", "adult"];

impl TrainConfig {
    /// Published per-dataset hyperparameters. Energy networks use 128 hidden
    /// units in 4 blocks, which the published table leaves unspecified.
    pub fn preset(name: &str) -> Result<Self> {
        // (dropout, mse, steps, warmup, noise, lr, batch, hidden)
        let (dropout, mse, steps, warmup, noise, lr, batch, hidden) = match name {
            "power" => (0.2, 1.0, 1_600_000, 5000, 0.003, 1e-4, 512, 512),
            "gas" => (0.0, 0.0, 1_000_000, 5000, 0.001, 1e-3, 2048, 512),
            "hepmass" => (0.2, 0.0, 1_000_000, 5000, 0.001, 5e-4, 2048, 512),
            "miniboone" => (0.5, 0.0, 15_000, 100, 0.005, 1e-3, 2048, 512),
            "bsds" => (0.2, 0.0, 1_000_000, 5000, 0.001, 1e-3, 2048, 1024),
            "adult" => (0.5, 1.0, 40_000, 2500, 0.005, 5e-4, 1024, 512),
            other => {
                return Err(AceError::config(format!(
                    "unknown preset `{other}` (known: {})",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(TrainConfig {
            dropout,
            mse_penalty: mse,
            steps,
            warmup_steps: warmup,
            noise_scale: noise,
            learning_rate: lr,
            batch_size: batch,
            proposal_hidden: hidden,
            proposal_blocks: 4,
            latent_dim: 64,
            energy_hidden: 128,
            energy_blocks: 4,
            importance_samples: 20,
            validation_every: 5000,
            ..TrainConfig::default()
        })
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            components: self.components,
            latent_dim: self.latent_dim,
            scale_floor: self.scale_floor,
            energy_max: self.energy_max,
            proposal_hidden: self.proposal_hidden,
            proposal_blocks: self.proposal_blocks,
            energy_hidden: self.energy_hidden,
            energy_blocks: self.energy_blocks,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, msg: &str| Err(AceError::config(format!("{name}: {msg}")));
        if !(0.0..1.0).contains(&self.dropout) {
            return field("dropout", "must lie in [0, 1)");
        }
        if !(self.mse_penalty >= 0.0 && self.mse_penalty.is_finite()) {
            return field("mse_penalty", "must be non-negative");
        }
        if self.steps > 0 && self.warmup_steps > 0 && self.warmup_steps >= self.steps {
            return field("warmup_steps", "must be smaller than steps");
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return field("noise_scale", "must be non-negative");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return field("learning_rate", "must be positive");
        }
        if self.batch_size == 0 {
            return field("batch_size", "must be positive");
        }
        if self.importance_samples == 0 {
            return field("importance_samples", "must be positive");
        }
        if self.validation_every == 0 {
            return field("validation_every", "must be positive");
        }
        self.model_config().validate()
    }
}

/// Learning rate after `step` of `config.steps` steps, linearly annealed to zero.
pub fn lr_at(step: u64, config: &TrainConfig) -> f64 {
    if config.steps == 0 {
        return config.learning_rate;
    }
    let frac = (step.min(config.steps)) as f64 / config.steps as f64;
    config.learning_rate * (1.0 - frac)
}

/// Quantities reported by one training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    /// Mean `log q` per unobserved term.
    pub proposal_ll: f64,
    /// Mean `log p` per unobserved term (NaN during warm-up).
    pub energy_ll: f64,
    pub penalty: f64,
    pub lr: f64,
    pub terms: usize,
    /// True when the batch had no unobserved terms.
    pub skipped: bool,
}

/// Networks, optimizer states, and bookkeeping of a training run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: AceModel,
    pub proposal_adam: AdamState,
    pub energy_adam: AdamState,
    pub step: u64,
    pub best_validation_ll: Option<f64>,
    pub best_step: Option<u64>,
    pub best_model: Option<AceModel>,
    rng: AceRng,
    dropout_rng: AceRng,
}

impl TrainState {
    pub fn new(model: AceModel, seed: u64) -> Self {
        TrainState {
            proposal_adam: AdamState::new(model.proposal_net()),
            energy_adam: AdamState::new(model.energy_net()),
            model,
            step: 0,
            best_validation_ll: None,
            best_step: None,
            best_model: None,
            rng: substream(derive_seed(seed, 0x7EA1), 1),
            dropout_rng: substream(derive_seed(seed, 0x7EA1), 2),
        }
    }
}

/// Terms for every unobserved feature of every instance.
pub fn unobserved_terms(batch: &[MaskedInstance]) -> Vec<Term> {
    let mut terms = Vec::new();
    for (c, inst) in batch.iter().enumerate() {
        for dim in inst.mask.unobserved() {
            terms.push(Term {
                context: c,
                dim,
                value: inst.values[dim],
                key: terms.len() as u64,
            });
        }
    }
    terms
}

/// Adds `N(0, scale²)` noise to continuous values that are present.
pub fn add_noise(model: &AceModel, batch: &mut [MaskedInstance], scale: f64, rng: &mut AceRng) {
    if scale == 0.0 {
        return;
    }
    let schema = model.schema();
    for inst in batch {
        for i in 0..inst.values.len() {
            if schema.is_continuous(i) && !inst.mask.missing()[i] {
                let z: f64 = StandardNormal.sample(rng);
                inst.values[i] += scale * z;
            }
        }
    }
}

/// One optimization step on a batch whose masks are already sampled and
/// restricted to available features. Noise is added here.
pub fn training_step(state: &mut TrainState, batch: &[MaskedInstance], config: &TrainConfig) -> Result<StepMetrics> {
    let step = state.step;
    state.step += 1;
    let lr = lr_at(step, config);
    let warm = step < config.warmup_steps;

    let mut batch = batch.to_vec();
    add_noise(&state.model, &mut batch, config.noise_scale, &mut state.rng);
    let terms = unobserved_terms(&batch);
    let mut metrics = StepMetrics {
        step,
        loss: 0.0,
        proposal_ll: f64::NAN,
        energy_ll: f64::NAN,
        penalty: 0.0,
        lr,
        terms: terms.len(),
        skipped: terms.is_empty(),
    };
    if terms.is_empty() {
        return Ok(metrics);
    }

    let opts = EvalOptions {
        samples: config.importance_samples,
        mode: Mode::Train,
        dropout: config.dropout,
        energy: !warm,
        trace: true,
        seed: derive_seed(derive_seed(config.seed, 0x5A3B), step),
    };
    let eval = state
        .model
        .evaluate_terms(&batch, &terms, &opts, None, &mut state.dropout_rng)?;

    let n = terms.len() as f64;
    let n_cont = (0..terms.len()).filter(|&t| eval.is_continuous(t)).count();
    let mut coef = TermCoefficients::zeros(terms.len());
    let mut sum_q = 0.0;
    let mut sum_p_cont = 0.0;
    let mut sum_p_all = 0.0;
    let mut sq = 0.0;
    for t in 0..terms.len() {
        sum_q += eval.log_q[t];
        coef.log_q[t] = -1.0 / n;
        if eval.is_continuous(t) {
            if !warm {
                let diff = eval.log_p[t] - eval.log_q[t];
                sum_p_cont += eval.log_p[t];
                sum_p_all += eval.log_p[t];
                sq += diff * diff;
                coef.log_p[t] = -1.0 / n;
                coef.log_p_energy_only[t] = 2.0 * config.mse_penalty * diff / n_cont as f64;
            }
        } else {
            sum_p_all += eval.log_p[t];
        }
    }
    let penalty = if !warm && n_cont > 0 { sq / n_cont as f64 } else { 0.0 };
    let loss = -(sum_q + sum_p_cont) / n + config.mse_penalty * penalty;
    metrics.loss = loss;
    metrics.proposal_ll = sum_q / n;
    metrics.energy_ll = if warm { f64::NAN } else { sum_p_all / n };
    metrics.penalty = penalty;
    if !loss.is_finite() {
        return Err(AceError::NonFinite(format!("loss is {loss} at step {step}")));
    }

    let grads = state.model.backward_terms(&terms, &eval, &coef)?;
    if !grads.proposal.is_finite() || grads.energy.as_ref().is_some_and(|g| !g.is_finite()) {
        return Err(AceError::NonFinite(format!("gradient is not finite at step {step}")));
    }
    state
        .proposal_adam
        .step(state.model.proposal_net_mut(), &grads.proposal, lr)?;
    if let Some(g) = &grads.energy {
        state.energy_adam.step(state.model.energy_net_mut(), g, lr)?;
    }
    Ok(metrics)
}

/// Mean over instances of `Σ_{i ∈ u} log p(x_i | x_o)` (no autoregression),
/// with observation masks drawn from Bernoulli(0.5) under a fixed seed.
pub fn validation_ll(model: &AceModel, split: &Split, config: &TrainConfig) -> Result<f64> {
    let n = if config.validation_rows == 0 {
        split.len()
    } else {
        split.len().min(config.validation_rows)
    };
    if n == 0 {
        return Err(AceError::config("validation split is empty"));
    }
    let mut rng = seeded(derive_seed(config.seed, 0x0A11));
    let mut batch = Vec::with_capacity(n);
    for r in 0..n {
        let mask = sample_bernoulli_mask(model.dims(), 0.5, &mut rng)?;
        let mask = restrict_to_available(&mask, &split.missing[r])?;
        batch.push(MaskedInstance::new(split.rows[r].clone(), mask)?);
    }
    let mut total = 0.0;
    let opts = EvalOptions::inference(config.importance_samples, derive_seed(config.seed, 0x0A12));
    for chunk in batch.chunks(512) {
        let terms = unobserved_terms(chunk);
        if terms.is_empty() {
            continue;
        }
        let eval = model.evaluate_terms(chunk, &terms, &opts, None, &mut seeded(0))?;
        total += eval.log_p.iter().sum::<f64>();
    }
    Ok(total / n as f64)
}

/// Receives progress during [`train`].
pub trait TrainObserver {
    fn on_step(&mut self, _metrics: &StepMetrics) {}
    fn on_validation(&mut self, _step: u64, _ll: f64, _improved: bool) {}
}

impl TrainObserver for () {}

/// Draws training batches epoch by epoch.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    fn new(n: usize) -> Self {
        BatchSampler {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self, size: usize, rng: &mut AceRng) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            let take = (size - out.len()).min(self.order.len() - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}

/// Trains a model and returns a checkpoint of the weights with the highest
/// validation likelihood (the initialization when `steps` is zero).
pub fn train<O: TrainObserver>(dataset: &Dataset, config: &TrainConfig, observer: &mut O) -> Result<Checkpoint> {
    config.validate()?;
    if dataset.train.is_empty() {
        return Err(AceError::config("training split is empty"));
    }
    let model = AceModel::new(dataset.schema.clone(), config.model_config(), config.seed)?;
    let mut state = TrainState::new(model, config.seed);
    let mut sampler = BatchSampler::new(dataset.train.len());
    let mut batch_rng = substream(derive_seed(config.seed, 0xBA7C), 1);
    let d = dataset.dims();
    let batch_size = config.batch_size.min(dataset.train.len());
    let mut nonfinite_streak = 0;

    for step in 0..config.steps {
        let idx = sampler.next(batch_size, &mut batch_rng);
        let mut batch = Vec::with_capacity(idx.len());
        for &r in &idx {
            let mask = sample_uniform_cardinality_mask(d, &mut batch_rng)?;
            let mask = restrict_to_available(&mask, &dataset.train.missing[r])?;
            batch.push(MaskedInstance::new(dataset.train.rows[r].clone(), mask)?);
        }
        match training_step(&mut state, &batch, config) {
            Ok(m) => {
                nonfinite_streak = 0;
                observer.on_step(&m);
            }
            Err(AceError::NonFinite(msg)) => {
                nonfinite_streak += 1;
                if nonfinite_streak >= 2 {
                    return Err(AceError::Training(format!(
                        "two consecutive non-finite steps; last: {msg}; proposal finite: {}, energy finite: {}",
                        state.model.proposal_net().is_finite(),
                        state.model.energy_net().is_finite()
                    )));
                }
                continue;
            }
            Err(e) => return Err(e),
        }

        let done = step + 1 == config.steps;
        let past_warmup = step + 1 > config.warmup_steps;
        if done || (past_warmup && (step + 1) % config.validation_every == 0) {
            let ll = validation_ll(&state.model, dataset.val_or_train(), config)?;
            let improved = ll.is_finite() && state.best_validation_ll.is_none_or(|b| ll > b);
            if improved {
                state.best_validation_ll = Some(ll);
                state.best_step = Some(step + 1);
                state.best_model = Some(state.model.clone());
            }
            observer.on_validation(step + 1, ll, improved);
        }
    }

    let model = state.best_model.take().unwrap_or_else(|| state.model.clone());
    Ok(Checkpoint {
        model,
        stats: dataset.stats.clone(),
        train_config: config.clone(),
        best_validation_ll: state.best_validation_ll,
        best_step: state.best_step,
        steps_completed: state.step,
        seed_lineage: vec![config.seed],
    })
}

impl Dataset {
    /// The validation split, or the training split when there is none.
    fn val_or_train(&self) -> &Split {
        if self.val.is_empty() {
            &self.train
        } else {
            &self.val
        }
    }
}
