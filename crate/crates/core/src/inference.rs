//! Test-time procedures: autoregressive likelihoods, proposal and energy
//! sampling, mean imputation, ordering-consistency fine-tuning, and the
//! normalizer audit.
//!
//! All values here are in standardized units (category indices for
//! categorical features).

use std::io::Write;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::energy::{estimate_normalizer, normalized_weights, self_normalized_mean};
use crate::error::{AceError, Result};
use crate::masking::{restrict_to_available, sample_uniform_cardinality_mask, Bitmask, MaskedInstance};
use crate::math::{linspace, mean_and_std, quantile_sorted, trapezoid};
use crate::model::{AceModel, EvalOptions, Term, TermCoefficients, TermEval};
use crate::nn::{AdamState, Mode};
use crate::proposal::{sample_log_weights, DimensionProposal, MixtureParams};
use crate::rng::{derive_seed, seeded, substream, AceRng};
use crate::data::Split;
use crate::training::{unobserved_terms, TrainConfig};

/// Where an ordering came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrderingSource {
    Random,
    Given,
    Ensemble,
}

/// A permutation of the unobserved features.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrderingPlan {
    pub order: Vec<usize>,
    pub source: OrderingSource,
}

impl OrderingPlan {
    /// A uniformly random permutation of `mask.unobserved()`.
    pub fn random<R: Rng + ?Sized>(mask: &Bitmask, rng: &mut R) -> Self {
        let mut order = mask.unobserved();
        order.shuffle(rng);
        OrderingPlan {
            order,
            source: OrderingSource::Random,
        }
    }

    /// Ascending feature order.
    pub fn natural(mask: &Bitmask) -> Self {
        OrderingPlan {
            order: mask.unobserved(),
            source: OrderingSource::Given,
        }
    }

    /// Checks that `order` is a permutation of the unobserved set.
    pub fn given(order: Vec<usize>, mask: &Bitmask) -> Result<Self> {
        let mut sorted = order.clone();
        sorted.sort_unstable();
        if sorted != mask.unobserved() {
            return Err(AceError::usage(format!(
                "ordering {order:?} is not a permutation of the unobserved features {:?}",
                mask.unobserved()
            )));
        }
        Ok(OrderingPlan {
            order,
            source: OrderingSource::Given,
        })
    }

    /// `count` independent random permutations.
    pub fn ensemble<R: Rng + ?Sized>(mask: &Bitmask, count: usize, rng: &mut R) -> Vec<Self> {
        (0..count)
            .map(|_| OrderingPlan {
                source: OrderingSource::Ensemble,
                ..OrderingPlan::random(mask, rng)
            })
            .collect()
    }
}

/// Log-likelihood of the unobserved values under the energy model and
/// under the proposal alone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainLikelihood {
    pub energy: f64,
    pub proposal: f64,
}

/// One autoregressive likelihood evaluation request.
#[derive(Debug, Clone, Copy)]
pub struct ChainQuery<'a> {
    /// Full data vector; values at unobserved features are the targets.
    pub values: &'a [f64],
    pub mask: &'a Bitmask,
    pub order: &'a [usize],
    /// Distinguishes this query's random streams from others sharing a seed.
    pub key: u64,
}

/// Contexts and terms of the chain `Σ_i log p(x_{u'_i} | x_o, x_{u'_<i})`.
fn chain_terms(query: &ChainQuery, first_context: usize, contexts: &mut Vec<MaskedInstance>, terms: &mut Vec<Term>) -> Result<()> {
    let mut mask = query.mask.clone();
    for (pos, &dim) in query.order.iter().enumerate() {
        if dim >= mask.len() || mask.is_observed(dim) || mask.missing()[dim] {
            return Err(AceError::usage(format!("ordering entry {dim} is not an unobserved feature")));
        }
        contexts.push(MaskedInstance::new(query.values.to_vec(), mask.clone())?);
        terms.push(Term {
            context: first_context + pos,
            dim,
            value: query.values[dim],
            key: derive_seed(query.key, pos as u64),
        });
        mask.observe(dim);
    }
    Ok(())
}

/// Largest number of energy rows assembled at once.
const MAX_BATCH_ROWS: usize = 262_144;

/// Autoregressive log-likelihoods of many queries. Every chain step of every
/// query is one term in a batched evaluation.
pub fn chain_log_likelihoods(model: &AceModel, queries: &[ChainQuery], samples: usize, seed: u64) -> Result<Vec<ChainLikelihood>> {
    let mut out = Vec::with_capacity(queries.len());
    let opts = EvalOptions::inference(samples, seed);
    let mut start = 0;
    while start < queries.len() {
        let mut contexts = Vec::new();
        let mut terms = Vec::new();
        let mut owners = Vec::new();
        let mut rows = 0;
        let mut end = start;
        while end < queries.len() && (end == start || rows + queries[end].order.len() * (samples + 1) <= MAX_BATCH_ROWS) {
            let before = terms.len();
            chain_terms(&queries[end], contexts.len(), &mut contexts, &mut terms)?;
            owners.extend(std::iter::repeat_n(end - start, terms.len() - before));
            rows += queries[end].order.len() * (samples + 1);
            end += 1;
        }
        let eval = model.evaluate_terms(&contexts, &terms, &opts, None, &mut seeded(0))?;
        let mut acc = vec![ChainLikelihood { energy: 0.0, proposal: 0.0 }; end - start];
        for (t, &o) in owners.iter().enumerate() {
            acc[o].energy += eval.log_p[t];
            acc[o].proposal += eval.log_q[t];
        }
        out.extend(acc);
        start = end;
    }
    Ok(out)
}

/// Autoregressive log-likelihood of `values[u]` given `values[o]`.
pub fn log_likelihood(
    model: &AceModel,
    values: &[f64],
    mask: &Bitmask,
    plan: &OrderingPlan,
    samples: usize,
    seed: u64,
) -> Result<ChainLikelihood> {
    OrderingPlan::given(plan.order.clone(), mask)?;
    let q = ChainQuery {
        values,
        mask,
        order: &plan.order,
        key: 0,
    };
    Ok(chain_log_likelihoods(model, &[q], samples, seed)?[0])
}

/// The same quantity as [`log_likelihood`], one chain step per network pass.
pub fn log_likelihood_sequential(
    model: &AceModel,
    values: &[f64],
    mask: &Bitmask,
    plan: &OrderingPlan,
    samples: usize,
    seed: u64,
) -> Result<ChainLikelihood> {
    OrderingPlan::given(plan.order.clone(), mask)?;
    let opts = EvalOptions::inference(samples, seed);
    let mut ctx = MaskedInstance::new(values.to_vec(), mask.clone())?;
    let mut total = ChainLikelihood { energy: 0.0, proposal: 0.0 };
    for (pos, &dim) in plan.order.iter().enumerate() {
        let term = Term {
            context: 0,
            dim,
            value: values[dim],
            key: derive_seed(0, pos as u64),
        };
        let eval = model.evaluate_terms(std::slice::from_ref(&ctx), &[term], &opts, None, &mut seeded(0))?;
        total.energy += eval.log_p[0];
        total.proposal += eval.log_q[0];
        ctx.mask.observe(dim);
    }
    Ok(total)
}

/// Likelihoods under several orderings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleLikelihood {
    pub mean: ChainLikelihood,
    pub per_ordering: Vec<ChainLikelihood>,
}

/// Evaluates every plan and averages the log-likelihoods. Chain position `i`
/// uses the same importance-sample stream under every ordering.
pub fn log_likelihood_ensemble(
    model: &AceModel,
    values: &[f64],
    mask: &Bitmask,
    plans: &[OrderingPlan],
    samples: usize,
    seed: u64,
) -> Result<EnsembleLikelihood> {
    if plans.is_empty() {
        return Err(AceError::usage("ensemble needs at least one ordering"));
    }
    for p in plans {
        OrderingPlan::given(p.order.clone(), mask)?;
    }
    let queries: Vec<ChainQuery> = plans
        .iter()
        .map(|p| ChainQuery {
            values,
            mask,
            order: &p.order,
            key: 0,
        })
        .collect();
    let per = chain_log_likelihoods(model, &queries, samples, seed)?;
    let n = per.len() as f64;
    let mean = ChainLikelihood {
        energy: per.iter().map(|c| c.energy).sum::<f64>() / n,
        proposal: per.iter().map(|c| c.proposal).sum::<f64>() / n,
    };
    Ok(EnsembleLikelihood { mean, per_ordering: per })
}

fn single_proposal(model: &AceModel, ctx: &MaskedInstance, dim: usize) -> Result<DimensionProposal> {
    Ok(model.propose(std::slice::from_ref(ctx))?.swap_remove(0).dims.swap_remove(dim))
}

/// Draws every unobserved feature in turn from the proposal, writing each
/// draw into the context before the next step.
pub fn sample_proposal(model: &AceModel, instance: &MaskedInstance, plan: &OrderingPlan, rng: &mut AceRng) -> Result<Vec<f64>> {
    Ok(sample_energy(model, instance, plan, 1, rng)?.values)
}

/// A completed vector from [`sample_energy`].
#[derive(Debug, Clone, PartialEq)]
pub struct EnergySample {
    pub values: Vec<f64>,
    /// Steps where every importance weight underflowed and the candidate was
    /// chosen uniformly.
    pub uniform_fallbacks: usize,
}

/// Sampling importance resampling along the chain: at each step `n`
/// proposal candidates are drawn and one is kept with probability
/// proportional to `exp(-E) / q`. Categorical features are drawn exactly.
///
/// Candidates come from `rng`; the resampling choice uses a separate stream
/// derived from it, so `n = 1` reproduces [`sample_proposal`] exactly.
pub fn sample_energy(model: &AceModel, instance: &MaskedInstance, plan: &OrderingPlan, n: usize, rng: &mut AceRng) -> Result<EnergySample> {
    if n == 0 {
        return Err(AceError::usage("energy sampling needs at least one candidate"));
    }
    OrderingPlan::given(plan.order.clone(), &instance.mask)?;
    let mut resample_rng = {
        let mut r = rng.clone();
        r.set_stream(rng.get_stream() ^ 0x5EED_5EED_5EED_5EED);
        r
    };
    let mut ctx = instance.clone();
    let mut fallbacks = 0;
    for &dim in &plan.order {
        let value = match single_proposal(model, &ctx, dim)? {
            DimensionProposal::Categorical { categorical, .. } => categorical.sample(rng) as f64,
            DimensionProposal::Continuous { mixture, latent } => {
                let candidates: Vec<f64> = (0..n).map(|_| mixture.sample(rng)).collect();
                if n == 1 {
                    candidates[0]
                } else {
                    let e = model.energies(&ctx, dim, &latent, &candidates)?;
                    let lw: Vec<f64> = candidates
                        .iter()
                        .zip(&e)
                        .map(|(&x, &e)| -e - mixture.log_pdf(x))
                        .map(|w| if w.is_finite() { w } else { f64::NEG_INFINITY })
                        .collect();
                    let pick = if lw.iter().all(|w| *w == f64::NEG_INFINITY) {
                        fallbacks += 1;
                        resample_rng.random_range(0..n)
                    } else {
                        sample_log_weights(&lw, &mut resample_rng)
                    };
                    candidates[pick]
                }
            }
        };
        ctx.values[dim] = value;
        ctx.mask.observe(dim);
    }
    Ok(EnergySample {
        values: ctx.values,
        uniform_fallbacks: fallbacks,
    })
}

/// Imputation of one feature.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Imputation {
    Observed { value: f64 },
    /// Missing and not imputed (excluded from the unobserved set).
    Missing,
    Continuous { proposal_mean: f64, energy_mean: f64 },
    Categorical { probabilities: Vec<f64>, mode: usize },
}

impl Imputation {
    /// The value to fill in: energy mean, mode, or the observed value.
    pub fn point(&self) -> f64 {
        match self {
            Imputation::Observed { value } => *value,
            Imputation::Missing => f64::NAN,
            Imputation::Continuous { energy_mean, .. } => *energy_mean,
            Imputation::Categorical { mode, .. } => *mode as f64,
        }
    }
}

/// Means of the one-dimensional conditionals `p(x_i | x_o)` for every
/// unobserved feature, from a single proposal pass (no autoregression).
pub fn impute_means(model: &AceModel, instance: &MaskedInstance, samples: usize, seed: u64) -> Result<Vec<Imputation>> {
    Ok(impute_means_batch(model, std::slice::from_ref(instance), samples, seed)?.swap_remove(0))
}

/// [`impute_means`] over many instances; instance `r` uses streams keyed by `r`.
pub fn impute_means_batch(model: &AceModel, instances: &[MaskedInstance], samples: usize, seed: u64) -> Result<Vec<Vec<Imputation>>> {
    if samples == 0 {
        return Err(AceError::usage("importance sample count must be at least 1"));
    }
    let proposals = model.propose(instances)?;
    let mut out = Vec::with_capacity(instances.len());
    for (r, (inst, prop)) in instances.iter().zip(&proposals).enumerate() {
        let mut row = Vec::with_capacity(model.dims());
        for dim in 0..model.dims() {
            if inst.mask.is_observed(dim) {
                row.push(Imputation::Observed { value: inst.values[dim] });
                continue;
            }
            if inst.mask.missing()[dim] {
                row.push(Imputation::Missing);
                continue;
            }
            row.push(match prop.dim(dim) {
                DimensionProposal::Categorical { categorical, .. } => Imputation::Categorical {
                    probabilities: categorical.probs(),
                    mode: categorical.mode(),
                },
                DimensionProposal::Continuous { mixture, latent } => {
                    let mut rng = substream(derive_seed(seed, r as u64), dim as u64);
                    let est = estimate_normalizer(|xs| model.energies(inst, dim, latent, xs), mixture, samples, &mut rng)?;
                    Imputation::Continuous {
                        proposal_mean: mixture.mean(),
                        energy_mean: self_normalized_mean(&est.points, &est.log_weights),
                    }
                }
            });
        }
        out.push(row);
    }
    Ok(out)
}

/// Settings for ordering-consistency fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    /// Weight of the across-ordering variance of `log p(x_u | x_o)`.
    pub variance_coef: f64,
    /// Orderings per instance.
    pub orderings: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            variance_coef: 1.0,
            orderings: 10,
            steps: 500,
            batch_size: 32,
            learning_rate: 1e-4,
            seed: 0,
        }
    }
}

/// Mean likelihood and mean across-ordering spread over a set of instances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConsistencyStats {
    /// Mean over instances of the mean over orderings of `log p(x_u | x_o)`.
    pub mean_ll: f64,
    /// Mean over instances of the standard deviation over orderings.
    pub mean_std: f64,
}

/// Measures how much the energy log-likelihood depends on the ordering.
pub fn ordering_consistency(
    model: &AceModel,
    instances: &[MaskedInstance],
    orderings: usize,
    samples: usize,
    seed: u64,
) -> Result<ConsistencyStats> {
    if instances.is_empty() || orderings == 0 {
        return Err(AceError::usage("need at least one instance and one ordering"));
    }
    let mut rng = seeded(derive_seed(seed, 0xC0C0));
    let mut sum_ll = 0.0;
    let mut sum_std = 0.0;
    for (i, inst) in instances.iter().enumerate() {
        let plans = OrderingPlan::ensemble(&inst.mask, orderings, &mut rng);
        let ens = log_likelihood_ensemble(model, &inst.values, &inst.mask, &plans, samples, derive_seed(seed, i as u64))?;
        let lls: Vec<f64> = ens.per_ordering.iter().map(|c| c.energy).collect();
        let (m, s) = mean_and_std(&lls);
        sum_ll += m;
        sum_std += s;
    }
    let n = instances.len() as f64;
    Ok(ConsistencyStats {
        mean_ll: sum_ll / n,
        mean_std: sum_std / n,
    })
}

/// Progress of one fine-tuning step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FinetuneMetrics {
    pub step: u64,
    pub base_loss: f64,
    /// Mean over the batch of the across-ordering variance.
    pub variance: f64,
}

/// Continues training with an added penalty on the variance of
/// `log p(x_u | x_o)` across random orderings (computed in log space).
///
/// The base objective is the training loss of `train_config` on the same
/// batch; the variance term backpropagates through every chain step.
pub fn consistency_finetune(
    model: &AceModel,
    train: &Split,
    train_config: &TrainConfig,
    config: &FinetuneConfig,
    mut observer: impl FnMut(&FinetuneMetrics),
) -> Result<AceModel> {
    if config.orderings == 0 || config.batch_size == 0 {
        return Err(AceError::config("orderings and batch_size must be positive"));
    }
    if train.is_empty() {
        return Err(AceError::config("training split is empty"));
    }
    let mut model = model.clone();
    let mut padam = AdamState::new(model.proposal_net());
    let mut eadam = AdamState::new(model.energy_net());
    let mut rng = substream(derive_seed(config.seed, 0xF1E7), 1);
    let mut dropout_rng = substream(derive_seed(config.seed, 0xF1E7), 2);
    let d = model.dims();
    for step in 0..config.steps {
        let lr = config.learning_rate * (1.0 - step as f64 / config.steps as f64);
        let mut batch = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let r = rng.random_range(0..train.len());
            let mask = restrict_to_available(&sample_uniform_cardinality_mask(d, &mut rng)?, &train.missing[r])?;
            batch.push(MaskedInstance::new(train.rows[r].clone(), mask)?);
        }
        let mut contexts = batch.clone();
        let mut terms = unobserved_terms(&batch);
        let n_base = terms.len();
        // chains[b][r] = term range of ordering r for instance b.
        let mut chains: Vec<Vec<(usize, usize)>> = Vec::with_capacity(batch.len());
        for (b, inst) in batch.iter().enumerate() {
            let mut ranges = Vec::new();
            if inst.mask.unobserved().len() > 1 {
                for r in 0..config.orderings {
                    let plan = OrderingPlan::random(&inst.mask, &mut rng);
                    let q = ChainQuery {
                        values: &inst.values,
                        mask: &inst.mask,
                        order: &plan.order,
                        key: derive_seed(b as u64, r as u64),
                    };
                    let s = terms.len();
                    chain_terms(&q, contexts.len(), &mut contexts, &mut terms)?;
                    ranges.push((s, terms.len()));
                }
            }
            chains.push(ranges);
        }
        if terms.is_empty() {
            continue;
        }
        for (t, term) in terms.iter_mut().enumerate() {
            term.key = t as u64;
        }
        let opts = EvalOptions {
            samples: train_config.importance_samples,
            mode: Mode::Train,
            dropout: train_config.dropout,
            energy: true,
            trace: true,
            seed: derive_seed(derive_seed(config.seed, 0xF1E8), step),
        };
        let eval = model.evaluate_terms(&contexts, &terms, &opts, None, &mut dropout_rng)?;
        let mut coef = TermCoefficients::zeros(terms.len());
        let base_loss = base_coefficients(&eval, n_base, train_config.mse_penalty, &mut coef);
        let mut var_total = 0.0;
        let nb = batch.len() as f64;
        for ranges in &chains {
            if ranges.is_empty() {
                continue;
            }
            let sums: Vec<f64> = ranges.iter().map(|&(s, e)| eval.log_p[s..e].iter().sum()).collect();
            let rn = sums.len() as f64;
            let mean = sums.iter().sum::<f64>() / rn;
            var_total += sums.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rn;
            for (&(s, e), v) in ranges.iter().zip(&sums) {
                let c = config.variance_coef * 2.0 * (v - mean) / rn / nb;
                for t in s..e {
                    coef.log_p[t] += c;
                }
            }
        }
        let variance = var_total / nb;
        if !(base_loss + config.variance_coef * variance).is_finite() {
            return Err(AceError::NonFinite(format!("fine-tuning loss is not finite at step {step}")));
        }
        let grads = model.backward_terms(&terms, &eval, &coef)?;
        padam.step(model.proposal_net_mut(), &grads.proposal, lr)?;
        if let Some(g) = &grads.energy {
            eadam.step(model.energy_net_mut(), g, lr)?;
        }
        observer(&FinetuneMetrics {
            step,
            base_loss,
            variance,
        });
    }
    Ok(model)
}

/// Fills training-loss coefficients for the first `n_base` terms and returns the loss.
fn base_coefficients(eval: &TermEval, n_base: usize, mse: f64, coef: &mut TermCoefficients) -> f64 {
    if n_base == 0 {
        return 0.0;
    }
    let n = n_base as f64;
    let n_cont = (0..n_base).filter(|&t| eval.is_continuous(t)).count();
    let mut loss = 0.0;
    for t in 0..n_base {
        loss -= eval.log_q[t] / n;
        coef.log_q[t] = -1.0 / n;
        if eval.is_continuous(t) {
            let diff = eval.log_p[t] - eval.log_q[t];
            loss += -eval.log_p[t] / n + mse * diff * diff / n_cont as f64;
            coef.log_p[t] = -1.0 / n;
            coef.log_p_energy_only[t] = 2.0 * mse * diff / n_cont as f64;
        }
    }
    loss
}

/// Trapezoid grid settings for the normalizer audit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub points: usize,
    /// Half-width of the grid beyond the extreme component means, in units
    /// of the largest component scale.
    pub width_scales: f64,
    /// Endpoint density must fall below this fraction of the peak.
    pub tail_ratio: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            points: 4096,
            width_scales: 12.0,
            tail_ratio: 1e-10,
        }
    }
}

/// Trapezoid-rule normalizer of one conditional.
#[derive(Debug, Clone, PartialEq)]
pub struct TrapezoidNormalizer {
    pub z: f64,
    pub lo: f64,
    pub hi: f64,
    /// Whether the endpoint densities passed the tail criterion.
    pub accepted: bool,
}

/// Integrates `exp(-E)` of feature `dim` on the proposal-derived grid.
pub fn trapezoid_normalizer(
    model: &AceModel,
    instance: &MaskedInstance,
    dim: usize,
    mixture: &MixtureParams,
    latent: &[f64],
    grid: &GridSpec,
) -> Result<TrapezoidNormalizer> {
    let (lo_mu, hi_mu, smax) = mixture.envelope();
    let lo = lo_mu - grid.width_scales * smax;
    let hi = hi_mu + grid.width_scales * smax;
    let xs = linspace(lo, hi, grid.points.max(2));
    let ys: Vec<f64> = model
        .energies(instance, dim, latent, &xs)?
        .into_iter()
        .map(|e| (-e).exp())
        .collect();
    let peak = ys.iter().copied().fold(0.0, f64::max);
    let accepted = ys[0] < grid.tail_ratio * peak && ys[ys.len() - 1] < grid.tail_ratio * peak;
    Ok(TrapezoidNormalizer {
        z: trapezoid(&xs, &ys),
        lo,
        hi,
        accepted,
    })
}

/// One audited (conditional, S) pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditRecord {
    pub instance: usize,
    pub dim_index: usize,
    #[serde(rename = "S")]
    pub samples: usize,
    #[serde(rename = "Z_trapz")]
    pub z_trapz: f64,
    #[serde(rename = "Z_hat")]
    pub z_hat: f64,
    pub pct_error: f64,
}

/// Percent-error quantiles for one sample count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AuditSummary {
    #[serde(rename = "S")]
    pub samples: usize,
    pub count: usize,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub iqr: f64,
}

/// Outcome of [`audit_normalizers`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub records: Vec<AuditRecord>,
    pub summary: Vec<AuditSummary>,
    /// Conditionals whose grid failed the tail criterion (excluded).
    pub flagged: usize,
    pub audited: usize,
}

/// Compares importance-sampled normalizers with trapezoid integration for
/// one random unobserved continuous feature of each instance.
pub fn audit_normalizers(
    model: &AceModel,
    instances: &[MaskedInstance],
    sample_counts: &[usize],
    grid: &GridSpec,
    seed: u64,
) -> Result<AuditReport> {
    if sample_counts.is_empty() || sample_counts.contains(&0) {
        return Err(AceError::usage("sample counts must be non-empty and positive"));
    }
    let mut pick_rng = seeded(derive_seed(seed, 0xA0D1));
    let mut records = Vec::new();
    let mut flagged = 0;
    let mut audited = 0;
    for (i, inst) in instances.iter().enumerate() {
        let cont: Vec<usize> = inst
            .mask
            .unobserved()
            .into_iter()
            .filter(|&j| model.schema().is_continuous(j))
            .collect();
        let Some(&dim) = cont.choose(&mut pick_rng) else { continue };
        let DimensionProposal::Continuous { mixture, latent } = single_proposal(model, inst, dim)? else {
            unreachable!("continuous feature has a mixture head")
        };
        let tz = trapezoid_normalizer(model, inst, dim, &mixture, &latent, grid)?;
        if !tz.accepted || tz.z.is_nan() || tz.z <= 0.0 {
            flagged += 1;
            continue;
        }
        audited += 1;
        for (k, &s) in sample_counts.iter().enumerate() {
            let mut rng = substream(derive_seed(seed, i as u64), k as u64);
            let est = estimate_normalizer(|xs| model.energies(inst, dim, &latent, xs), &mixture, s, &mut rng)?;
            let z_hat = est.estimate();
            records.push(AuditRecord {
                instance: i,
                dim_index: dim,
                samples: s,
                z_trapz: tz.z,
                z_hat,
                pct_error: 100.0 * (z_hat - tz.z).abs() / tz.z,
            });
        }
    }
    let summary = sample_counts
        .iter()
        .map(|&s| {
            let mut errs: Vec<f64> = records.iter().filter(|r| r.samples == s).map(|r| r.pct_error).collect();
            errs.sort_by(f64::total_cmp);
            let q25 = quantile_sorted(&errs, 0.25);
            let q75 = quantile_sorted(&errs, 0.75);
            AuditSummary {
                samples: s,
                count: errs.len(),
                median: quantile_sorted(&errs, 0.5),
                q25,
                q75,
                iqr: q75 - q25,
            }
        })
        .collect();
    Ok(AuditReport {
        records,
        summary,
        flagged,
        audited,
    })
}

impl AuditReport {
    /// Writes `dim_index,S,Z_trapz,Z_hat,pct_error` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| AceError::Format(format!("{}: {e}", path.display())))?;
        let io = |e: csv::Error| AceError::Format(format!("{}: {e}", path.display()));
        w.write_record(["dim_index", "S", "Z_trapz", "Z_hat", "pct_error"]).map_err(io)?;
        for r in &self.records {
            w.write_record([
                r.dim_index.to_string(),
                r.samples.to_string(),
                r.z_trapz.to_string(),
                r.z_hat.to_string(),
                r.pct_error.to_string(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| AceError::io(path, e))
    }

    /// Writes the per-S quantile summary as JSON.
    pub fn write_summary(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Out<'a> {
            audited: usize,
            flagged: usize,
            summary: &'a [AuditSummary],
        }
        let json = serde_json::to_string_pretty(&Out {
            audited: self.audited,
            flagged: self.flagged,
            summary: &self.summary,
        })?;
        let mut f = std::fs::File::create(path).map_err(|e| AceError::io(path, e))?;
        writeln!(f, "{json}").map_err(|e| AceError::io(path, e))
    }
}

/// Normalized importance weights of a conditional, for diagnostics.
pub fn conditional_weights(model: &AceModel, instance: &MaskedInstance, dim: usize, samples: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    let DimensionProposal::Continuous { mixture, latent } = single_proposal(model, instance, dim)? else {
        return Err(AceError::usage(format!("feature {dim} is categorical")));
    };
    let est = estimate_normalizer(|xs| model.energies(instance, dim, &latent, xs), &mixture, samples, &mut seeded(seed))?;
    let w = normalized_weights(&est.log_weights);
    Ok((est.points, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::schema::{Feature, FeatureKind, FeatureSchema};

    fn small() -> ModelConfig {
        ModelConfig {
            components: 3,
            latent_dim: 4,
            proposal_hidden: 16,
            proposal_blocks: 1,
            energy_hidden: 12,
            energy_blocks: 1,
            ..ModelConfig::default()
        }
    }

    fn model(d: usize, seed: u64) -> AceModel {
        AceModel::new(FeatureSchema::continuous(d), small(), seed).unwrap()
    }

    #[test]
    fn ordering_validation() {
        let mask = Bitmask::new(vec![true, false, false, false]);
        assert!(OrderingPlan::given(vec![3, 1, 2], &mask).is_ok());
        assert!(OrderingPlan::given(vec![3, 1], &mask).is_err());
        assert!(OrderingPlan::given(vec![0, 1, 2], &mask).is_err());
        let m = model(4, 1);
        let bad = OrderingPlan {
            order: vec![1, 2],
            source: OrderingSource::Given,
        };
        assert!(matches!(log_likelihood(&m, &[0.0; 4], &mask, &bad, 5, 0), Err(AceError::Usage(_))));
    }

    #[test]
    fn batched_chain_equals_sequential_loop() {
        let m = model(5, 2);
        let x = [0.3, -1.2, 0.8, 2.1, -0.4];
        let mask = Bitmask::new(vec![false, true, false, false, false]);
        let plan = OrderingPlan::given(vec![4, 0, 3, 2], &mask).unwrap();
        let a = log_likelihood(&m, &x, &mask, &plan, 64, 7).unwrap();
        let b = log_likelihood_sequential(&m, &x, &mask, &plan, 64, 7).unwrap();
        assert_eq!(a.energy.to_bits(), b.energy.to_bits());
        assert_eq!(a.proposal.to_bits(), b.proposal.to_bits());
    }

    #[test]
    fn single_step_chain_is_the_conditional() {
        let m = model(2, 3);
        let x = [0.5, -0.25];
        let mask = Bitmask::new(vec![true, false]);
        let plan = OrderingPlan::natural(&mask);
        let ll = log_likelihood(&m, &x, &mask, &plan, 100, 4).unwrap();
        let ctx = MaskedInstance::new(x.to_vec(), mask).unwrap();
        let DimensionProposal::Continuous { mixture, latent } = single_proposal(&m, &ctx, 1).unwrap() else { panic!() };
        let mut rng = substream(4, derive_seed(0, 0));
        let direct = crate::energy::conditional_log_likelihood(|xs| m.energies(&ctx, 1, &latent, xs), &mixture, -0.25, 100, &mut rng)
            .unwrap();
        assert!((ll.energy - direct).abs() < 1e-12);
    }

    #[test]
    fn uniform_categoricals_give_minus_two_log_c() {
        let cat = |n: &str| Feature {
            name: n.into(),
            kind: FeatureKind::Categorical {
                categories: vec!["a".into(), "b".into(), "c".into(), "d".into()],
            },
        };
        let schema = FeatureSchema::new(vec![cat("p"), cat("q")]).unwrap();
        let mut m = AceModel::new(schema, small(), 5).unwrap();
        let out = m.proposal_net_mut().output_layer_mut();
        out.weight.fill(0.0);
        out.bias.fill(0.0);
        let mask = Bitmask::none_observed(2);
        let ll = log_likelihood(&m, &[1.0, 3.0], &mask, &OrderingPlan::natural(&mask), 10, 0).unwrap();
        assert!((ll.energy + 2.0 * 4f64.ln()).abs() < 1e-12);
        assert_eq!(ll.energy, ll.proposal);
    }

    #[test]
    fn empty_unobserved_set_gives_zero_and_unchanged_samples() {
        let m = model(3, 6);
        let mask = Bitmask::all_observed(3);
        let x = [0.1, 0.2, 0.3];
        let ll = log_likelihood(&m, &x, &mask, &OrderingPlan::natural(&mask), 10, 0).unwrap();
        assert_eq!(ll.energy, 0.0);
        let inst = MaskedInstance::new(x.to_vec(), mask.clone()).unwrap();
        let s = sample_proposal(&m, &inst, &OrderingPlan::natural(&mask), &mut seeded(1)).unwrap();
        assert_eq!(s, x.to_vec());
    }

    #[test]
    fn single_candidate_energy_sampling_is_proposal_sampling() {
        let m = model(4, 7);
        let mask = Bitmask::new(vec![false, true, false, false]);
        let inst = MaskedInstance::new(vec![0.0, 1.1, 0.0, 0.0], mask.clone()).unwrap();
        let plan = OrderingPlan::random(&mask, &mut seeded(2));
        for seed in 0..5 {
            let a = sample_proposal(&m, &inst, &plan, &mut seeded(seed)).unwrap();
            let b = sample_energy(&m, &inst, &plan, 1, &mut seeded(seed)).unwrap();
            assert_eq!(a, b.values);
            let c = sample_energy(&m, &inst, &plan, 8, &mut seeded(seed)).unwrap();
            assert_eq!(c.values[1], 1.1);
        }
    }

    #[test]
    fn chain_bookkeeping_observes_one_feature_per_step() {
        let mask = Bitmask::new(vec![true, false, false, true, false]);
        let x = [0.0; 5];
        let plan = OrderingPlan::random(&mask, &mut seeded(3));
        let q = ChainQuery {
            values: &x,
            mask: &mask,
            order: &plan.order,
            key: 0,
        };
        let mut contexts = Vec::new();
        let mut terms = Vec::new();
        chain_terms(&q, 0, &mut contexts, &mut terms).unwrap();
        for (i, c) in contexts.iter().enumerate() {
            assert_eq!(c.mask.observed_count(), 2 + i);
        }
        let mut last = contexts.last().unwrap().mask.clone();
        last.observe(*plan.order.last().unwrap());
        assert_eq!(last.observed_count(), 5);
    }

    #[test]
    fn energy_mean_is_the_self_normalized_estimate() {
        let m = model(2, 8);
        let inst = MaskedInstance::new(vec![0.4, 0.0], Bitmask::new(vec![true, false])).unwrap();
        let imp = impute_means(&m, &inst, 500, 5).unwrap();
        let Imputation::Continuous { proposal_mean, energy_mean } = imp[1] else { panic!() };
        let DimensionProposal::Continuous { mixture, latent } = single_proposal(&m, &inst, 1).unwrap() else { panic!() };
        assert_eq!(proposal_mean, mixture.mean());
        let mut rng = substream(derive_seed(5, 0), 1);
        let est = estimate_normalizer(|xs| m.energies(&inst, 1, &latent, xs), &mixture, 500, &mut rng).unwrap();
        let w = normalized_weights(&est.log_weights);
        let direct: f64 = w.iter().zip(&est.points).map(|(w, x)| w * x).sum();
        assert!((energy_mean - direct).abs() < 1e-12);
        assert_eq!(imp[0], Imputation::Observed { value: 0.4 });
    }

    #[test]
    fn single_feature_chains_have_no_ordering_variance() {
        let m = model(3, 9);
        let insts: Vec<MaskedInstance> = (0..4)
            .map(|i| MaskedInstance::new(vec![i as f64 * 0.1, 0.5, -0.5], Bitmask::new(vec![true, false, true])).unwrap())
            .collect();
        let s = ordering_consistency(&m, &insts, 6, 10, 1).unwrap();
        assert!(s.mean_std < 1e-12);
    }

    #[test]
    fn zero_variance_coefficient_matches_plain_objective() {
        let m = model(3, 10);
        let mut rng = seeded(11);
        let rows: Vec<Vec<f64>> = (0..64).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let split = Split::from_rows(rows);
        let tc = TrainConfig {
            importance_samples: 5,
            ..TrainConfig::default()
        };
        let cfg = FinetuneConfig {
            steps: 3,
            batch_size: 4,
            orderings: 3,
            ..FinetuneConfig::default()
        };
        let zero = FinetuneConfig {
            variance_coef: 0.0,
            ..cfg.clone()
        };
        let mut vars = Vec::new();
        let a = consistency_finetune(&m, &split, &tc, &zero, |f| vars.push(f.variance)).unwrap();
        let b = consistency_finetune(&m, &split, &tc, &cfg, |_| {}).unwrap();
        assert!(vars.iter().all(|v| v.is_finite()));
        assert_ne!(a.proposal_net().to_flat(), m.proposal_net().to_flat());
        assert_ne!(a.energy_net().to_flat(), b.energy_net().to_flat());
    }

    #[test]
    fn zero_energy_box_integrates_to_box_length() {
        // Energy ≡ 0 (clipped floor aside): raw output pinned very negative.
        let mut m = model(2, 12);
        let out = m.energy_net_mut().output_layer_mut();
        out.weight.fill(0.0);
        out.bias.fill(-60.0);
        let inst = MaskedInstance::new(vec![0.0, 0.0], Bitmask::new(vec![true, false])).unwrap();
        let mix = MixtureParams::gaussian(0.0, 1.0).unwrap();
        let grid = GridSpec {
            points: 1001,
            width_scales: 2.0,
            tail_ratio: 2.0,
        };
        let tz = trapezoid_normalizer(&m, &inst, 1, &mix, &[0.0; 4], &grid).unwrap();
        assert!((tz.z - 4.0).abs() < 1e-9);
    }

    #[test]
    fn audit_report_files() {
        let m = model(3, 13);
        let insts: Vec<MaskedInstance> = (0..5)
            .map(|i| MaskedInstance::new(vec![0.1 * i as f64, 0.0, 0.0], Bitmask::new(vec![true, false, false])).unwrap())
            .collect();
        let rep = audit_normalizers(&m, &insts, &[5, 50], &GridSpec::default(), 1).unwrap();
        assert_eq!(rep.audited + rep.flagged, 5);
        assert!(rep.records.iter().all(|r| r.pct_error >= 0.0));
        let dir = tempfile::tempdir().unwrap();
        rep.write_csv(&dir.path().join("a.csv")).unwrap();
        rep.write_summary(&dir.path().join("a.json")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("a.csv")).unwrap();
        assert!(text.starts_with("dim_index,S,Z_trapz,Z_hat,pct_error"));
    }
}
