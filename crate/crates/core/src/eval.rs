//! Evaluation protocols: mask-averaged conditional likelihood, marginal
//! likelihood of leading features, and imputation error.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::{Split, Standardization};
use crate::error::{AceError, Result};
use crate::inference::{chain_log_likelihoods, impute_means_batch, ChainQuery, Imputation, OrderingPlan};
use crate::masking::{restrict_to_available, sample_bernoulli_mask, sample_uniform_cardinality_mask, Bitmask, MaskedInstance};
use crate::math::mean_and_std;
use crate::model::AceModel;
use crate::rng::{derive_seed, seeded, AceRng};

/// How test-time observation masks are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskSpec {
    /// Each feature observed independently with probability `p`.
    Bernoulli(f64),
    /// Observed count uniform on `0..d`, then a uniform subset.
    Uniform,
}

impl MaskSpec {
    pub fn sample(&self, d: usize, rng: &mut AceRng) -> Result<Bitmask> {
        match *self {
            MaskSpec::Bernoulli(p) => sample_bernoulli_mask(d, p, rng),
            MaskSpec::Uniform => sample_uniform_cardinality_mask(d, rng),
        }
    }
}

impl fmt::Display for MaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskSpec::Bernoulli(p) => write!(f, "bernoulli:{p}"),
            MaskSpec::Uniform => f.write_str("uniform"),
        }
    }
}

impl FromStr for MaskSpec {
    type Err = AceError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "uniform" {
            return Ok(MaskSpec::Uniform);
        }
        let p = s
            .strip_prefix("bernoulli:")
            .and_then(|p| p.parse::<f64>().ok())
            .ok_or_else(|| AceError::usage(format!("mask `{s}` is not `bernoulli:<p>` or `uniform`")))?;
        if !(0.0..=1.0).contains(&p) {
            return Err(AceError::usage(format!("mask probability {p} is outside [0, 1]")));
        }
        Ok(MaskSpec::Bernoulli(p))
    }
}

/// How orderings of the unobserved features are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderingMode {
    /// A fresh random permutation per instance.
    Random,
    /// The mean over this many random permutations per instance.
    Ensemble(usize),
}

impl fmt::Display for OrderingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OrderingMode::Random => f.write_str("random"),
            OrderingMode::Ensemble(r) => write!(f, "ensemble:{r}"),
        }
    }
}

impl FromStr for OrderingMode {
    type Err = AceError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "random" {
            return Ok(OrderingMode::Random);
        }
        match s.strip_prefix("ensemble:").and_then(|r| r.parse::<usize>().ok()) {
            Some(r) if r >= 1 => Ok(OrderingMode::Ensemble(r)),
            _ => Err(AceError::usage(format!("ordering `{s}` is not `random` or `ensemble:<R>` with R ≥ 1"))),
        }
    }
}

macro_rules! string_serde {
    ($t:ty) => {
        impl Serialize for $t {
            fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }
        impl<'de> Deserialize<'de> for $t {
            fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}
string_serde!(MaskSpec);
string_serde!(OrderingMode);

/// Test-time evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    pub mask: MaskSpec,
    pub trials: usize,
    pub importance_samples: usize,
    pub ordering: OrderingMode,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            mask: MaskSpec::Bernoulli(0.5),
            trials: 5,
            importance_samples: 20,
            ordering: OrderingMode::Random,
            seed: 0,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(AceError::config("eval.trials must be at least 1"));
        }
        if self.importance_samples == 0 {
            return Err(AceError::config("eval.importance_samples must be at least 1"));
        }
        Ok(())
    }

    fn trial_rng(&self, trial: usize, salt: u64) -> AceRng {
        seeded(derive_seed(derive_seed(self.seed, salt), trial as u64))
    }
}

/// Per-trial means and their summary. `std` is the sample standard
/// deviation of the trial means (0 for a single trial).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialStats {
    pub mean: f64,
    pub std: f64,
    pub per_trial: Vec<f64>,
}

impl TrialStats {
    pub fn from_trials(per_trial: Vec<f64>) -> Self {
        let (mean, std) = mean_and_std(&per_trial);
        TrialStats { mean, std, per_trial }
    }
}

/// Energy and proposal likelihood summaries.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LikelihoodReport {
    pub energy: TrialStats,
    pub proposal: TrialStats,
}

/// Mean per-instance likelihood of each trial, for instances with masks.
fn likelihood_trials(
    model: &AceModel,
    split: &Split,
    protocol: &EvalProtocol,
    salt: u64,
    mut mask_for: impl FnMut(usize, &mut AceRng) -> Result<Bitmask>,
) -> Result<LikelihoodReport> {
    protocol.validate()?;
    if split.is_empty() {
        return Err(AceError::usage("evaluation split is empty"));
    }
    let mut energy = Vec::with_capacity(protocol.trials);
    let mut proposal = Vec::with_capacity(protocol.trials);
    for trial in 0..protocol.trials {
        let mut rng = protocol.trial_rng(trial, salt);
        let mut masks = Vec::with_capacity(split.len());
        let mut plans = Vec::with_capacity(split.len());
        for r in 0..split.len() {
            let mask = mask_for(r, &mut rng)?;
            plans.push(match protocol.ordering {
                OrderingMode::Random => vec![OrderingPlan::random(&mask, &mut rng)],
                OrderingMode::Ensemble(k) => OrderingPlan::ensemble(&mask, k, &mut rng),
            });
            masks.push(mask);
        }
        let mut queries = Vec::new();
        for (r, ps) in plans.iter().enumerate() {
            for p in ps {
                queries.push(ChainQuery {
                    values: &split.rows[r],
                    mask: &masks[r],
                    order: &p.order,
                    key: r as u64,
                });
            }
        }
        let seed = derive_seed(derive_seed(protocol.seed, salt ^ 0xFFFF), trial as u64);
        let lls = chain_log_likelihoods(model, &queries, protocol.importance_samples, seed)?;
        let per_instance = plans.iter().map(Vec::len).fold((Vec::new(), 0), |(mut acc, start), k| {
            let chunk = &lls[start..start + k];
            let n = k as f64;
            acc.push((
                chunk.iter().map(|c| c.energy).sum::<f64>() / n,
                chunk.iter().map(|c| c.proposal).sum::<f64>() / n,
            ));
            (acc, start + k)
        });
        let n = split.len() as f64;
        energy.push(per_instance.0.iter().map(|v| v.0).sum::<f64>() / n);
        proposal.push(per_instance.0.iter().map(|v| v.1).sum::<f64>() / n);
    }
    Ok(LikelihoodReport {
        energy: TrialStats::from_trials(energy),
        proposal: TrialStats::from_trials(proposal),
    })
}

/// Mean autoregressive `log p(x_u | x_o)` per instance, with a fresh mask and
/// ordering per instance in every trial. Missing cells are never targets.
pub fn eval_conditional_ll(model: &AceModel, split: &Split, protocol: &EvalProtocol) -> Result<LikelihoodReport> {
    let d = model.dims();
    likelihood_trials(model, split, protocol, 0xC0D1, |r, rng| {
        restrict_to_available(&protocol.mask.sample(d, rng)?, &split.missing[r])
    })
}

/// Mean `log p(x_1..x_m)` with nothing observed and the remaining features
/// marginalized out. `m = 0` gives 0.
pub fn eval_marginal_ll(model: &AceModel, split: &Split, leading: usize, protocol: &EvalProtocol) -> Result<LikelihoodReport> {
    let d = model.dims();
    if leading > d {
        return Err(AceError::usage(format!("cannot take the marginal of {leading} features out of {d}")));
    }
    likelihood_trials(model, split, protocol, 0x3A26, |r, _| {
        let missing = (0..d).map(|i| i >= leading || split.missing[r][i]).collect();
        Bitmask::with_missing(vec![false; d], missing)
    })
}

/// Imputation quality over test masks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImputationReport {
    /// Mean over continuous features of RMSE ÷ test standard deviation.
    pub nrmse: Option<TrialStats>,
    /// Mean over categorical features of the mode's accuracy.
    pub accuracy: Option<TrialStats>,
    /// Features with no masked cell in any trial.
    pub never_masked: Vec<usize>,
}

/// Number of instances imputed per network pass.
const IMPUTE_CHUNK: usize = 256;

/// Imputes masked cells with energy means (modes for categorical features)
/// and scores them in original units.
pub fn eval_nrmse(model: &AceModel, stats: &Standardization, split: &Split, protocol: &EvalProtocol) -> Result<ImputationReport> {
    protocol.validate()?;
    if split.is_empty() {
        return Err(AceError::usage("evaluation split is empty"));
    }
    let d = model.dims();
    let schema = model.schema();
    let test_std: Vec<f64> = (0..d)
        .map(|i| {
            let col: Vec<f64> = split
                .rows
                .iter()
                .map(|r| stats.destandardize_value(i, r[i]))
                .filter(|v| !v.is_nan())
                .collect();
            let (m, _) = mean_and_std(&col);
            (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / col.len() as f64).sqrt()
        })
        .collect();
    let mut ever_masked = vec![false; d];
    let mut nrmse_trials = Vec::new();
    let mut acc_trials = Vec::new();
    for trial in 0..protocol.trials {
        let mut rng = protocol.trial_rng(trial, 0x1A9E);
        let instances = (0..split.len())
            .map(|r| {
                let mask = restrict_to_available(&protocol.mask.sample(d, &mut rng)?, &split.missing[r])?;
                MaskedInstance::new(split.rows[r].clone(), mask)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut sq = vec![0.0; d];
        let mut count = vec![0usize; d];
        let trial_seed = derive_seed(derive_seed(protocol.seed, 0x1A9F), trial as u64);
        for (c, chunk) in instances.chunks(IMPUTE_CHUNK).enumerate() {
            let imps = impute_means_batch(model, chunk, protocol.importance_samples, derive_seed(trial_seed, c as u64))?;
            for (inst, imp) in chunk.iter().zip(imps) {
                for (i, m) in imp.iter().enumerate() {
                    let truth = inst.values[i];
                    let err = match m {
                        Imputation::Continuous { energy_mean, .. } => {
                            stats.destandardize_value(i, *energy_mean) - stats.destandardize_value(i, truth)
                        }
                        Imputation::Categorical { mode, .. } => f64::from(*mode as f64 != truth),
                        Imputation::Observed { .. } | Imputation::Missing => continue,
                    };
                    sq[i] += err * err;
                    count[i] += 1;
                }
            }
        }
        let (mut nr, mut acc) = (Vec::new(), Vec::new());
        for i in 0..d {
            if count[i] == 0 {
                continue;
            }
            ever_masked[i] = true;
            if schema.is_continuous(i) {
                nr.push((sq[i] / count[i] as f64).sqrt() / test_std[i]);
            } else {
                acc.push(1.0 - sq[i] / count[i] as f64);
            }
        }
        if !nr.is_empty() {
            nrmse_trials.push(nr.iter().sum::<f64>() / nr.len() as f64);
        }
        if !acc.is_empty() {
            acc_trials.push(acc.iter().sum::<f64>() / acc.len() as f64);
        }
    }
    let never_masked: Vec<usize> = (0..d).filter(|&i| !ever_masked[i]).collect();
    let wrap = |v: Vec<f64>| (!v.is_empty()).then(|| TrialStats::from_trials(v));
    Ok(ImputationReport {
        nrmse: wrap(nrmse_trials),
        accuracy: wrap(acc_trials),
        never_masked,
    })
}

/// One entry of the metrics JSON.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRecord {
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub protocol: EvalProtocol,
    pub seed: u64,
    pub per_trial: Vec<f64>,
}

impl MetricRecord {
    pub fn new(metric: &str, stats: &TrialStats, protocol: &EvalProtocol) -> Self {
        MetricRecord {
            metric: metric.to_string(),
            mean: stats.mean,
            std: stats.std,
            protocol: protocol.clone(),
            seed: protocol.seed,
            per_trial: stats.per_trial.clone(),
        }
    }
}

/// One row of a results table (`dataset,method,missing_rate,mean,std`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow {
    pub dataset: String,
    pub method: String,
    pub missing_rate: f64,
    pub mean: f64,
    pub std: f64,
}

pub fn write_table(path: &Path, rows: &[TableRow]) -> Result<()> {
    let fail = |e: csv::Error| AceError::Format(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(fail)?;
    for r in rows {
        w.serialize(r).map_err(fail)?;
    }
    w.flush().map_err(|e| AceError::io(path, e))
}
