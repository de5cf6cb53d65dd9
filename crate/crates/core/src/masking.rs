//! Observation bitmasks, training-time mask sampling, and zero-imputation.

use rand::seq::index;
use rand::Rng;

use crate::error::{AceError, Result};

/// Per-feature observation state of one instance.
///
/// `observed[i]` is the bitmask `b`; `missing[i]` marks values absent from
/// the data. A feature is unobserved when it is neither.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmask {
    observed: Vec<bool>,
    missing: Vec<bool>,
}

impl Bitmask {
    /// A mask with no missing values.
    pub fn new(observed: Vec<bool>) -> Self {
        let missing = vec![false; observed.len()];
        Bitmask { observed, missing }
    }

    /// Fails when a feature is flagged both observed and missing.
    pub fn with_missing(observed: Vec<bool>, missing: Vec<bool>) -> Result<Self> {
        if observed.len() != missing.len() {
            return Err(AceError::usage("observed and missing vectors differ in length"));
        }
        if let Some(i) = observed.iter().zip(&missing).position(|(&o, &m)| o && m) {
            return Err(AceError::usage(format!(
                "feature {i} cannot be both observed and missing"
            )));
        }
        Ok(Bitmask { observed, missing })
    }

    pub fn all_observed(d: usize) -> Self {
        Bitmask::new(vec![true; d])
    }

    pub fn none_observed(d: usize) -> Self {
        Bitmask::new(vec![false; d])
    }

    pub fn len(&self) -> usize {
        self.observed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observed.is_empty()
    }

    pub fn observed(&self) -> &[bool] {
        &self.observed
    }

    pub fn missing(&self) -> &[bool] {
        &self.missing
    }

    pub fn is_observed(&self, i: usize) -> bool {
        self.observed[i]
    }

    /// The unobserved index set `u`: neither observed nor missing.
    pub fn unobserved(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| !self.observed[i] && !self.missing[i])
            .collect()
    }

    pub fn observed_count(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    /// Marks feature `i` observed (the chain-rule bookkeeping step).
    pub fn observe(&mut self, i: usize) {
        debug_assert!(!self.missing[i], "missing features cannot become observed");
        self.observed[i] = true;
    }
}

/// Draws `k ~ U{0, …, d-1}` and observes a uniformly random `k`-subset.
pub fn sample_uniform_cardinality_mask<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<Bitmask> {
    if d == 0 {
        return Err(AceError::config("cannot sample a mask over zero features"));
    }
    let k = rng.random_range(0..d);
    let mut observed = vec![false; d];
    for i in index::sample(rng, d, k) {
        observed[i] = true;
    }
    Ok(Bitmask::new(observed))
}

/// Observes each feature independently with probability `p`.
pub fn sample_bernoulli_mask<R: Rng + ?Sized>(d: usize, p: f64, rng: &mut R) -> Result<Bitmask> {
    if !(0.0..=1.0).contains(&p) {
        return Err(AceError::config(format!("observation probability must be in [0, 1], got {p}")));
    }
    Ok(Bitmask::new((0..d).map(|_| rng.random::<f64>() < p).collect()))
}

/// Removes missing features from both the observed and unobserved sets.
pub fn restrict_to_available(mask: &Bitmask, missing: &[bool]) -> Result<Bitmask> {
    if missing.len() != mask.len() {
        return Err(AceError::usage("missingness vector length differs from mask length"));
    }
    let missing: Vec<bool> = mask
        .missing
        .iter()
        .zip(missing)
        .map(|(&a, &b)| a || b)
        .collect();
    let observed = mask
        .observed
        .iter()
        .zip(&missing)
        .map(|(&o, &m)| o && !m)
        .collect();
    Ok(Bitmask { observed, missing })
}

/// `φ(x_o; b)`: copies observed coordinates and zeroes the rest.
pub fn zero_impute(values: &[f64], observed: &[bool]) -> Vec<f64> {
    assert_eq!(values.len(), observed.len(), "zero_impute: length mismatch");
    values
        .iter()
        .zip(observed)
        .map(|(&v, &o)| if o { v } else { 0.0 })
        .collect()
}

/// A data vector together with its mask.
///
/// Continuous values are standardized reals; categorical values are category
/// indices stored as `f64`. Entries that are not observed may hold anything
/// (the true value of an unobserved feature, or NaN when missing).
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedInstance {
    pub values: Vec<f64>,
    pub mask: Bitmask,
}

impl MaskedInstance {
    pub fn new(values: Vec<f64>, mask: Bitmask) -> Result<Self> {
        if values.len() != mask.len() {
            return Err(AceError::usage(format!(
                "instance has {} values but mask covers {}",
                values.len(),
                mask.len()
            )));
        }
        Ok(MaskedInstance { values, mask })
    }

    pub fn zero_imputed(&self) -> Vec<f64> {
        zero_impute(&self.values, self.mask.observed())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    #[test]
    fn single_feature_mask_is_always_unobserved() {
        let mut rng = seeded(0);
        for _ in 0..100 {
            assert_eq!(sample_uniform_cardinality_mask(1, &mut rng).unwrap().observed(), &[false]);
        }
    }

    #[test]
    fn zero_features_is_config_error() {
        assert!(matches!(
            sample_uniform_cardinality_mask(0, &mut seeded(0)),
            Err(AceError::Config(_))
        ));
    }

    #[test]
    fn uniform_cardinality_is_uniform() {
        // Chi-square against the exact uniform law on {0..5}, 5 degrees of freedom.
        let mut rng = seeded(42);
        let n = 100_000;
        let mut counts = [0usize; 6];
        for _ in 0..n {
            counts[sample_uniform_cardinality_mask(6, &mut rng).unwrap().observed_count()] += 1;
        }
        let expected = n as f64 / 6.0;
        let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 0.999 quantile of chi-square with 5 dof.
        assert!(stat < 20.515, "chi-square statistic {stat}");
    }

    #[test]
    fn uniform_cardinality_is_reproducible() {
        let draw = || {
            let mut rng = seeded(9);
            (0..20)
                .map(|_| sample_uniform_cardinality_mask(3, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn bernoulli_extremes() {
        let mut rng = seeded(1);
        assert!(sample_bernoulli_mask(10, 0.0, &mut rng).unwrap().observed().iter().all(|&o| !o));
        assert!(sample_bernoulli_mask(10, 1.0, &mut rng).unwrap().observed().iter().all(|&o| o));
        assert!(sample_bernoulli_mask(10, 1.5, &mut rng).is_err());
    }

    #[test]
    fn bernoulli_mean_count() {
        let mut rng = seeded(2);
        let n = 100_000;
        let total: usize = (0..n)
            .map(|_| sample_bernoulli_mask(43, 0.5, &mut rng).unwrap().observed_count())
            .sum();
        let mean = total as f64 / n as f64;
        // Binomial(43, 0.5) has variance 10.75; standard error of the mean over n draws.
        let se = (10.75 / n as f64).sqrt();
        assert!((mean - 21.5).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn restrict_examples() {
        let b = Bitmask::new(vec![true, true, false]);
        assert_eq!(restrict_to_available(&b, &[false; 3]).unwrap(), b);

        let r = restrict_to_available(&b, &[false, true, false]).unwrap();
        assert_eq!(r.observed(), &[true, false, false]);
        assert_eq!(r.unobserved(), vec![2]);

        let r = restrict_to_available(&b, &[true; 3]).unwrap();
        assert_eq!(r.observed(), &[false; 3]);
        assert!(r.unobserved().is_empty());
    }

    #[test]
    fn zero_impute_examples() {
        assert_eq!(zero_impute(&[2.0, 5.0, 7.0], &[true; 3]), vec![2.0, 5.0, 7.0]);
        assert_eq!(zero_impute(&[2.0, 5.0, 7.0], &[true, false, true]), vec![2.0, 0.0, 7.0]);
        assert_eq!(zero_impute(&[-0.3, 1.2], &[false, false]), vec![0.0, 0.0]);
    }

    #[test]
    fn observed_and_missing_conflict_is_rejected() {
        assert!(Bitmask::with_missing(vec![true, false], vec![true, false]).is_err());
    }

    proptest! {
        #[test]
        fn partitions_cover_all_features(seed in any::<u64>(), d in 1usize..12, miss in proptest::collection::vec(any::<bool>(), 12)) {
            let mut rng = seeded(seed);
            let mask = sample_uniform_cardinality_mask(d, &mut rng).unwrap();
            let r = restrict_to_available(&mask, &miss[..d]).unwrap();
            let u = r.unobserved();
            for i in 0..d {
                let o = r.is_observed(i);
                let m = r.missing()[i];
                let un = u.contains(&i);
                // Exactly one of observed / missing / unobserved.
                prop_assert_eq!(o as u8 + m as u8 + un as u8, 1);
            }
        }

        #[test]
        fn zero_impute_is_idempotent(values in proptest::collection::vec(-1e3f64..1e3, 1..10), bits in proptest::collection::vec(any::<bool>(), 10)) {
            let b = &bits[..values.len()];
            let once = zero_impute(&values, b);
            prop_assert_eq!(zero_impute(&once, b), once.clone());
            for (i, &o) in b.iter().enumerate() {
                if o { prop_assert_eq!(once[i], values[i]); }
            }
        }
    }
}
