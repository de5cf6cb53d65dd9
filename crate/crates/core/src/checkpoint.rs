//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"ACE-CKPT" | u32 format version | u64 header length | JSON header | f64 blobs
//! ```
//!
//! The JSON header carries the schema, standardization, configuration,
//! input layout, and a table locating each parameter blob.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{check_row, Standardization};
use crate::error::{AceError, Result};
use crate::inference::{impute_means, log_likelihood, sample_energy, ChainLikelihood, OrderingPlan};
use crate::masking::{Bitmask, MaskedInstance};
use crate::model::{AceModel, InputLayout, ModelConfig};
use crate::nn::{Architecture, ResidualNet};
use crate::rng::{derive_seed, seeded};
use crate::schema::FeatureSchema;
use crate::training::TrainConfig;

pub const MAGIC: &[u8; 8] = b"ACE-CKPT";
pub const FORMAT_VERSION: u32 = 1;

/// A trained model with everything needed to use it on raw data.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: AceModel,
    pub stats: Standardization,
    pub train_config: TrainConfig,
    pub best_validation_ll: Option<f64>,
    pub best_step: Option<u64>,
    pub steps_completed: u64,
    /// Seeds that produced this checkpoint, oldest first.
    pub seed_lineage: Vec<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobEntry {
    name: String,
    architecture: Architecture,
    offset: u64,
    count: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    schema: FeatureSchema,
    stats: Standardization,
    model_config: ModelConfig,
    train_config: TrainConfig,
    layout: InputLayout,
    best_validation_ll: Option<f64>,
    best_step: Option<u64>,
    steps_completed: u64,
    seed_lineage: Vec<u64>,
    blobs: Vec<BlobEntry>,
}

impl Checkpoint {
    /// An untrained checkpoint around `model`.
    pub fn from_model(model: AceModel, stats: Standardization, train_config: TrainConfig) -> Self {
        let seed = train_config.seed;
        Checkpoint {
            model,
            stats,
            train_config,
            best_validation_ll: None,
            best_step: None,
            steps_completed: 0,
            seed_lineage: vec![seed],
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let p = self.model.proposal_net();
        let e = self.model.energy_net();
        let header = Header {
            format_version: FORMAT_VERSION,
            schema: self.model.schema().clone(),
            stats: self.stats.clone(),
            model_config: *self.model.config(),
            train_config: self.train_config.clone(),
            layout: self.model.layout().clone(),
            best_validation_ll: self.best_validation_ll,
            best_step: self.best_step,
            steps_completed: self.steps_completed,
            seed_lineage: self.seed_lineage.clone(),
            blobs: vec![
                BlobEntry {
                    name: "proposal".into(),
                    architecture: p.architecture(),
                    offset: 0,
                    count: p.parameter_count() as u64,
                },
                BlobEntry {
                    name: "energy".into(),
                    architecture: e.architecture(),
                    offset: p.parameter_count() as u64,
                    count: e.parameter_count() as u64,
                },
            ],
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * (p.parameter_count() + e.parameter_count()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in p.to_flat().into_iter().chain(e.to_flat()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |m: &str| AceError::Format(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(fail("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version > FORMAT_VERSION {
            return Err(AceError::Format(format!(
                "checkpoint format version {version} is newer than the supported version {FORMAT_VERSION}"
            )));
        }
        if version == 0 {
            return Err(fail("checkpoint format version 0 is invalid"));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..).ok_or_else(|| fail("truncated checkpoint"))?;
        let json = body.get(..hlen).ok_or_else(|| fail("truncated checkpoint header"))?;
        let header: Header = serde_json::from_slice(json)?;
        if header.format_version != version {
            return Err(fail("header and preamble disagree on the format version"));
        }
        let blob_bytes = &body[hlen..];
        if blob_bytes.len() % 8 != 0 {
            return Err(fail("parameter section is not a whole number of f64 values"));
        }
        let values: Vec<f64> = blob_bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let blob = |name: &str| -> Result<ResidualNet> {
            let entry = header
                .blobs
                .iter()
                .find(|b| b.name == name)
                .ok_or_else(|| AceError::Format(format!("checkpoint has no `{name}` blob")))?;
            let (o, n) = (entry.offset as usize, entry.count as usize);
            let slice = values
                .get(o..o + n)
                .ok_or_else(|| AceError::Format(format!("`{name}` blob exceeds the file")))?;
            ResidualNet::from_flat(entry.architecture, slice)
        };
        let model = AceModel::from_parts(header.schema, header.model_config, blob("proposal")?, blob("energy")?)?;
        if model.layout() != &header.layout {
            return Err(fail("stored input layout differs from the layout this version builds"));
        }
        if header.stats.mean.len() != model.dims() || header.stats.std.len() != model.dims() {
            return Err(fail("standardization statistics do not match the schema"));
        }
        Ok(Checkpoint {
            model,
            stats: header.stats,
            train_config: header.train_config,
            best_validation_ll: header.best_validation_ll,
            best_step: header.best_step,
            steps_completed: header.steps_completed,
            seed_lineage: header.seed_lineage,
        })
    }

    /// Writes atomically: a sibling temporary file is renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let name = path
            .file_name()
            .ok_or_else(|| AceError::usage(format!("{} is not a file path", path.display())))?;
        let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| {
            let _ = fs::remove_file(&tmp);
            AceError::io(path, e)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| AceError::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

/// Operations on single rows in original units. NaN marks a cell that is
/// not observed; categorical cells hold category indices.
impl Checkpoint {
    fn standardized_instance(&self, row: &[f64], observed: Option<&[bool]>) -> Result<MaskedInstance> {
        check_row(self.model.schema(), row, 0)?;
        let d = row.len();
        let nan: Vec<bool> = row.iter().map(|v| v.is_nan()).collect();
        let mask = match observed {
            None => Bitmask::new(nan.iter().map(|m| !m).collect()),
            Some(obs) => {
                if obs.len() != d {
                    return Err(AceError::usage(format!("observed flags have length {}, expected {d}", obs.len())));
                }
                if let Some(i) = (0..d).find(|&i| obs[i] && nan[i]) {
                    return Err(AceError::usage(format!("feature {i} is marked observed but its value is missing")));
                }
                Bitmask::with_missing(obs.to_vec(), nan)?
            }
        };
        MaskedInstance::new(self.stats.standardize(row), mask)
    }

    /// `log p(x_u | x_o)` where `u` holds the unobserved cells with values.
    /// Unobserved NaN cells are marginalized out. The ordering is random,
    /// drawn from `seed`.
    pub fn log_likelihood_row(&self, row: &[f64], observed: &[bool], samples: usize, seed: u64) -> Result<ChainLikelihood> {
        let inst = self.standardized_instance(row, Some(observed))?;
        let plan = OrderingPlan::random(&inst.mask, &mut seeded(derive_seed(seed, 0x0D5E)));
        let mut ll = log_likelihood(&self.model, &inst.values, &inst.mask, &plan, samples, seed)?;
        // Change of variables back to original units.
        let jac: f64 = plan.order.iter().filter(|&&i| self.model.schema().is_continuous(i)).map(|&i| self.stats.std[i].ln()).sum();
        ll.energy -= jac;
        ll.proposal -= jac;
        Ok(ll)
    }

    /// Fills NaN cells with energy means (modes for categorical features).
    pub fn impute_row(&self, row: &[f64], samples: usize, seed: u64) -> Result<Vec<f64>> {
        let inst = self.standardized_instance(row, None)?;
        let imp = impute_means(&self.model, &inst, samples, seed)?;
        Ok(imp
            .iter()
            .enumerate()
            .map(|(i, m)| if inst.mask.is_observed(i) { row[i] } else { self.stats.destandardize_value(i, m.point()) })
            .collect())
    }

    /// Fills NaN cells with one draw along a random ordering. `candidates`
    /// is the resampling pool size; 1 samples the proposal directly.
    pub fn sample_row(&self, row: &[f64], candidates: usize, seed: u64) -> Result<Vec<f64>> {
        let inst = self.standardized_instance(row, None)?;
        let mut rng = seeded(seed);
        let plan = OrderingPlan::random(&inst.mask, &mut rng);
        let s = sample_energy(&self.model, &inst, &plan, candidates, &mut rng)?;
        Ok((0..row.len())
            .map(|i| if inst.mask.is_observed(i) { row[i] } else { self.stats.destandardize_value(i, s.values[i]) })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{Bitmask, MaskedInstance};

    fn sample_checkpoint() -> Checkpoint {
        let schema = FeatureSchema::from_json(
            r#"{"columns":[{"name":"a","kind":"continuous"},{"name":"c","kind":"categorical","categories":["x","y"]}]}"#,
        )
        .unwrap();
        let cfg = TrainConfig {
            proposal_hidden: 8,
            energy_hidden: 6,
            latent_dim: 3,
            components: 2,
            ..TrainConfig::default()
        };
        let model = AceModel::new(schema, cfg.model_config(), 5).unwrap();
        let mut ck = Checkpoint::from_model(
            model,
            Standardization {
                mean: vec![0.1 + 0.2, 0.0],
                std: vec![1.0 / 3.0, 1.0],
            },
            cfg,
        );
        ck.best_validation_ll = Some(-1.234_567_890_123_456_7);
        ck
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample_checkpoint();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.stats, ck.stats);
        assert_eq!(back.best_validation_ll, ck.best_validation_ll);
        assert_eq!(back.model.proposal_net().to_flat(), ck.model.proposal_net().to_flat());
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let ctx = MaskedInstance::new(vec![0.7, 0.0], Bitmask::new(vec![true, false])).unwrap();
        assert_eq!(
            back.model.propose(std::slice::from_ref(&ctx)).unwrap(),
            ck.model.propose(std::slice::from_ref(&ctx)).unwrap()
        );
    }

    proptest::proptest! {
        #[test]
        fn header_floats_round_trip_exactly(mean in proptest::num::f64::NORMAL, std in 1e-300f64..1e300, ll in proptest::num::f64::NORMAL) {
            let mut ck = sample_checkpoint();
            ck.stats.mean[0] = mean;
            ck.stats.std[0] = std;
            ck.best_validation_ll = Some(ll);
            let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            proptest::prop_assert_eq!(back, ck);
        }
    }

    #[test]
    fn row_operations_keep_observed_cells() {
        let ck = sample_checkpoint();
        let row = [0.9, f64::NAN];
        let imputed = ck.impute_row(&row, 10, 1).unwrap();
        assert_eq!(imputed[0], 0.9);
        assert!(imputed[1] == 0.0 || imputed[1] == 1.0);
        let s = ck.sample_row(&row, 4, 2).unwrap();
        assert_eq!(s[0], 0.9);
        assert_eq!(ck.sample_row(&row, 4, 2).unwrap(), s);
        let ll = ck.log_likelihood_row(&[0.9, 1.0], &[false, true], 10, 3).unwrap();
        assert!(ll.energy.is_finite());
        assert!(ck.log_likelihood_row(&[f64::NAN, 1.0], &[true, true], 10, 3).is_err());
        assert!(ck.impute_row(&[0.0, 2.0], 10, 1).is_err());
    }

    #[test]
    fn original_unit_likelihood_includes_the_jacobian() {
        let mut ck = sample_checkpoint();
        let z = 0.6;
        let x = |ck: &Checkpoint| ck.stats.destandardize_value(0, z);
        let a = ck.log_likelihood_row(&[x(&ck), 1.0], &[false, true], 10, 3).unwrap();
        ck.stats.std[0] *= 2.0;
        let b = ck.log_likelihood_row(&[x(&ck), 1.0], &[false, true], 10, 3).unwrap();
        assert!((a.energy - b.energy - 2f64.ln()).abs() < 1e-9);
        assert!((a.proposal - b.proposal - 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn newer_version_fails_loudly() {
        let mut bytes = sample_checkpoint().to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("newer"), "{err}");
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample_checkpoint().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        assert!(Checkpoint::from_bytes(b"not a checkpoint at all").is_err());
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ace");
        let ck = sample_checkpoint();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap().to_bytes().unwrap(), ck.to_bytes().unwrap());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
