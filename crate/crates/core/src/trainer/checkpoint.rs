//! Versioned JSON checkpoints. All maps are ordered, so a loaded checkpoint
//! serializes back to identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CorpusDims, Model, SystemSpec, TrainConfig};
use crate::autodiff::Tensor;
use crate::nets::{LatentTable, Params};
use crate::quantizer::Codebook;
use crate::synthdata::{Split, StyleCorpus};
use crate::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub test_mse: f64,
    /// Held-out latents whose loss rose during refinement this epoch.
    #[serde(default)]
    pub latent_warnings: usize,
}

/// Position of the run RNG after the last completed epoch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// `u128` word position, kept as a decimal string.
    pub word_pos: String,
}

impl RngState {
    pub fn of(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng, Error> {
        let bad = || Error::Corrupt("rng_state".into());
        let bytes = hex::decode(&self.seed).map_err(|_| bad())?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad())?;
        let pos: u128 = self.word_pos.parse().map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub spec: SystemSpec,
    pub dims: CorpusDims,
    pub config: TrainConfig,
    /// SHA-256 of the corpus JSON the run was trained on.
    pub corpus_digest: String,
    /// Epoch whose state is stored (lowest validation MSE).
    pub epoch: usize,
    pub params: Params,
    pub codebook: Option<Tensor>,
    pub latent_tables: BTreeMap<Split, LatentTable>,
    pub history: Vec<EpochRecord>,
    pub rng_state: RngState,
}

pub fn corpus_digest(corpus: &StyleCorpus) -> String {
    hex::encode(Sha256::digest(corpus.to_json().as_bytes()))
}

impl Checkpoint {
    pub fn from_model(
        model: &Model,
        config: &TrainConfig,
        corpus_digest: String,
        epoch: usize,
        history: Vec<EpochRecord>,
        rng_state: RngState,
    ) -> Self {
        Checkpoint {
            version: SCHEMA_VERSION,
            spec: model.spec.clone(),
            dims: model.dims,
            config: *config,
            corpus_digest,
            epoch,
            params: model.weights(),
            codebook: model.codebook.as_ref().map(|c| c.codewords.clone()),
            latent_tables: model.tables.clone(),
            history,
            rng_state,
        }
    }

    pub fn best_record(&self) -> Option<&EpochRecord> {
        self.history.iter().find(|r| r.epoch == self.epoch)
    }

    /// Rebuilds the model, checking every tensor against the architecture.
    pub fn model(&self) -> Result<Model, Error> {
        self.spec.arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::new(&self.spec, self.dims, &[], &mut rng);
        let expected = model.weights();
        if expected.names().ne(self.params.names()) {
            return Err(Error::Corrupt("parameter names do not match the architecture".into()));
        }
        for (name, t) in self.params.iter() {
            if expected.get(name).shape != t.shape || t.values.len() != t.shape.iter().product::<usize>() {
                return Err(Error::Corrupt(format!("parameter `{name}` has the wrong shape")));
            }
        }
        let split = |prefix: &str| {
            Params(self.params.0.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(k, v)| (k.clone(), v.clone())).collect())
        };
        model.decoder.params = split("dec.");
        if let Some(enc) = model.encoder.as_mut() {
            enc.params = split("enc.");
        }
        match (&mut model.codebook, &self.codebook) {
            (Some(cb), Some(t)) if t.shape == cb.codewords.shape => *cb = Codebook::new(t.clone()),
            (None, None) => {}
            _ => return Err(Error::Corrupt("codebook does not match the architecture".into())),
        }
        if self.spec.system.is_heuristic() {
            for split in Split::ALL {
                let t = self.latent_tables.get(&split).ok_or_else(|| {
                    Error::Corrupt(format!("missing {} latent table", split.name()))
                })?;
                if t.dim != self.spec.arch.latent_dim || t.entries.values().any(|z| z.len() != t.dim) {
                    return Err(Error::Corrupt("latent table dimension".into()));
                }
            }
            model.tables = self.latent_tables.clone();
        } else if !self.latent_tables.is_empty() {
            return Err(Error::Corrupt("unexpected latent tables".into()));
        }
        Ok(model)
    }

    /// Fails unless `corpus` is the one this checkpoint was trained on.
    pub fn check_corpus(&self, corpus: &StyleCorpus) -> Result<(), Error> {
        if CorpusDims::of(corpus) != self.dims {
            return Err(Error::Mismatch("corpus dimensions differ".into()));
        }
        if corpus_digest(corpus) != self.corpus_digest {
            return Err(Error::Mismatch("corpus digest differs".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, Error> {
        let raw: serde_json::Value =
            serde_json::from_str(s).map_err(|e| Error::Corrupt(format!("checkpoint: {e}")))?;
        let found = raw
            .get("version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::Corrupt("checkpoint has no version".into()))?;
        if found != u64::from(SCHEMA_VERSION) {
            return Err(Error::SchemaVersion {
                found: u32::try_from(found).unwrap_or(u32::MAX),
                expected: SCHEMA_VERSION,
            });
        }
        let ck: Checkpoint =
            serde_json::from_value(raw).map_err(|e| Error::Corrupt(format!("checkpoint: {e}")))?;
        ck.model()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_json(&s)
    }
}

/// `epoch,train_mse,val_mse,test_mse` rows.
pub fn learning_curve_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_mse,val_mse,test_mse\n");
    for r in history {
        writeln!(out, "{},{},{},{}", r.epoch, r.train_mse, r.val_mse, r.test_mse).expect("string write");
    }
    out
}
