//! System assembly, the training loop with early stopping, and checkpoints.
//!
//! Each epoch shuffles the training split with the run RNG, forms batches,
//! evaluates per-sequence losses (optionally on a worker pool, reduced in
//! batch order so results do not depend on the thread count), applies one
//! Adam step to the weights per batch, and one SGD step to each training
//! latent in the batch. Heuristic systems then refine held-out latents with
//! frozen weights. The checkpoint keeps the state of the epoch with the
//! lowest validation MSE.

mod checkpoint;
mod optim;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tensor};
use crate::nets::{
    decode, encode, DecoderNet, EncoderNet, GaussianEncoder, HiddenSizes, LatentTable,
    LayerOrder, Params,
};
use crate::objectives::{
    cvae_elbo, frame_mse, heuristic_encode, heuristic_loss, supervised_loss, vq_vae_loss, Datum,
    HyperParams, LossGraph, LATENT_PARAM,
};
use crate::quantizer::{quantize, Codebook, CODEBOOK_PARAM};
use crate::synthdata::{Split, StyleCorpus};
use crate::Error;

pub use checkpoint::{corpus_digest, learning_curve_csv, Checkpoint, EpochRecord, RngState, SCHEMA_VERSION};
pub use optim::{adam_step, sgd_update, AdamConfig, AdamState};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "CTRL_SYNTH_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SystemId {
    Bot,
    Sup,
    Vqs,
    Vqr,
    Hzi,
    Hsi,
    Cvae,
}

impl SystemId {
    /// The six systems of the headline comparison.
    pub const HEADLINE: [SystemId; 6] =
        [SystemId::Bot, SystemId::Sup, SystemId::Vqs, SystemId::Vqr, SystemId::Hzi, SystemId::Hsi];

    pub fn name(self) -> &'static str {
        match self {
            SystemId::Bot => "BOT",
            SystemId::Sup => "SUP",
            SystemId::Vqs => "VQS",
            SystemId::Vqr => "VQR",
            SystemId::Hzi => "HZI",
            SystemId::Hsi => "HSI",
            SystemId::Cvae => "CVAE",
        }
    }

    pub fn latent_scheme(self) -> LatentScheme {
        match self {
            SystemId::Bot => LatentScheme::None,
            SystemId::Sup => LatentScheme::Labels,
            SystemId::Vqs | SystemId::Vqr => LatentScheme::Codebook,
            SystemId::Hzi | SystemId::Hsi => LatentScheme::LatentTable,
            SystemId::Cvae => LatentScheme::GaussianPosterior,
        }
    }

    pub fn is_heuristic(self) -> bool {
        matches!(self, SystemId::Hzi | SystemId::Hsi)
    }

    pub fn is_vq(self) -> bool {
        matches!(self, SystemId::Vqs | SystemId::Vqr)
    }
}

impl fmt::Display for SystemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SystemId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let all = [SystemId::Cvae].into_iter().chain(SystemId::HEADLINE);
        all.into_iter().find(|id| id.name().eq_ignore_ascii_case(s)).ok_or_else(|| Error::Config {
            field: "system".into(),
            reason: format!("unknown system `{s}` (expected BOT, SUP, VQS, VQR, HZI, HSI or CVAE)"),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentScheme {
    None,
    Labels,
    Codebook,
    LatentTable,
    GaussianPosterior,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub hidden: HiddenSizes,
    pub latent_dim: usize,
    pub codebook_size: usize,
    pub hyper: HyperParams,
    /// Monte-Carlo samples per sequence for the CVAE bound.
    pub cvae_samples: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            hidden: HiddenSizes::default(),
            latent_dim: 4,
            codebook_size: 64,
            hyper: HyperParams { sigma2_x: 30.0, ..HyperParams::default() },
            cvae_samples: 1,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let bad = |field: &str, reason: &str| {
            Err(Error::Config { field: field.into(), reason: reason.into() })
        };
        if self.hidden.feedforward == 0 || self.hidden.recurrent == 0 {
            return bad("hidden", "layer sizes must be positive");
        }
        if self.latent_dim == 0 {
            return bad("latent_dim", "must be positive");
        }
        if self.codebook_size == 0 {
            return bad("codebook_size", "must be positive");
        }
        if self.cvae_samples == 0 {
            return bad("cvae_samples", "must be positive");
        }
        self.hyper.validate()
    }
}

/// Declarative description of one system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub system: SystemId,
    pub arch: ArchConfig,
    pub objective: String,
    pub latent_scheme: LatentScheme,
    pub init: String,
}

impl SystemSpec {
    pub fn new(system: SystemId, arch: ArchConfig) -> Self {
        let (objective, init) = match system {
            SystemId::Bot => ("frame-mse", "none"),
            SystemId::Sup => ("frame-mse", "one-hot label code"),
            SystemId::Vqs | SystemId::Vqr => ("vq-vae", "random codebook"),
            SystemId::Hzi => ("heuristic", "zeros"),
            SystemId::Hsi => ("heuristic", "label-derived"),
            SystemId::Cvae => ("elbo", "standard-normal prior"),
        };
        SystemSpec {
            system,
            arch,
            objective: objective.into(),
            latent_scheme: system.latent_scheme(),
            init: init.into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// SGD step size for latent-table entries (per-frame MSE gradient).
    pub latent_lr: f64,
    /// SGD steps per epoch for each held-out latent.
    pub heldout_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 150,
            patience: 10,
            batch_size: 35,
            adam: AdamConfig::default(),
            latent_lr: 0.05,
            heldout_steps: 5,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let bad = |field: &str, reason: &str| {
            Err(Error::Config { field: field.into(), reason: reason.into() })
        };
        if self.max_epochs == 0 {
            return bad("max_epochs", "must be at least 1");
        }
        if self.patience == 0 {
            return bad("patience", "must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if !(self.adam.lr >= 0.0 && self.adam.lr.is_finite()) {
            return bad("adam.lr", "must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return bad("adam", "moment decay rates must lie in [0, 1)");
        }
        if !(self.adam.eps > 0.0) {
            return bad("adam.eps", "must be positive");
        }
        if !(self.latent_lr > 0.0 && self.latent_lr.is_finite()) {
            return bad("latent_lr", "must be positive");
        }
        Ok(())
    }
}

/// Corpus dimensions a model is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusDims {
    pub vocab: usize,
    pub output_dim: usize,
    pub styles: usize,
}

impl CorpusDims {
    pub fn of(corpus: &StyleCorpus) -> Self {
        CorpusDims {
            vocab: corpus.config.vocab_size,
            output_dim: corpus.config.output_dim,
            styles: corpus.config.styles,
        }
    }
}

/// One corpus sequence with its tensors built once.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: usize,
    pub split: Split,
    pub label: usize,
    pub l: Tensor,
    pub x: Tensor,
}

impl Prepared {
    pub fn datum(&self) -> Datum<'_> {
        Datum { l: &self.l, x: &self.x }
    }
}

pub fn prepare(corpus: &StyleCorpus) -> Vec<Prepared> {
    let vocab = corpus.config.vocab_size;
    corpus
        .sequences
        .iter()
        .map(|s| Prepared {
            id: s.id,
            split: s.split,
            label: s.label,
            l: s.l_tensor(vocab),
            x: s.x_tensor(),
        })
        .collect()
}

/// Injective label code in `R^dim`: `0.1 * e_(k mod dim)`, with the sign
/// flipping and magnitude growing each time the labels wrap around.
pub fn label_init(label: usize, dim: usize) -> Vec<f64> {
    let mut z = vec![0.0; dim];
    let round = label / dim;
    let sign = if round % 2 == 0 { 1.0 } else { -1.0 };
    z[label % dim] = sign * 0.1 * (1 + round / 2) as f64;
    z
}

/// Trainable state of one system.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: SystemSpec,
    pub dims: CorpusDims,
    pub decoder: DecoderNet,
    pub encoder: Option<EncoderNet>,
    pub codebook: Option<Codebook>,
    pub tables: BTreeMap<Split, LatentTable>,
}

impl Model {
    pub fn new(spec: &SystemSpec, dims: CorpusDims, data: &[Prepared], rng: &mut impl Rng) -> Self {
        let arch = &spec.arch;
        let system = spec.system;
        let dec_latent = match system {
            SystemId::Bot => 0,
            SystemId::Sup => dims.styles,
            _ => arch.latent_dim,
        };
        let decoder = DecoderNet::new(rng, dims.vocab, dec_latent, dims.output_dim, arch.hidden);
        let encoder = match system {
            SystemId::Vqs | SystemId::Vqr | SystemId::Cvae => {
                let order = if system == SystemId::Vqr { LayerOrder::Reversed } else { LayerOrder::Same };
                Some(EncoderNet::new(
                    rng,
                    dims.output_dim + dims.vocab,
                    arch.latent_dim,
                    arch.hidden,
                    order,
                    system == SystemId::Cvae,
                ))
            }
            _ => None,
        };
        let codebook =
            system.is_vq().then(|| Codebook::random(rng, arch.codebook_size, arch.latent_dim));
        let mut tables = BTreeMap::new();
        if system.is_heuristic() {
            for split in Split::ALL {
                let mut t = LatentTable::new(arch.latent_dim);
                for item in data.iter().filter(|d| d.split == split) {
                    let z = if system == SystemId::Hsi {
                        label_init(item.label, arch.latent_dim)
                    } else {
                        vec![0.0; arch.latent_dim]
                    };
                    t.set(item.id, z);
                }
                tables.insert(split, t);
            }
        }
        Model { spec: spec.clone(), dims, decoder, encoder, codebook, tables }
    }

    pub fn system(&self) -> SystemId {
        self.spec.system
    }

    /// Weights, codebook included; latent tables excluded.
    pub fn parameter_count(&self) -> usize {
        self.decoder.params.count()
            + self.encoder.as_ref().map_or(0, |e| e.params.count())
            + self.codebook.as_ref().map_or(0, |c| c.codewords.len())
    }

    fn label_code(&self, label: usize) -> Vec<f64> {
        let mut z = vec![0.0; self.dims.styles];
        z[label] = 1.0;
        z
    }

    fn encoder(&self) -> &EncoderNet {
        self.encoder.as_ref().expect("system has an encoder")
    }

    fn codebook(&self) -> &Codebook {
        self.codebook.as_ref().expect("system has a codebook")
    }

    fn table_latent(&self, item: &Prepared) -> Result<&[f64], Error> {
        self.tables
            .get(&item.split)
            .and_then(|t| t.get(item.id))
            .ok_or(Error::MissingLatent(item.id))
    }

    /// Continuous latent inferred for a sequence before any quantization:
    /// encoder output, posterior mean, table entry or label code.
    pub fn infer_latent(&self, item: &Prepared) -> Result<Option<Vec<f64>>, Error> {
        Ok(match self.system() {
            SystemId::Bot => None,
            SystemId::Sup => Some(self.label_code(item.label)),
            SystemId::Vqs | SystemId::Vqr => Some(encode(self.encoder(), &item.x, &item.l)?),
            SystemId::Hzi | SystemId::Hsi => Some(self.table_latent(item)?.to_vec()),
            SystemId::Cvae => Some(self.posterior_mean(item)?),
        })
    }

    fn posterior_mean(&self, item: &Prepared) -> Result<Vec<f64>, Error> {
        let mut g = crate::autodiff::Graph::new();
        let x = g.constant(item.x.clone());
        let l = g.constant(item.l.clone());
        let (mu, _) = GaussianEncoder::build_gaussian(self.encoder(), &mut g, x, l, false)?;
        g.run()?;
        Ok(g.value(mu)?.values.clone())
    }

    /// Codeword index for VQ systems.
    pub fn codeword(&self, z: &[f64]) -> Result<(usize, Vec<f64>), Error> {
        quantize(z, self.codebook())
    }

    /// Latent actually fed to the decoder: quantized for VQ systems.
    pub fn decoder_input(&self, z: Option<Vec<f64>>) -> Result<Option<Vec<f64>>, Error> {
        match (self.system().is_vq(), z) {
            (true, Some(z)) => Ok(Some(self.codeword(&z)?.1)),
            (_, z) => Ok(z),
        }
    }

    pub fn synthesize(&self, l: &Tensor, z: Option<&[f64]>) -> Result<Tensor, Error> {
        Ok(decode(&self.decoder, l, z)?)
    }

    pub fn reconstruct(&self, item: &Prepared) -> Result<Tensor, Error> {
        let z = self.decoder_input(self.infer_latent(item)?)?;
        self.synthesize(&item.l, z.as_deref())
    }

    /// Per-frame MSE over a split: total squared error over total frames.
    pub fn split_mse(&self, data: &[Prepared], split: Split, pool: &Pool) -> Result<f64, Error> {
        let items: Vec<&Prepared> = data.iter().filter(|d| d.split == split).collect();
        let per = pool.map(&items, |item| {
            let xhat = self.reconstruct(item)?;
            Ok(frame_mse(&xhat, &item.x)? * item.x.rows() as f64)
        })?;
        let frames: usize = items.iter().map(|d| d.x.rows()).sum();
        Ok(per.iter().sum::<f64>() / frames.max(1) as f64)
    }

    fn sequence_loss(&self, item: &Prepared, seed: u64) -> Result<LossGraph, Error> {
        let d = item.datum();
        let hyper = &self.spec.arch.hyper;
        match self.system() {
            SystemId::Bot => supervised_loss(&self.decoder, d, None, true),
            SystemId::Sup => supervised_loss(&self.decoder, d, Some(&self.label_code(item.label)), true),
            SystemId::Vqs | SystemId::Vqr => {
                vq_vae_loss(&self.decoder, self.encoder(), self.codebook(), d, hyper.beta, hyper.sigma2_x)
            }
            SystemId::Hzi | SystemId::Hsi => heuristic_loss(&self.decoder, d, self.table_latent(item)?, true),
            SystemId::Cvae => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let n = self.spec.arch.cvae_samples;
                cvae_elbo(&self.decoder, self.encoder(), d, n, hyper.sigma2_x, &mut rng)
            }
        }
    }

    fn apply_weight_step(&mut self, grads: &Gradients, state: &mut AdamState, cfg: &AdamConfig) {
        debug_assert!(!self.decoder.params.0.contains_key(LATENT_PARAM));
        state.begin_step();
        state.apply_group(&mut self.decoder.params, grads, cfg);
        if let Some(enc) = self.encoder.as_mut() {
            state.apply_group(&mut enc.params, grads, cfg);
        }
        if let (Some(cb), Some(g)) = (self.codebook.as_mut(), grads.get(CODEBOOK_PARAM)) {
            state.apply(CODEBOOK_PARAM, &mut cb.codewords, g, cfg);
        }
    }

    /// All weight tensors under their graph names.
    pub fn weights(&self) -> Params {
        let mut p = self.decoder.params.clone();
        if let Some(enc) = &self.encoder {
            for (k, v) in enc.params.iter() {
                p.insert(k.clone(), v.clone());
            }
        }
        p
    }
}

/// Worker pool sized by [`THREADS_ENV`]; `map` preserves input order.
pub struct Pool {
    inner: Option<rayon::ThreadPool>,
}

impl Pool {
    pub fn from_env() -> Result<Self, Error> {
        let threads = match std::env::var(THREADS_ENV) {
            Ok(v) => v.trim().parse::<usize>().ok().filter(|&n| n >= 1).ok_or_else(|| {
                Error::Config { field: THREADS_ENV.into(), reason: format!("`{v}` is not a positive integer") }
            })?,
            Err(_) => 1,
        };
        Pool::with_threads(threads)
    }

    pub fn with_threads(threads: usize) -> Result<Self, Error> {
        if threads <= 1 {
            return Ok(Pool { inner: None });
        }
        let inner = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
        Ok(Pool { inner: Some(inner) })
    }

    pub fn map<T: Sync, R: Send>(
        &self,
        items: &[T],
        f: impl Fn(&T) -> Result<R, Error> + Sync + Send,
    ) -> Result<Vec<R>, Error> {
        match &self.inner {
            None => items.iter().map(f).collect(),
            Some(pool) => pool.install(|| items.par_iter().map(f).collect()),
        }
    }
}

fn accumulate(acc: &mut Gradients, g: Gradients) {
    for (k, v) in g {
        match acc.get_mut(&k) {
            Some(a) => a.add_assign(&v),
            None => {
                acc.insert(k, v);
            }
        }
    }
}

fn all_finite(g: &Gradients) -> bool {
    g.values().all(Tensor::is_finite)
}

/// Held-out latent refinement with frozen weights, warm-started from the
/// current table entries. Returns the number of entries whose loss rose.
fn refine_heldout(model: &mut Model, data: &[Prepared], cfg: &TrainConfig, pool: &Pool) -> Result<usize, Error> {
    let mut warnings = 0;
    for split in [Split::Val, Split::Test] {
        let items: Vec<&Prepared> = data.iter().filter(|d| d.split == split).collect();
        let m = &*model;
        let results = pool.map(&items, |item| {
            let z = m.table_latent(item)?;
            heuristic_encode(&m.decoder, item.datum(), z, cfg.heldout_steps, cfg.latent_lr)
        })?;
        let table = model.tables.get_mut(&split).expect("held-out table");
        for (item, enc) in items.iter().zip(results) {
            warnings += enc.worsened as usize;
            table.set(item.id, enc.z);
        }
    }
    Ok(warnings)
}

fn check_dims(spec: &SystemSpec, corpus: &StyleCorpus) -> Result<(), Error> {
    spec.arch.validate()?;
    if spec.latent_scheme != spec.system.latent_scheme() {
        return Err(Error::Config {
            field: "latent_scheme".into(),
            reason: format!("{} requires {:?}", spec.system, spec.system.latent_scheme()),
        });
    }
    if corpus.split(Split::Train).next().is_none() || corpus.split(Split::Val).next().is_none() {
        return Err(Error::Config {
            field: "split_fractions".into(),
            reason: "training needs non-empty train and validation splits".into(),
        });
    }
    Ok(())
}

/// Trains one system and returns the best-validation checkpoint.
pub fn train_system(spec: &SystemSpec, corpus: &StyleCorpus, cfg: &TrainConfig) -> Result<Checkpoint, Error> {
    train_with_pool(spec, corpus, cfg, &Pool::from_env()?)
}

pub fn train_with_pool(
    spec: &SystemSpec,
    corpus: &StyleCorpus,
    cfg: &TrainConfig,
    pool: &Pool,
) -> Result<Checkpoint, Error> {
    cfg.validate()?;
    check_dims(spec, corpus)?;
    let data = prepare(corpus);
    let dims = CorpusDims::of(corpus);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::new(spec, dims, &data, &mut rng);
    let mut adam = AdamState::default();
    let train_idx: Vec<usize> = (0..data.len()).filter(|&i| data[i].split == Split::Train).collect();
    let heuristic = spec.system.is_heuristic();

    let mut history: Vec<EpochRecord> = Vec::new();
    let mut best: Option<(usize, f64, Model)> = None;
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let jobs: Vec<(usize, u64)> = batch.iter().map(|&i| (i, rng.random())).collect();
            let m = &model;
            let results = pool.map(&jobs, |&(i, seed)| {
                let lg = m.sequence_loss(&data[i], seed)?;
                Ok((lg.total(), lg.gradients()?))
            })?;
            let mut acc = Gradients::new();
            for (&(i, _), (loss, mut grads)) in jobs.iter().zip(results) {
                if !loss.is_finite() || !all_finite(&grads) {
                    return Err(Error::Divergence { epoch });
                }
                if heuristic {
                    let g = grads.remove(LATENT_PARAM).expect("latent gradient");
                    let table = model.tables.get_mut(&Split::Train).expect("train table");
                    let mut z = Tensor::row(table.get(data[i].id).expect("train latent").to_vec());
                    sgd_update(&mut z, &g, cfg.latent_lr);
                    table.set(data[i].id, z.values);
                }
                accumulate(&mut acc, grads);
            }
            let inv = 1.0 / batch.len() as f64;
            acc.values_mut().for_each(|g| *g = g.scaled(inv));
            model.apply_weight_step(&acc, &mut adam, &cfg.adam);
        }
        let warnings = if heuristic { refine_heldout(&mut model, &data, cfg, pool)? } else { 0 };
        let rec = EpochRecord {
            epoch,
            train_mse: model.split_mse(&data, Split::Train, pool)?,
            val_mse: model.split_mse(&data, Split::Val, pool)?,
            test_mse: model.split_mse(&data, Split::Test, pool)?,
            latent_warnings: warnings,
        };
        if ![rec.train_mse, rec.val_mse, rec.test_mse].iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence { epoch });
        }
        let improved = best.as_ref().is_none_or(|(_, v, _)| rec.val_mse < *v);
        history.push(rec);
        if improved {
            best = Some((epoch, history.last().expect("pushed").val_mse, model.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (epoch, _, best_model) = best.expect("at least one epoch");
    Ok(Checkpoint::from_model(&best_model, cfg, corpus_digest(corpus), epoch, history, RngState::of(&rng)))
}
