//! Deterministic styled-sequence corpus.
//!
//! Each sequence has a hidden style label `k`, a token sequence `l` and an
//! output sequence `x` with frames
//!
//! ```text
//! x_t = tanh(emb[l_t] A + s_k B) + eps_t,   eps_t ~ N(0, noise_std^2 I)
//! ```
//!
//! The style vectors `s_k` are the vertices of a centred regular simplex
//! scaled to norm `style_norm`. Everything is drawn from one ChaCha stream
//! seeded by `CorpusConfig::seed`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::nets::one_hot;
use crate::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub styles: usize,
    pub sequences_per_style: usize,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub embedding_dim: usize,
    pub output_dim: usize,
    pub style_dim: usize,
    pub style_norm: f64,
    pub noise_std: f64,
    /// Per-sequence Gaussian jitter on the style vector.
    pub style_jitter: f64,
    /// Train / validation / test fractions.
    pub split_fractions: [f64; 3],
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            styles: 7,
            sequences_per_style: 120,
            vocab_size: 20,
            min_len: 20,
            max_len: 40,
            embedding_dim: 8,
            output_dim: 12,
            style_dim: 8,
            style_norm: 1.0,
            noise_std: 0.1,
            style_jitter: 0.0,
            split_fractions: [0.8, 0.1, 0.1],
            seed: 7,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let bad = |field: &str, why: String| Err(Error::Config { field: field.into(), reason: why });
        let total: f64 = self.split_fractions.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.split_fractions.iter().any(|f| *f < 0.0) {
            return bad("split_fractions", format!("must be non-negative and sum to 1, got {total}"));
        }
        if self.styles == 0 {
            return bad("styles", "need at least one style".into());
        }
        if self.styles > 1 && self.styles - 1 > self.style_dim {
            return bad(
                "styles",
                format!(
                    "{} styles need a simplex of dimension {} but style_dim is {}",
                    self.styles,
                    self.styles - 1,
                    self.style_dim
                ),
            );
        }
        if self.sequences_per_style == 0 {
            return bad("sequences_per_style", "must be positive".into());
        }
        if self.vocab_size == 0 || self.embedding_dim == 0 || self.output_dim == 0 {
            return bad("vocab_size", "vocabulary, embedding and output dims must be positive".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("min_len", format!("need 1 <= min_len <= max_len, got {}..{}", self.min_len, self.max_len));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std", "must be finite and >= 0".into());
        }
        if !(self.style_norm >= 0.0 && self.style_norm.is_finite()) {
            return bad("style_norm", "must be finite and >= 0".into());
        }
        if !(self.style_jitter >= 0.0 && self.style_jitter.is_finite()) {
            return bad("style_jitter", "must be finite and >= 0".into());
        }
        Ok(())
    }

    pub fn total_sequences(&self) -> usize {
        self.styles * self.sequences_per_style
    }
}

/// Generator parameters; only evaluation and the supervised paths read it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorTruth {
    pub style_vectors: Vec<Vec<f64>>,
    /// `[embedding_dim, output_dim]`
    pub a: Tensor,
    /// `[style_dim, output_dim]`
    pub b: Tensor,
    /// `[vocab_size, embedding_dim]`
    pub emb: Tensor,
}

impl GeneratorTruth {
    /// Noise-free frame `tanh(emb[token] A + style B)`.
    pub fn frame(&self, token: usize, style: &[f64]) -> Vec<f64> {
        let p = self.a.cols();
        let e = self.emb.cols();
        let emb = self.emb.row_slice(token);
        (0..p)
            .map(|j| {
                let mut pre = 0.0;
                for i in 0..e {
                    pre += emb[i] * self.a.values[i * p + j];
                }
                for (i, s) in style.iter().enumerate() {
                    pre += s * self.b.values[i * p + j];
                }
                pre.tanh()
            })
            .collect()
    }

    /// Noise-free output sequence for a token sequence and style vector.
    pub fn mean_output(&self, tokens: &[usize], style: &[f64]) -> Tensor {
        let rows: Vec<Vec<f64>> = tokens.iter().map(|&t| self.frame(t, style)).collect();
        Tensor::from_rows(&rows)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub id: usize,
    pub split: Split,
    pub label: usize,
    pub l: Vec<usize>,
    pub x: Vec<Vec<f64>>,
}

impl SequenceRecord {
    pub fn len(&self) -> usize {
        self.l.len()
    }

    pub fn is_empty(&self) -> bool {
        self.l.is_empty()
    }

    pub fn l_tensor(&self, vocab: usize) -> Tensor {
        one_hot(&self.l, vocab)
    }

    pub fn x_tensor(&self) -> Tensor {
        Tensor::from_rows(&self.x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleCorpus {
    pub config: CorpusConfig,
    pub sequences: Vec<SequenceRecord>,
    pub truth: GeneratorTruth,
}

impl StyleCorpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SequenceRecord> {
        self.sequences.iter().filter(move |s| s.split == split)
    }

    pub fn by_id(&self, id: usize) -> Option<&SequenceRecord> {
        self.sequences.get(id).filter(|s| s.id == id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("corpus serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, Error> {
        let c: StyleCorpus = serde_json::from_str(s).map_err(|e| Error::Corrupt(e.to_string()))?;
        c.config.validate()?;
        Ok(c)
    }
}

/// Simplex vertices with pairwise angles maximised, scaled to `norm`,
/// embedded in `dim` coordinates (Helmert basis).
pub fn simplex_vertices(k: usize, dim: usize, norm: f64) -> Vec<Vec<f64>> {
    if k == 1 {
        return vec![vec![0.0; dim]];
    }
    let vertex_norm = ((k - 1) as f64 / k as f64).sqrt();
    (0..k)
        .map(|v| {
            let mut s = vec![0.0; dim];
            for j in 1..k {
                let scale = 1.0 / ((j * (j + 1)) as f64).sqrt();
                let h = match v.cmp(&j) {
                    std::cmp::Ordering::Less => scale,
                    std::cmp::Ordering::Equal => -(j as f64) * scale,
                    std::cmp::Ordering::Greater => 0.0,
                };
                s[j - 1] = h * norm / vertex_norm;
            }
            s
        })
        .collect()
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let values = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::matrix(rows, cols, values)
}

fn draw_truth(config: &CorpusConfig, rng: &mut ChaCha8Rng) -> GeneratorTruth {
    let emb = gaussian_matrix(rng, config.vocab_size, config.embedding_dim, 1.0);
    let a = gaussian_matrix(rng, config.embedding_dim, config.output_dim, (1.0 / config.embedding_dim as f64).sqrt());
    let b = gaussian_matrix(rng, config.style_dim, config.output_dim, 1.0);
    let style_vectors = simplex_vertices(config.styles, config.style_dim, config.style_norm);
    GeneratorTruth { style_vectors, a, b, emb }
}

/// Generator parameters for a configuration, without the sequences.
pub fn generator_truth(config: &CorpusConfig) -> Result<GeneratorTruth, Error> {
    config.validate()?;
    Ok(draw_truth(config, &mut ChaCha8Rng::seed_from_u64(config.seed)))
}

/// Per-style split sizes: rounded train and validation counts, remainder to test.
fn split_counts(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let train = ((n as f64) * fractions[0]).round() as usize;
    let val = (((n as f64) * fractions[1]).round() as usize).min(n - train.min(n));
    let train = train.min(n);
    [train, val, n - train - val]
}

pub fn generate_corpus(config: &CorpusConfig) -> Result<StyleCorpus, Error> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let truth = draw_truth(config, &mut rng);
    let noise = Normal::new(0.0, config.noise_std).expect("validated noise std");
    let jitter = Normal::new(0.0, config.style_jitter).expect("validated jitter");
    let counts = split_counts(config.sequences_per_style, &config.split_fractions);

    let mut sequences = Vec::with_capacity(config.total_sequences());
    for label in 0..config.styles {
        let mut splits: Vec<Split> = counts
            .iter()
            .zip(Split::ALL)
            .flat_map(|(&c, s)| std::iter::repeat_n(s, c))
            .collect();
        splits.shuffle(&mut rng);
        for split in splits {
            let len = rng.random_range(config.min_len..=config.max_len);
            let l: Vec<usize> = (0..len).map(|_| rng.random_range(0..config.vocab_size)).collect();
            let mut style = truth.style_vectors[label].clone();
            if config.style_jitter > 0.0 {
                style.iter_mut().for_each(|s| *s += jitter.sample(&mut rng));
            }
            let x = l
                .iter()
                .map(|&tok| {
                    let mut f = truth.frame(tok, &style);
                    if config.noise_std > 0.0 {
                        f.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
                    }
                    f
                })
                .collect();
            sequences.push(SequenceRecord { id: sequences.len(), split, label, l, x });
        }
    }
    Ok(StyleCorpus { config: config.clone(), sequences, truth })
}

/// Irreducible per-frame MSE of the exact conditional mean, `p * noise_std^2`.
pub fn mse_floor(config: &CorpusConfig) -> f64 {
    config.output_dim as f64 * config.noise_std * config.noise_std
}

/// Frames drawn by [`between_style_gap`].
pub const GAP_SAMPLES: usize = 20_000;

/// Monte-Carlo estimate of the excess per-frame MSE of the best style-blind
/// predictor (the per-token mean over styles) above the noise floor.
pub fn between_style_gap(config: &CorpusConfig) -> Result<f64, Error> {
    between_style_gap_mc(config, GAP_SAMPLES, config.seed ^ 0x9e37_79b9_7f4a_7c15)
}

pub fn between_style_gap_mc(config: &CorpusConfig, samples: usize, mc_seed: u64) -> Result<f64, Error> {
    let truth = generator_truth(config)?;
    let token_means = style_averaged_frames(config, &truth);
    let mut rng = ChaCha8Rng::seed_from_u64(mc_seed);
    let mut acc = 0.0;
    for _ in 0..samples {
        let tok = rng.random_range(0..config.vocab_size);
        let k = rng.random_range(0..config.styles);
        let f = truth.frame(tok, &truth.style_vectors[k]);
        acc += f.iter().zip(&token_means[tok]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(acc / samples as f64)
}

/// Per token, the noise-free frame averaged over all styles.
pub fn style_averaged_frames(config: &CorpusConfig, truth: &GeneratorTruth) -> Vec<Vec<f64>> {
    (0..config.vocab_size)
        .map(|tok| {
            let mut m = vec![0.0; config.output_dim];
            for s in &truth.style_vectors {
                for (acc, v) in m.iter_mut().zip(truth.frame(tok, s)) {
                    *acc += v / config.styles as f64;
                }
            }
            m
        })
        .collect()
}
