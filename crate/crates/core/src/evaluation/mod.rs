//! Objective analyses over trained checkpoints: MSE tables, latent-space
//! clustering and nearest-neighbour label agreement, oracle-classifier
//! confusion matrices, control schemes, and 2-D projections.

mod report;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::autodiff::Tensor;
use crate::quantizer::{entropy_bits, usage_stats, LabelUsage};
use crate::synthdata::{GeneratorTruth, Split, StyleCorpus};
use crate::trainer::{prepare, Checkpoint, Model, Pool, Prepared, SystemId};
use crate::Error;

pub use report::{
    cluster_report_csv, confusion_csv, learning_curves_svg, metrics_csv, scatter_csv, scatter_svg,
    ScatterRow, NMI_NOTE,
};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub system: SystemId,
    pub params: usize,
    pub best_epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub test_mse: f64,
}

/// Per-frame MSE of each checkpoint on every split, recomputed from the
/// stored state (held-out latent tables for heuristic systems, encoder
/// outputs for VQ systems).
pub fn mse_table(checkpoints: &[Checkpoint], corpus: &StyleCorpus, pool: &Pool) -> Result<Vec<MetricsRow>, Error> {
    let data = prepare(corpus);
    checkpoints
        .iter()
        .map(|ck| {
            ck.check_corpus(corpus)?;
            let model = ck.model()?;
            let [train_mse, val_mse, test_mse] =
                Split::ALL.map(|s| model.split_mse(&data, s, pool));
            Ok(MetricsRow {
                system: ck.spec.system,
                params: model.parameter_count(),
                best_epoch: ck.epoch,
                train_mse: train_mse?,
                val_mse: val_mse?,
                test_mse: test_mse?,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct KnnCounts {
    pub points: usize,
    /// Points whose nearest neighbour carries a different label.
    pub nearest_disagree: usize,
    /// Points with a differently labelled point among their `k` nearest.
    pub any_disagree: usize,
}

impl KnnCounts {
    pub fn nearest_rate(&self) -> f64 {
        self.nearest_disagree as f64 / self.points as f64
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// The `k` nearest other points of `i`, closest first, ties to lower index.
fn nearest(points: &[(Vec<f64>, usize)], i: usize, k: usize) -> Vec<usize> {
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for (j, (z, _)) in points.iter().enumerate() {
        if j == i {
            continue;
        }
        let d = sq_dist(&points[i].0, z);
        if best.len() == k && d >= best[k - 1].0 {
            continue;
        }
        let pos = best.partition_point(|&(bd, _)| bd <= d);
        best.insert(pos, (d, j));
        best.truncate(k);
    }
    best.into_iter().map(|(_, j)| j).collect()
}

/// Exact brute-force k-NN label disagreement in Euclidean latent space.
pub fn knn_disagreement(points: &[(Vec<f64>, usize)], k: usize) -> Result<KnnCounts, Error> {
    if k == 0 || k >= points.len() {
        return Err(Error::Config {
            field: "k".into(),
            reason: format!("need 1 <= k < {} points, got {k}", points.len()),
        });
    }
    let mut counts = KnnCounts { points: points.len(), nearest_disagree: 0, any_disagree: 0 };
    for (i, (_, label)) in points.iter().enumerate() {
        let nn = nearest(points, i, k);
        counts.nearest_disagree += (points[nn[0]].1 != *label) as usize;
        counts.any_disagree += nn.iter().any(|&j| points[j].1 != *label) as usize;
    }
    Ok(counts)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClusterMetrics {
    pub points: usize,
    pub purity: f64,
    /// Mutual information over `max(H(cluster), H(label))`, in bits.
    pub nmi: f64,
    pub total_indices: usize,
    pub per_label: Vec<LabelUsage>,
}

/// Purity, NMI and per-label index usage from `(id, cluster, label)`.
/// NMI is 1 when both partitions are trivial (zero entropy).
pub fn cluster_metrics(assignments: &[(usize, usize, usize)]) -> Result<ClusterMetrics, Error> {
    let n = assignments.len();
    if n == 0 {
        return Err(Error::Invalid("cluster metrics need at least one point".into()));
    }
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut clusters: BTreeMap<usize, usize> = BTreeMap::new();
    let mut labels: BTreeMap<usize, usize> = BTreeMap::new();
    for &(_, c, l) in assignments {
        *joint.entry((c, l)).or_default() += 1;
        *clusters.entry(c).or_default() += 1;
        *labels.entry(l).or_default() += 1;
    }
    let mut majority: BTreeMap<usize, usize> = BTreeMap::new();
    for (&(c, _), &count) in &joint {
        let m = majority.entry(c).or_default();
        *m = (*m).max(count);
    }
    let purity = majority.values().sum::<usize>() as f64 / n as f64;
    let nf = n as f64;
    let mi: f64 = joint
        .iter()
        .map(|(&(c, l), &count)| {
            let p = count as f64 / nf;
            let pc = clusters[&c] as f64 / nf;
            let pl = labels[&l] as f64 / nf;
            p * (p / (pc * pl)).log2()
        })
        .sum();
    let (hc, hl) = (entropy_bits(clusters.values()), entropy_bits(labels.values()));
    let denom = hc.max(hl);
    let nmi = if denom <= 0.0 { 1.0 } else { (mi / denom).clamp(0.0, 1.0) };
    let size = clusters.keys().max().map_or(0, |m| m + 1);
    let by_label: Vec<(usize, usize, usize)> = assignments.iter().map(|&(id, c, l)| (id, l, c)).collect();
    let usage = usage_stats(&by_label, size);
    Ok(ClusterMetrics { points: n, purity, nmi, total_indices: usage.total_indices, per_label: usage.per_label })
}

/// Row-stochastic `K x K` matrix: rows are prompted styles, columns are
/// classified styles.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConfusionMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl ConfusionMatrix {
    pub fn identity(k: usize) -> Self {
        ConfusionMatrix { rows: (0..k).map(|i| (0..k).map(|j| (i == j) as u8 as f64).collect()).collect() }
    }

    pub fn size(&self) -> usize {
        self.rows.len()
    }

    /// Rows normalized from counts; rows with no samples stay zero.
    pub fn from_counts(counts: &[Vec<usize>]) -> Self {
        let rows = counts
            .iter()
            .map(|r| {
                let total: usize = r.iter().sum();
                r.iter().map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 }).collect()
            })
            .collect();
        ConfusionMatrix { rows }
    }
}

pub fn confusion_frobenius(a: &ConfusionMatrix, b: &ConfusionMatrix) -> Result<f64, Error> {
    if a.size() != b.size() || a.rows.iter().zip(&b.rows).any(|(x, y)| x.len() != y.len()) {
        return Err(Error::Invalid(format!("confusion shapes differ: {} vs {}", a.size(), b.size())));
    }
    let s: f64 = a.rows.iter().zip(&b.rows).flat_map(|(x, y)| x.iter().zip(y)).map(|(p, q)| (p - q) * (p - q)).sum();
    Ok(s.sqrt())
}

/// Output sequence with the style it was meant to express.
#[derive(Clone, Debug, PartialEq)]
pub struct Stimulus {
    pub id: usize,
    pub label: usize,
    pub tokens: Vec<usize>,
    pub output: Tensor,
}

/// Style whose noise-free generator output at the same tokens is nearest
/// to `output`; ties go to the lowest style index.
pub fn classify_style(output: &Tensor, tokens: &[usize], truth: &GeneratorTruth) -> usize {
    let mut best = (0, f64::INFINITY);
    for (k, s) in truth.style_vectors.iter().enumerate() {
        let d = sq_dist(&truth.mean_output(tokens, s).values, &output.values);
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

/// Confusion matrix of the nearest-signature classifier.
pub fn oracle_classify(stimuli: &[Stimulus], truth: Option<&GeneratorTruth>) -> Result<ConfusionMatrix, Error> {
    let truth = truth.ok_or_else(|| Error::MissingArtifact("generator truth".into()))?;
    let k = truth.style_vectors.len();
    let mut counts = vec![vec![0usize; k]; k];
    for s in stimuli {
        if s.label >= k {
            return Err(Error::Invalid(format!("label {} out of range for {k} styles", s.label)));
        }
        counts[s.label][classify_style(&s.output, &s.tokens, truth)] += 1;
    }
    Ok(ConfusionMatrix::from_counts(&counts))
}

/// Natural test-split sequences as stimuli.
pub fn natural_stimuli(corpus: &StyleCorpus) -> Vec<Stimulus> {
    corpus
        .split(Split::Test)
        .map(|s| Stimulus { id: s.id, label: s.label, tokens: s.l.clone(), output: s.x_tensor() })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    PerUtterance,
    PerStyle,
}

impl Scheme {
    pub const ALL: [Scheme; 2] = [Scheme::PerUtterance, Scheme::PerStyle];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::PerUtterance => "per-utterance",
            Scheme::PerStyle => "per-style",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Scheme::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| Error::Config {
            field: "schemes".into(),
            reason: format!("unknown scheme `{s}` (expected per-utterance or per-style)"),
        })
    }
}

/// Mean training-split latent per style, before quantization.
pub fn style_means(model: &Model, data: &[Prepared], pool: &Pool) -> Result<Vec<Option<Vec<f64>>>, Error> {
    let train: Vec<&Prepared> = data.iter().filter(|d| d.split == Split::Train).collect();
    let latents = pool.map(&train, |d| model.infer_latent(d))?;
    let mut sums: Vec<Option<(Vec<f64>, usize)>> = vec![None; model.dims.styles];
    for (d, z) in train.iter().zip(latents) {
        let z = z.ok_or_else(|| Error::Invalid(format!("{} has no latent input", model.system())))?;
        let slot = sums[d.label].get_or_insert_with(|| (vec![0.0; z.len()], 0));
        slot.0.iter_mut().zip(&z).for_each(|(a, v)| *a += v);
        slot.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|s| s.map(|(v, n)| v.into_iter().map(|x| x / n as f64).collect()))
        .collect())
}

/// Test-split outputs under a control scheme. Per-utterance feeds each
/// sequence its own inferred latent; per-style feeds the training mean of
/// its style (quantized for VQ systems).
pub fn control_scheme_outputs(
    model: &Model,
    corpus: &StyleCorpus,
    scheme: Scheme,
    pool: &Pool,
) -> Result<Vec<Stimulus>, Error> {
    if model.system() == SystemId::Bot {
        return Err(Error::Config { field: "system".into(), reason: "BOT has no control input".into() });
    }
    let data = prepare(corpus);
    let means = match scheme {
        Scheme::PerStyle => Some(style_means(model, &data, pool)?),
        Scheme::PerUtterance => None,
    };
    let test: Vec<&Prepared> = data.iter().filter(|d| d.split == Split::Test).collect();
    let tokens: BTreeMap<usize, &Vec<usize>> = corpus.split(Split::Test).map(|s| (s.id, &s.l)).collect();
    pool.map(&test, |d| {
        let z = match &means {
            Some(m) => Some(m[d.label].clone().ok_or(Error::MissingLatent(d.id))?),
            None => model.infer_latent(d)?,
        };
        let z = model.decoder_input(z)?;
        let output = model.synthesize(&d.l, z.as_deref())?;
        Ok(Stimulus { id: d.id, label: d.label, tokens: tokens[&d.id].clone(), output })
    })
}

/// Outputs of a style-blind or controllable system for every test sequence;
/// BOT is decoded without a latent.
pub fn system_stimuli(model: &Model, corpus: &StyleCorpus, scheme: Scheme, pool: &Pool) -> Result<Vec<Stimulus>, Error> {
    if model.system() != SystemId::Bot {
        return control_scheme_outputs(model, corpus, scheme, pool);
    }
    let data = prepare(corpus);
    let test: Vec<(&Prepared, &Vec<usize>)> = data
        .iter()
        .filter(|d| d.split == Split::Test)
        .map(|d| (d, &corpus.sequences[d.id].l))
        .collect();
    pool.map(&test, |(d, tokens)| {
        Ok(Stimulus { id: d.id, label: d.label, tokens: (*tokens).clone(), output: model.reconstruct(d)? })
    })
}

/// `(id, latent, label)` for one split; latents before quantization.
pub fn split_latents(model: &Model, corpus: &StyleCorpus, split: Split, pool: &Pool) -> Result<Vec<(usize, Vec<f64>, usize)>, Error> {
    let data = prepare(corpus);
    let items: Vec<&Prepared> = data.iter().filter(|d| d.split == split).collect();
    pool.map(&items, |d| {
        let z = model.infer_latent(d)?.ok_or_else(|| Error::Invalid(format!("{} has no latent", model.system())))?;
        Ok((d.id, z, d.label))
    })
}

/// Codeword assignments `(id, index, label)` for one split of a VQ system.
pub fn codeword_assignments(model: &Model, corpus: &StyleCorpus, split: Split, pool: &Pool) -> Result<Vec<(usize, usize, usize)>, Error> {
    split_latents(model, corpus, split, pool)?
        .into_iter()
        .map(|(id, z, label)| Ok((id, model.codeword(&z)?.0, label)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Projection {
    pub coords: Vec<[f64; 2]>,
    /// Unit principal axes in latent coordinates.
    pub axes: [Vec<f64>; 2],
    pub explained: [f64; 2],
}

/// Centers the points and projects them on the top two principal axes.
/// Each axis is signed so its largest-magnitude loading is positive.
pub fn pca_project(points: &[Vec<f64>]) -> Result<Projection, Error> {
    if points.len() < 3 {
        return Err(Error::Invalid(format!("projection needs at least 3 points, got {}", points.len())));
    }
    let d = points[0].len();
    if d == 0 || points.iter().any(|p| p.len() != d) {
        return Err(Error::Invalid("points must share a positive dimension".into()));
    }
    let n = points.len();
    let mut mean = vec![0.0; d];
    for p in points {
        mean.iter_mut().zip(p).for_each(|(m, v)| *m += v / n as f64);
    }
    let x = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);
    let svd = x.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    let total: f64 = svd.singular_values.iter().map(|s| s * s).sum();
    let mut axes: [Vec<f64>; 2] = [vec![0.0; d], vec![0.0; d]];
    let mut explained = [0.0; 2];
    for (slot, &idx) in order.iter().take(2).enumerate() {
        let mut axis: Vec<f64> = v_t.row(idx).iter().copied().collect();
        let lead = axis.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if lead < 0.0 {
            axis.iter_mut().for_each(|v| *v = -*v);
        }
        let s = svd.singular_values[idx];
        explained[slot] = if total > 0.0 { s * s / total } else { 0.0 };
        axes[slot] = axis;
    }
    let coords = (0..n)
        .map(|i| {
            let row = x.row(i);
            [0, 1].map(|a| row.iter().zip(&axes[a]).map(|(v, w)| v * w).sum())
        })
        .collect();
    Ok(Projection { coords, axes, explained })
}

#[cfg(test)]
mod tests;
