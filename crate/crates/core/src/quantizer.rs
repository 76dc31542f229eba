//! Codebook, nearest-neighbour quantization and codeword usage statistics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{nearest_row, Tensor};
use crate::nets::glorot;
use crate::Error;

/// Name of the codebook parameter on a graph.
pub const CODEBOOK_PARAM: &str = "codebook";

/// `M x D` matrix of codewords.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub codewords: Tensor,
}

impl Codebook {
    pub fn new(codewords: Tensor) -> Self {
        assert_eq!(codewords.rank(), 2, "codebook must be a matrix");
        Codebook { codewords }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        Codebook::new(Tensor::from_rows(rows))
    }

    /// Small random codewords, drawn like the network weights.
    pub fn random(rng: &mut impl Rng, size: usize, dim: usize) -> Self {
        Codebook::new(glorot(rng, size, dim))
    }

    pub fn size(&self) -> usize {
        self.codewords.rows()
    }

    pub fn dim(&self) -> usize {
        self.codewords.cols()
    }

    pub fn codeword(&self, m: usize) -> &[f64] {
        self.codewords.row_slice(m)
    }
}

/// Nearest codeword by squared Euclidean distance, lowest index on ties.
pub fn quantize(z_e: &[f64], codebook: &Codebook) -> Result<(usize, Vec<f64>), Error> {
    if codebook.size() == 0 {
        return Err(Error::Invalid("empty codebook".into()));
    }
    if z_e.len() != codebook.dim() {
        return Err(Error::Invalid(format!(
            "query has dimension {}, codebook has {}",
            z_e.len(),
            codebook.dim()
        )));
    }
    if z_e.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite encoder output".into()));
    }
    let m = nearest_row(&codebook.codewords, z_e);
    Ok((m, codebook.codeword(m).to_vec()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LabelUsage {
    pub label: usize,
    pub indices_used: usize,
    pub entropy_bits: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UsageStats {
    pub hits: Vec<usize>,
    pub total_indices: usize,
    pub dead_codewords: usize,
    pub per_label: Vec<LabelUsage>,
}

/// Base-2 entropy of a count histogram.
pub fn entropy_bits<'a>(counts: impl IntoIterator<Item = &'a usize>) -> f64 {
    let counts: Vec<usize> = counts.into_iter().copied().filter(|&c| c > 0).collect();
    let n: usize = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let h: f64 = counts
        .iter()
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.log2()
        })
        .sum();
    h.max(0.0)
}

/// Codeword usage from `(sequence id, label, codeword index)` triples.
pub fn usage_stats(indices: &[(usize, usize, usize)], size: usize) -> UsageStats {
    let mut hits = vec![0; size];
    let mut by_label: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for &(_, label, m) in indices {
        hits[m] += 1;
        *by_label.entry(label).or_default().entry(m).or_default() += 1;
    }
    let per_label = by_label
        .into_iter()
        .map(|(label, counts)| LabelUsage {
            label,
            indices_used: counts.len(),
            entropy_bits: entropy_bits(counts.values()),
        })
        .collect();
    let total_indices = hits.iter().filter(|&&h| h > 0).count();
    UsageStats { dead_codewords: size - total_indices, total_indices, hits, per_label }
}

impl UsageStats {
    /// CSV rows `system,label,indices_used,entropy_bits` for this system.
    pub fn write_rows(&self, system: &str, out: &mut String) {
        for u in &self.per_label {
            let _ = writeln!(out, "{system},{},{},{:.6}", u.label, u.indices_used, u.entropy_bits);
        }
    }
}
