//! Training objectives and latent inference by gradient descent.
//!
//! Every loss is built as a [`LossGraph`]: a tape whose scalar `loss` node is
//! the quantity to minimize, together with the nodes of its named terms. The
//! likelihood term is the Gaussian negative log-likelihood of the whole
//! sequence under fixed output variance `sigma2_x`, so objectives that add
//! latent penalties are weighed against one datum's log-likelihood.
//! Reconstruction losses used for plain regression (`supervised_loss`,
//! `heuristic_loss`) are the per-frame MSE instead.

mod verify;

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, NodeId, Tensor};
use crate::nets::{Decoder, Encoder, GaussianEncoder};
use crate::quantizer::{Codebook, CODEBOOK_PARAM};
use crate::Error;

pub use verify::{
    verify_elbo_decomposition, verify_gradients, verify_prop1, verify_prop2, verify_prop3,
    verify_prop3_reencode, verify_prop4, PropositionReport, QuadraticDecoder,
};

/// Name of the latent parameter in heuristic graphs.
pub const LATENT_PARAM: &str = "z";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Term {
    /// Negative log-likelihood, or per-frame MSE for regression losses.
    Likelihood,
    Codebook,
    Commitment,
    /// Joint `||z_e - z_q||^2` penalty without stop-gradients.
    Penalty,
    Kl,
}

impl Term {
    pub fn name(self) -> &'static str {
        match self {
            Term::Likelihood => "likelihood",
            Term::Codebook => "codebook",
            Term::Commitment => "commitment",
            Term::Penalty => "penalty",
            Term::Kl => "kl",
        }
    }
}

/// Loss value with its weighted terms; `total` is their sum.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ObjectiveValue {
    pub total: f64,
    pub terms: Vec<(Term, f64)>,
}

impl ObjectiveValue {
    pub fn term(&self, t: Term) -> f64 {
        self.terms.iter().find(|(k, _)| *k == t).map_or(0.0, |&(_, v)| v)
    }

    pub fn signed_sum(&self) -> f64 {
        self.terms.iter().map(|&(_, v)| v).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LatentPrior {
    Flat,
    /// Flat inside `[lo, hi]^D`, zero density outside.
    Box { lo: f64, hi: f64 },
}

impl LatentPrior {
    /// Log-density up to an additive constant; `-inf` outside the support.
    pub fn log_density(&self, z: &[f64]) -> f64 {
        match *self {
            LatentPrior::Flat => 0.0,
            LatentPrior::Box { lo, hi } => {
                if z.iter().all(|&v| (lo..=hi).contains(&v)) {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub beta: f64,
    pub sigma2_q: f64,
    pub sigma2_x: f64,
    pub prior: LatentPrior,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams { beta: 0.25, sigma2_q: 0.5, sigma2_x: 1.0, prior: LatentPrior::Flat }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), Error> {
        let bad = |field: &str, reason: &str| {
            Err(Error::Config { field: field.into(), reason: reason.into() })
        };
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta", "must be finite and non-negative");
        }
        if !(self.sigma2_q > 0.0 && self.sigma2_q.is_finite()) {
            return bad("sigma2_q", "must be positive");
        }
        if !(self.sigma2_x > 0.0 && self.sigma2_x.is_finite()) {
            return bad("sigma2_x", "must be positive");
        }
        Ok(())
    }
}

/// One training example: linguistic one-hot `[T, V]` and output `[T, p]`.
#[derive(Clone, Copy, Debug)]
pub struct Datum<'a> {
    pub l: &'a Tensor,
    pub x: &'a Tensor,
}

impl<'a> Datum<'a> {
    pub fn new(l: &'a Tensor, x: &'a Tensor) -> Result<Self, Error> {
        if l.rows() != x.rows() {
            return Err(Error::Invalid(format!(
                "linguistic sequence has {} frames, output has {}",
                l.rows(),
                x.rows()
            )));
        }
        if l.rows() == 0 {
            return Err(Error::Invalid("empty sequence".into()));
        }
        Ok(Datum { l, x })
    }

    pub fn frames(&self) -> usize {
        self.x.rows()
    }
}

/// A built and evaluated loss tape.
#[derive(Debug)]
pub struct LossGraph {
    pub graph: Graph,
    pub loss: NodeId,
    /// Decoder output mean (first sample for Monte-Carlo objectives).
    pub output: NodeId,
    pub z_e: Option<NodeId>,
    pub z_q: Option<NodeId>,
    terms: Vec<(Term, NodeId)>,
}

impl LossGraph {
    fn finish(
        mut graph: Graph,
        output: NodeId,
        terms: Vec<(Term, NodeId)>,
        z_e: Option<NodeId>,
        z_q: Option<NodeId>,
    ) -> Result<Self, Error> {
        let mut loss = terms[0].1;
        for &(_, id) in &terms[1..] {
            loss = graph.add(loss, id)?;
        }
        graph.run()?;
        Ok(LossGraph { graph, loss, output, z_e, z_q, terms })
    }

    pub fn value(&self) -> ObjectiveValue {
        let get = |id| self.graph.value(id).expect("evaluated").item();
        ObjectiveValue {
            total: get(self.loss),
            terms: self.terms.iter().map(|&(t, id)| (t, get(id))).collect(),
        }
    }

    pub fn total(&self) -> f64 {
        self.graph.value(self.loss).expect("evaluated").item()
    }

    pub fn gradients(&self) -> Result<Gradients, Error> {
        Ok(self.graph.backward(self.loss)?)
    }

    pub fn output_value(&self) -> &Tensor {
        self.graph.value(self.output).expect("evaluated")
    }

    /// Codeword chosen by the quantizer, for codebook objectives.
    pub fn codeword_index(&self) -> Option<usize> {
        self.z_q.and_then(|id| self.graph.quantized_index(id))
    }

    pub fn term_node(&self, t: Term) -> Option<NodeId> {
        self.terms.iter().find(|(k, _)| *k == t).map(|&(_, id)| id)
    }

    pub fn node_value(&self, id: NodeId) -> &Tensor {
        self.graph.value(id).expect("evaluated")
    }
}

/// Mean over frames of the per-frame squared error, summed over dims.
pub fn frame_mse(xhat: &Tensor, x: &Tensor) -> Result<f64, Error> {
    if xhat.shape != x.shape {
        return Err(Error::Invalid(format!(
            "sequence shapes differ: {:?} vs {:?}",
            xhat.shape, x.shape
        )));
    }
    let frames = x.rows().max(1);
    let se: f64 = xhat.values.iter().zip(&x.values).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(se / frames as f64)
}

/// Isotropic Gaussian log-density of a whole sequence around `mean`.
pub fn gaussian_log_likelihood(mean: &Tensor, x: &Tensor, sigma2_x: f64) -> f64 {
    let se: f64 = mean.values.iter().zip(&x.values).map(|(a, b)| (a - b) * (a - b)).sum();
    -0.5 * se / sigma2_x - 0.5 * x.len() as f64 * (2.0 * PI * sigma2_x).ln()
}

fn squared_error(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId, Error> {
    let d = g.sub(a, b)?;
    let sq = g.square(d);
    Ok(g.sum(sq))
}

fn mse_node(g: &mut Graph, xhat: NodeId, x: NodeId) -> Result<NodeId, Error> {
    let frames = g.shape(x)[0];
    let se = squared_error(g, xhat, x)?;
    Ok(g.scale(se, 1.0 / frames as f64))
}

fn nll_node(g: &mut Graph, xhat: NodeId, x: NodeId, sigma2_x: f64) -> Result<NodeId, Error> {
    let n: usize = g.shape(x).iter().product();
    let se = squared_error(g, xhat, x)?;
    let scaled = g.scale(se, 0.5 / sigma2_x);
    let c = g.constant(Tensor::scalar(0.5 * n as f64 * (2.0 * PI * sigma2_x).ln()));
    Ok(g.add(scaled, c)?)
}

fn check_latent(decoder: &dyn Decoder, z: &[f64]) -> Result<(), Error> {
    if z.len() != decoder.latent_dim() {
        return Err(Error::Invalid(format!(
            "latent has dimension {}, decoder expects {}",
            z.len(),
            decoder.latent_dim()
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite latent".into()));
    }
    Ok(())
}

/// Per-frame MSE of the decoder driven by linguistic input and, for
/// label-conditioned decoders, a fixed label code. Decoder weights are
/// trainable parameters iff `train` is set.
pub fn supervised_loss(
    decoder: &dyn Decoder,
    d: Datum,
    z_label: Option<&[f64]>,
    train: bool,
) -> Result<LossGraph, Error> {
    let mut g = Graph::new();
    let l = g.constant(d.l.clone());
    let x = g.constant(d.x.clone());
    let z = match (decoder.latent_dim(), z_label) {
        (0, _) => None,
        (_, None) => return Err(Error::MissingLabel),
        (_, Some(z)) => {
            check_latent(decoder, z)?;
            Some(g.constant(Tensor::row(z.to_vec())))
        }
    };
    let xhat = decoder.build(&mut g, l, z, train)?;
    let mse = mse_node(&mut g, xhat, x)?;
    LossGraph::finish(g, xhat, vec![(Term::Likelihood, mse)], None, None)
}

/// Per-frame MSE with the latent registered as the trainable parameter
/// [`LATENT_PARAM`]. Decoder weights are trainable iff `train_decoder`.
pub fn heuristic_loss(
    decoder: &dyn Decoder,
    d: Datum,
    z: &[f64],
    train_decoder: bool,
) -> Result<LossGraph, Error> {
    check_latent(decoder, z)?;
    let mut g = Graph::new();
    let l = g.constant(d.l.clone());
    let x = g.constant(d.x.clone());
    let zn = g.parameter(LATENT_PARAM, Tensor::row(z.to_vec()));
    let xhat = decoder.build(&mut g, l, Some(zn), train_decoder)?;
    let mse = mse_node(&mut g, xhat, x)?;
    LossGraph::finish(g, xhat, vec![(Term::Likelihood, mse)], Some(zn), None)
}

enum Penalty {
    /// Codebook and commitment terms with stop-gradients.
    Split { beta: f64 },
    /// One penalty `weight * ||z_e - z_q||^2` on both sides.
    Joint { weight: f64 },
}

fn quantized_loss(
    decoder: &dyn Decoder,
    encoder: &dyn Encoder,
    codebook: &Codebook,
    d: Datum,
    penalty: Penalty,
    sigma2_x: f64,
) -> Result<LossGraph, Error> {
    if codebook.size() == 0 {
        return Err(Error::Invalid("empty codebook".into()));
    }
    let mut g = Graph::new();
    let l = g.constant(d.l.clone());
    let x = g.constant(d.x.clone());
    let z_e = encoder.build(&mut g, x, l, true)?;
    let cb = g.parameter(CODEBOOK_PARAM, codebook.codewords.clone());
    let z_q = g.quantize(z_e, cb)?;
    let z = g.straight_through(z_e, z_q)?;
    let xhat = decoder.build(&mut g, l, Some(z), true)?;
    let nll = nll_node(&mut g, xhat, x, sigma2_x)?;
    let mut terms = vec![(Term::Likelihood, nll)];
    match penalty {
        Penalty::Split { beta } => {
            let sg_e = g.stop_gradient(z_e);
            let cb_term = squared_error(&mut g, sg_e, z_q)?;
            let sg_q = g.stop_gradient(z_q);
            let commit = squared_error(&mut g, z_e, sg_q)?;
            let commit = g.scale(commit, beta);
            terms.push((Term::Codebook, cb_term));
            terms.push((Term::Commitment, commit));
        }
        Penalty::Joint { weight } => {
            let pen = squared_error(&mut g, z_e, z_q)?;
            let pen = if weight == 1.0 { pen } else { g.scale(pen, weight) };
            terms.push((Term::Penalty, pen));
        }
    }
    LossGraph::finish(g, xhat, terms, Some(z_e), Some(z_q))
}

/// VQ-VAE objective (negated): likelihood through the straight-through
/// estimator, `||sg(z_e) - z_q||^2` and `beta * ||z_e - sg(z_q)||^2`.
pub fn vq_vae_loss(
    decoder: &dyn Decoder,
    encoder: &dyn Encoder,
    codebook: &Codebook,
    d: Datum,
    beta: f64,
    sigma2_x: f64,
) -> Result<LossGraph, Error> {
    if !(beta >= 0.0) {
        return Err(Error::Config { field: "beta".into(), reason: "must be non-negative".into() });
    }
    quantized_loss(decoder, encoder, codebook, d, Penalty::Split { beta }, sigma2_x)
}

/// GMM-quantized objective: likelihood at `z_q` plus
/// `||z_e - z_q||^2 / (2 sigma2_q)`, with no stop-gradients.
pub fn gmmq_loss(
    decoder: &dyn Decoder,
    encoder: &dyn Encoder,
    codebook: &Codebook,
    d: Datum,
    sigma2_q: f64,
    sigma2_x: f64,
) -> Result<LossGraph, Error> {
    if !(sigma2_q > 0.0) {
        return Err(Error::Config { field: "sigma2_q".into(), reason: "must be positive".into() });
    }
    let weight = 1.0 / (2.0 * sigma2_q);
    quantized_loss(decoder, encoder, codebook, d, Penalty::Joint { weight }, sigma2_x)
}

/// Combined objective with unit penalty weight.
pub fn vq1_loss(
    decoder: &dyn Decoder,
    encoder: &dyn Encoder,
    codebook: &Codebook,
    d: Datum,
    sigma2_x: f64,
) -> Result<LossGraph, Error> {
    quantized_loss(decoder, encoder, codebook, d, Penalty::Joint { weight: 1.0 }, sigma2_x)
}

/// Negative ELBO under a standard-normal prior: Monte-Carlo likelihood over
/// `n_samples` reparameterized draws plus the closed-form Gaussian KL.
pub fn cvae_elbo(
    decoder: &dyn Decoder,
    encoder: &dyn GaussianEncoder,
    d: Datum,
    n_samples: usize,
    sigma2_x: f64,
    rng: &mut impl Rng,
) -> Result<LossGraph, Error> {
    if n_samples == 0 {
        return Err(Error::Config { field: "n_samples".into(), reason: "must be at least 1".into() });
    }
    let dim = encoder.latent_dim();
    let mut g = Graph::new();
    let l = g.constant(d.l.clone());
    let x = g.constant(d.x.clone());
    let (mu, sigma) = encoder.build_gaussian(&mut g, x, l, true)?;
    let mut output = None;
    let mut lik: Option<NodeId> = None;
    for _ in 0..n_samples {
        let eps: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let eps = g.constant(Tensor::row(eps));
        let noise = g.mul(sigma, eps)?;
        let z = g.add(mu, noise)?;
        let xhat = decoder.build(&mut g, l, Some(z), true)?;
        output.get_or_insert(xhat);
        let nll = nll_node(&mut g, xhat, x, sigma2_x)?;
        lik = Some(match lik {
            None => nll,
            Some(acc) => g.add(acc, nll)?,
        });
    }
    let lik = g.scale(lik.expect("n_samples >= 1"), 1.0 / n_samples as f64);
    let kl = g.gaussian_kl(mu, sigma)?;
    let out = output.expect("n_samples >= 1");
    LossGraph::finish(g, out, vec![(Term::Likelihood, lik), (Term::Kl, kl)], Some(mu), None)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub z: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Set when the final loss exceeds the initial loss.
    pub worsened: bool,
}

/// Gradient descent on `heuristic_loss` with respect to `z` only; decoder
/// weights are frozen constants on the tape.
pub fn heuristic_encode(
    decoder: &dyn Decoder,
    d: Datum,
    z_init: &[f64],
    steps: usize,
    lr: f64,
) -> Result<Encoded, Error> {
    heuristic_encode_map(decoder, d, z_init, steps, lr, &LatentPrior::Flat)
}

/// [`heuristic_encode`] under a latent prior: with a box prior each step is
/// projected back onto the box, so the result is a MAP estimate.
pub fn heuristic_encode_map(
    decoder: &dyn Decoder,
    d: Datum,
    z_init: &[f64],
    steps: usize,
    lr: f64,
    prior: &LatentPrior,
) -> Result<Encoded, Error> {
    if !(lr > 0.0) {
        return Err(Error::Config { field: "lr".into(), reason: "must be positive".into() });
    }
    let mut lg = heuristic_loss(decoder, d, z_init, false)?;
    let initial_loss = lg.total();
    let mut z = Tensor::row(z_init.to_vec());
    let mut loss = initial_loss;
    for step in 0..steps {
        let grad = lg.graph.backward(lg.loss)?.remove(LATENT_PARAM).expect("latent parameter");
        if !grad.is_finite() {
            return Err(Error::NonFiniteGradient);
        }
        sgd_update(&mut z, &grad, lr);
        if let LatentPrior::Box { lo, hi } = *prior {
            z.values.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
        }
        lg.graph.set_parameter(LATENT_PARAM, z.clone())?;
        lg.graph.run()?;
        loss = lg.total();
        if !loss.is_finite() {
            return Err(Error::Invalid(format!("non-finite loss at latent step {}", step + 1)));
        }
    }
    let worsened = loss > initial_loss;
    Ok(Encoded { z: z.values, initial_loss, final_loss: loss, worsened })
}

/// `w <- w - lr * g`.
pub fn sgd_update(w: &mut Tensor, g: &Tensor, lr: f64) {
    debug_assert_eq!(w.shape, g.shape);
    for (a, b) in w.values.iter_mut().zip(&g.values) {
        *a -= lr * b;
    }
}

#[cfg(test)]
mod tests;
