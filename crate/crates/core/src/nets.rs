//! Decoder and encoder networks, parameter storage and per-sequence latent
//! tables.
//!
//! Every network registers its tensors on a [`Graph`] under a name prefix
//! (`dec.`, `enc.`) so that one graph can hold a decoder, an encoder and a
//! codebook side by side. Parameters are registered as trainable
//! [`Graph::parameter`] nodes or as frozen constants depending on the
//! `trainable` flag passed to `build`.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, GraphError, NodeId, Tensor};

pub type Result<T> = std::result::Result<T, GraphError>;

/// Named parameter tensors in a deterministic order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Params(pub BTreeMap<String, Tensor>);

impl Params {
    pub fn get(&self, name: &str) -> &Tensor {
        self.0.get(name).unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    pub fn insert(&mut self, name: String, t: Tensor) {
        self.0.insert(name, t);
    }

    pub fn count(&self) -> usize {
        self.0.values().map(Tensor::len).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    fn node(&self, g: &mut Graph, name: &str, trainable: bool) -> NodeId {
        let t = self.get(name).clone();
        if trainable {
            g.parameter(name, t)
        } else {
            g.constant(t)
        }
    }
}

/// Glorot-uniform matrix on `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let values = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
    Tensor::matrix(fan_in, fan_out, values)
}

/// One-hot `[T, vocab]` matrix for a token sequence.
pub fn one_hot(tokens: &[usize], vocab: usize) -> Tensor {
    let mut t = Tensor::zeros(&[tokens.len(), vocab]);
    for (i, &tok) in tokens.iter().enumerate() {
        t.values[i * vocab + tok] = 1.0;
    }
    t
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HiddenSizes {
    pub feedforward: usize,
    pub recurrent: usize,
}

impl Default for HiddenSizes {
    fn default() -> Self {
        HiddenSizes { feedforward: 32, recurrent: 16 }
    }
}

fn add_dense(p: &mut Params, rng: &mut impl Rng, name: &str, fan_in: usize, fan_out: usize) {
    p.insert(format!("{name}.w"), glorot(rng, fan_in, fan_out));
    p.insert(format!("{name}.b"), Tensor::row(vec![0.0; fan_out]));
}

fn add_birnn(p: &mut Params, rng: &mut impl Rng, name: &str, fan_in: usize, units: usize) {
    for dir in ["fw", "bw"] {
        p.insert(format!("{name}.{dir}.wx"), glorot(rng, fan_in, units));
        p.insert(format!("{name}.{dir}.wh"), glorot(rng, units, units));
        p.insert(format!("{name}.{dir}.b"), Tensor::row(vec![0.0; units]));
    }
}

fn dense(p: &Params, g: &mut Graph, name: &str, x: NodeId, trainable: bool) -> Result<NodeId> {
    let w = p.node(g, &format!("{name}.w"), trainable);
    let b = p.node(g, &format!("{name}.b"), trainable);
    let xw = g.matmul(x, w)?;
    g.add_row(xw, b)
}

/// Bidirectional tanh recurrence; forward and backward states are
/// concatenated per frame, giving `[T, 2 * units]`.
fn birnn(p: &Params, g: &mut Graph, name: &str, x: NodeId, trainable: bool) -> Result<NodeId> {
    let mut outputs = Vec::with_capacity(2);
    for (dir, reverse) in [("fw", false), ("bw", true)] {
        let wx = p.node(g, &format!("{name}.{dir}.wx"), trainable);
        let wh = p.node(g, &format!("{name}.{dir}.wh"), trainable);
        let b = p.node(g, &format!("{name}.{dir}.b"), trainable);
        let xw = g.matmul(x, wx)?;
        let pre = g.add_row(xw, b)?;
        outputs.push(g.recurrence(pre, wh, reverse)?);
    }
    g.concat_cols(outputs[0], outputs[1])
}

/// Maps a linguistic sequence and an optional latent to an output sequence.
pub trait Decoder {
    fn latent_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn params(&self) -> &Params;
    fn params_mut(&mut self) -> &mut Params;
    /// `l` is `[T, V]`; `z` is `[1, D]`. Returns the `[T, p]` output mean.
    fn build(&self, g: &mut Graph, l: NodeId, z: Option<NodeId>, trainable: bool) -> Result<NodeId>;
}

/// Maps an (output, linguistic) sequence pair to one latent vector.
pub trait Encoder {
    fn latent_dim(&self) -> usize;
    fn params(&self) -> &Params;
    fn params_mut(&mut self) -> &mut Params;
    /// `x` is `[T, p]`, `l` is `[T, V]`; returns `[1, D]`.
    fn build(&self, g: &mut Graph, x: NodeId, l: NodeId, trainable: bool) -> Result<NodeId>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderNet {
    pub linguistic_dim: usize,
    pub latent_dim: usize,
    pub output_dim: usize,
    pub hidden: HiddenSizes,
    pub params: Params,
}

impl DecoderNet {
    pub fn new(
        rng: &mut impl Rng,
        linguistic_dim: usize,
        latent_dim: usize,
        output_dim: usize,
        hidden: HiddenSizes,
    ) -> Self {
        let mut params = Params::default();
        let (f, r) = (hidden.feedforward, hidden.recurrent);
        add_dense(&mut params, rng, "dec.ff1", linguistic_dim + latent_dim, f);
        add_dense(&mut params, rng, "dec.ff2", f, f);
        add_birnn(&mut params, rng, "dec.rnn", f, r);
        add_dense(&mut params, rng, "dec.out", 2 * r, output_dim);
        DecoderNet { linguistic_dim, latent_dim, output_dim, hidden, params }
    }
}

impl Decoder for DecoderNet {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn params(&self) -> &Params {
        &self.params
    }

    fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    fn build(&self, g: &mut Graph, l: NodeId, z: Option<NodeId>, trainable: bool) -> Result<NodeId> {
        let steps = g.shape(l)[0];
        let input = match (z, self.latent_dim) {
            (_, 0) => l,
            (Some(z), _) => {
                let tiled = g.tile(z, steps)?;
                g.concat_cols(l, tiled)?
            }
            (None, d) => {
                let id = g.len();
                return Err(GraphError::ShapeMismatch {
                    node: id,
                    op: "decode",
                    detail: format!("decoder expects a {d}-dim latent"),
                });
            }
        };
        let p = &self.params;
        let h = dense(p, g, "dec.ff1", input, trainable)?;
        let h = g.sigmoid(h);
        let h = dense(p, g, "dec.ff2", h, trainable)?;
        let h = g.sigmoid(h);
        let h = birnn(p, g, "dec.rnn", h, trainable)?;
        dense(p, g, "dec.out", h, trainable)
    }
}

/// Hidden-layer order of an encoder relative to the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerOrder {
    /// Feedforward then recurrent (VQS).
    Same,
    /// Recurrent then feedforward (VQR).
    Reversed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderNet {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub hidden: HiddenSizes,
    pub order: LayerOrder,
    /// Adds a `enc.logsigma` head for Gaussian posteriors.
    pub variance_head: bool,
    pub params: Params,
}

impl EncoderNet {
    /// `input_dim` is `p + V`: frames are `[x_t ; l_t]`.
    pub fn new(
        rng: &mut impl Rng,
        input_dim: usize,
        latent_dim: usize,
        hidden: HiddenSizes,
        order: LayerOrder,
        variance_head: bool,
    ) -> Self {
        let mut params = Params::default();
        let (f, r) = (hidden.feedforward, hidden.recurrent);
        let pooled = match order {
            LayerOrder::Same => {
                add_dense(&mut params, rng, "enc.ff1", input_dim, f);
                add_dense(&mut params, rng, "enc.ff2", f, f);
                add_birnn(&mut params, rng, "enc.rnn", f, r);
                2 * r
            }
            LayerOrder::Reversed => {
                add_birnn(&mut params, rng, "enc.rnn", input_dim, r);
                add_dense(&mut params, rng, "enc.ff1", 2 * r, f);
                add_dense(&mut params, rng, "enc.ff2", f, f);
                f
            }
        };
        add_dense(&mut params, rng, "enc.out", pooled, latent_dim);
        if variance_head {
            add_dense(&mut params, rng, "enc.logsigma", pooled, latent_dim);
        }
        EncoderNet { input_dim, latent_dim, hidden, order, variance_head, params }
    }

    fn pooled(&self, g: &mut Graph, x: NodeId, l: NodeId, trainable: bool) -> Result<NodeId> {
        let input = g.concat_cols(x, l)?;
        let p = &self.params;
        let h = match self.order {
            LayerOrder::Same => {
                let h = dense(p, g, "enc.ff1", input, trainable)?;
                let h = g.sigmoid(h);
                let h = dense(p, g, "enc.ff2", h, trainable)?;
                let h = g.sigmoid(h);
                birnn(p, g, "enc.rnn", h, trainable)?
            }
            LayerOrder::Reversed => {
                let h = birnn(p, g, "enc.rnn", input, trainable)?;
                let h = dense(p, g, "enc.ff1", h, trainable)?;
                let h = g.sigmoid(h);
                let h = dense(p, g, "enc.ff2", h, trainable)?;
                g.sigmoid(h)
            }
        };
        g.mean_rows(h)
    }

    /// Returns `(mu, sigma)` nodes; requires the variance head.
    pub fn build_gaussian(
        &self,
        g: &mut Graph,
        x: NodeId,
        l: NodeId,
        trainable: bool,
    ) -> Result<(NodeId, NodeId)> {
        assert!(self.variance_head, "encoder has no variance head");
        let pooled = self.pooled(g, x, l, trainable)?;
        let mu = dense(&self.params, g, "enc.out", pooled, trainable)?;
        let logsigma = dense(&self.params, g, "enc.logsigma", pooled, trainable)?;
        let sigma = g.exp(logsigma);
        Ok((mu, sigma))
    }
}

impl Encoder for EncoderNet {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn params(&self) -> &Params {
        &self.params
    }

    fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    fn build(&self, g: &mut Graph, x: NodeId, l: NodeId, trainable: bool) -> Result<NodeId> {
        let pooled = self.pooled(g, x, l, trainable)?;
        dense(&self.params, g, "enc.out", pooled, trainable)
    }
}

/// Encoder emitting a diagonal Gaussian posterior `(mu, sigma)`.
pub trait GaussianEncoder {
    fn latent_dim(&self) -> usize;
    fn build_gaussian(
        &self,
        g: &mut Graph,
        x: NodeId,
        l: NodeId,
        trainable: bool,
    ) -> Result<(NodeId, NodeId)>;
}

impl GaussianEncoder for EncoderNet {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn build_gaussian(
        &self,
        g: &mut Graph,
        x: NodeId,
        l: NodeId,
        trainable: bool,
    ) -> Result<(NodeId, NodeId)> {
        EncoderNet::build_gaussian(self, g, x, l, trainable)
    }
}

/// Per-frame affine decoder `x_t = z W + l_t A`, convex in `z`. Used as a
/// closed-form test bed for latent inference.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearDecoder {
    pub latent_dim: usize,
    pub output_dim: usize,
    pub params: Params,
}

impl LinearDecoder {
    /// `w` is `[D, p]`, `a` is `[V, p]`.
    pub fn new(w: Tensor, a: Tensor) -> Self {
        let (latent_dim, output_dim) = w.dims2();
        assert_eq!(a.cols(), output_dim);
        let mut params = Params::default();
        params.insert("dec.w".into(), w);
        params.insert("dec.a".into(), a);
        LinearDecoder { latent_dim, output_dim, params }
    }
}

impl Decoder for LinearDecoder {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn params(&self) -> &Params {
        &self.params
    }

    fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    fn build(&self, g: &mut Graph, l: NodeId, z: Option<NodeId>, trainable: bool) -> Result<NodeId> {
        let a = self.params.node(g, "dec.a", trainable);
        let la = g.matmul(l, a)?;
        let Some(z) = z else { return Ok(la) };
        let w = self.params.node(g, "dec.w", trainable);
        let zw = g.matmul(z, w)?;
        g.add_row(la, zw)
    }
}

/// Decoder output mean for one sequence.
pub fn decode(decoder: &dyn Decoder, l: &Tensor, z: Option<&[f64]>) -> Result<Tensor> {
    let mut g = Graph::new();
    let ln = g.constant(l.clone());
    let zn = z.map(|z| g.constant(Tensor::row(z.to_vec())));
    let out = decoder.build(&mut g, ln, zn, false)?;
    g.run()?;
    Ok(g.value(out)?.clone())
}

/// Encoder output `z_e` for one sequence.
pub fn encode(encoder: &dyn Encoder, x: &Tensor, l: &Tensor) -> Result<Vec<f64>> {
    if x.rows() != l.rows() {
        return Err(GraphError::ShapeMismatch {
            node: 0,
            op: "encode",
            detail: format!("x has {} frames, l has {}", x.rows(), l.rows()),
        });
    }
    let mut g = Graph::new();
    let xn = g.constant(x.clone());
    let ln = g.constant(l.clone());
    let z = encoder.build(&mut g, xn, ln, false)?;
    g.run()?;
    Ok(g.value(z)?.values.clone())
}

/// One learnable control vector per sequence id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatentTable {
    pub dim: usize,
    pub entries: BTreeMap<usize, Vec<f64>>,
}

impl LatentTable {
    pub fn new(dim: usize) -> Self {
        LatentTable { dim, entries: BTreeMap::new() }
    }

    pub fn get(&self, id: usize) -> Option<&[f64]> {
        self.entries.get(&id).map(Vec::as_slice)
    }

    pub fn set(&mut self, id: usize, z: Vec<f64>) {
        debug_assert_eq!(z.len(), self.dim);
        self.entries.insert(id, z);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
