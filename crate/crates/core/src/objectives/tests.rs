use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{finite_diff_check, GraphError};
use crate::nets::{LinearDecoder, Params};

const LN_2PI: f64 = 1.8378770664093453;

/// Encoder whose output is the parameter `enc.c`, independent of input.
struct ConstEncoder {
    params: Params,
}

impl ConstEncoder {
    fn new(c: Vec<f64>) -> Self {
        let mut params = Params::default();
        params.insert("enc.c".into(), Tensor::row(c));
        ConstEncoder { params }
    }
}

impl Encoder for ConstEncoder {
    fn latent_dim(&self) -> usize {
        self.params.get("enc.c").len()
    }
    fn params(&self) -> &Params {
        &self.params
    }
    fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }
    fn build(&self, g: &mut Graph, _x: NodeId, _l: NodeId, trainable: bool) -> crate::nets::Result<NodeId> {
        let t = self.params.get("enc.c").clone();
        Ok(if trainable { g.parameter("enc.c", t) } else { g.constant(t) })
    }
}

/// Gaussian posterior with free parameters `enc.mu` and `enc.logsigma`.
struct FreeGaussian {
    mu: Vec<f64>,
    logsigma: Vec<f64>,
}

impl GaussianEncoder for FreeGaussian {
    fn latent_dim(&self) -> usize {
        self.mu.len()
    }
    fn build_gaussian(
        &self,
        g: &mut Graph,
        _x: NodeId,
        _l: NodeId,
        _trainable: bool,
    ) -> crate::nets::Result<(NodeId, NodeId)> {
        let mu = g.parameter("enc.mu", Tensor::row(self.mu.clone()));
        let ls = g.parameter("enc.logsigma", Tensor::row(self.logsigma.clone()));
        Ok((mu, g.exp(ls)))
    }
}

/// `xhat = z` for a one-frame, one-dim sequence.
fn identity_decoder() -> LinearDecoder {
    LinearDecoder::new(Tensor::matrix(1, 1, vec![1.0]), Tensor::matrix(1, 1, vec![0.0]))
}

fn toy_codebook() -> Codebook {
    Codebook::from_rows(&[vec![0.0], vec![1.0]])
}

fn scalar_datum(x: f64) -> (Tensor, Tensor) {
    (Tensor::matrix(1, 1, vec![1.0]), Tensor::matrix(1, 1, vec![x]))
}

#[test]
fn ln_2pi_constant() {
    assert!((LN_2PI - (2.0 * PI).ln()).abs() < 1e-15);
}

#[test]
fn frame_mse_examples() {
    let x = Tensor::matrix(1, 2, vec![3.0, 4.0]);
    assert_eq!(frame_mse(&x, &x).unwrap(), 0.0);
    assert_eq!(frame_mse(&Tensor::zeros(&[1, 2]), &x).unwrap(), 25.0);
    let ll = gaussian_log_likelihood(&Tensor::zeros(&[1, 2]), &x, 1.0);
    assert!((ll - (-12.5 - LN_2PI)).abs() < 1e-12);
    assert!(frame_mse(&Tensor::zeros(&[2, 2]), &x).is_err());
}

#[test]
fn frame_mse_averages_over_frames() {
    let xhat = Tensor::zeros(&[2, 2]);
    let x = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 3.0]);
    assert_eq!(frame_mse(&xhat, &x).unwrap(), 5.0);
}

#[test]
fn scalar_toy_vq_vae() {
    let (l, x) = scalar_datum(1.0);
    let enc = ConstEncoder::new(vec![0.6]);
    let lg = vq_vae_loss(&identity_decoder(), &enc, &toy_codebook(), Datum::new(&l, &x).unwrap(), 0.25, 1.0)
        .unwrap();
    let v = lg.value();
    assert_eq!(lg.codeword_index(), Some(1));
    assert!((v.term(Term::Likelihood) - 0.5 * LN_2PI).abs() < 1e-12);
    assert!((v.term(Term::Codebook) - 0.16).abs() < 1e-12);
    assert!((v.term(Term::Commitment) - 0.04).abs() < 1e-12);
    assert!((v.total - (0.5 * LN_2PI + 0.2)).abs() < 1e-12);
    assert!((v.total - v.signed_sum()).abs() < 1e-12);
}

#[test]
fn scalar_toy_joint_objectives() {
    let (l, x) = scalar_datum(1.0);
    let d = Datum::new(&l, &x).unwrap();
    let enc = ConstEncoder::new(vec![0.6]);
    let want = 0.5 * LN_2PI + 0.16;
    let g = gmmq_loss(&identity_decoder(), &enc, &toy_codebook(), d, 0.5, 1.0).unwrap();
    let j = vq1_loss(&identity_decoder(), &enc, &toy_codebook(), d, 1.0).unwrap();
    assert!((g.total() - want).abs() < 1e-12);
    assert!((j.total() - want).abs() < 1e-12);
    // At beta = 1 both stop-gradient terms equal 0.16; only gradients agree.
    let v1 = vq_vae_loss(&identity_decoder(), &enc, &toy_codebook(), d, 1.0, 1.0).unwrap();
    assert!((v1.total() - j.total() - 0.16).abs() < 1e-12);
}

#[test]
fn on_codeword_only_likelihood_remains() {
    let (l, x) = scalar_datum(0.3);
    let d = Datum::new(&l, &x).unwrap();
    let enc = ConstEncoder::new(vec![1.0]);
    let v = vq_vae_loss(&identity_decoder(), &enc, &toy_codebook(), d, 0.25, 1.0).unwrap().value();
    assert_eq!(v.term(Term::Codebook), 0.0);
    assert_eq!(v.term(Term::Commitment), 0.0);
    assert_eq!(v.total, v.term(Term::Likelihood));
    let g = gmmq_loss(&identity_decoder(), &enc, &toy_codebook(), d, 0.3, 1.0).unwrap().value();
    assert_eq!(g.term(Term::Penalty), 0.0);
}

#[test]
fn vq_gradients_by_hand() {
    // x = 2, z_e = 0.6, z_q = 1: likelihood adjoint at z is (z_q - x) = -1.
    let (l, x) = scalar_datum(2.0);
    let d = Datum::new(&l, &x).unwrap();
    let enc = ConstEncoder::new(vec![0.6]);
    let g0 = vq_vae_loss(&identity_decoder(), &enc, &toy_codebook(), d, 0.0, 1.0)
        .unwrap()
        .gradients()
        .unwrap();
    assert!((g0["enc.c"].item() + 1.0).abs() < 1e-12);
    let g = vq_vae_loss(&identity_decoder(), &enc, &toy_codebook(), d, 0.25, 1.0)
        .unwrap()
        .gradients()
        .unwrap();
    assert!((g["enc.c"].item() - (-1.0 + 0.25 * 2.0 * (0.6 - 1.0))).abs() < 1e-12);
    // Codebook: only the selected row, only from ||sg(z_e) - z_q||^2.
    let cb = &g[CODEBOOK_PARAM].values;
    assert_eq!(cb[0], 0.0);
    assert!((cb[1] - (-2.0 * (0.6 - 1.0))).abs() < 1e-12);
}

#[test]
fn likelihood_never_reaches_codebook() {
    let (l, x) = scalar_datum(2.0);
    let d = Datum::new(&l, &x).unwrap();
    let enc = ConstEncoder::new(vec![1.0]);
    let g = vq_vae_loss(&identity_decoder(), &enc, &toy_codebook(), d, 0.25, 1.0)
        .unwrap()
        .gradients()
        .unwrap();
    assert!(g[CODEBOOK_PARAM].values.iter().all(|&v| v == 0.0));
}

#[test]
fn negative_beta_and_sigma_rejected() {
    let (l, x) = scalar_datum(1.0);
    let d = Datum::new(&l, &x).unwrap();
    let enc = ConstEncoder::new(vec![0.6]);
    assert!(vq_vae_loss(&identity_decoder(), &enc, &toy_codebook(), d, -0.1, 1.0).is_err());
    assert!(gmmq_loss(&identity_decoder(), &enc, &toy_codebook(), d, 0.0, 1.0).is_err());
    let empty = Codebook::new(Tensor::zeros(&[0, 1]));
    assert!(vq1_loss(&identity_decoder(), &enc, &empty, d, 1.0).is_err());
}

#[test]
fn supervised_requires_label() {
    let dec = LinearDecoder::new(Tensor::matrix(1, 2, vec![1.0, 0.0]), Tensor::zeros(&[3, 2]));
    let l = crate::nets::one_hot(&[0, 1], 3);
    let x = Tensor::zeros(&[2, 2]);
    let d = Datum::new(&l, &x).unwrap();
    assert!(matches!(supervised_loss(&dec, d, None, true), Err(Error::MissingLabel)));
    let lg = supervised_loss(&dec, d, Some(&[0.0]), true).unwrap();
    assert_eq!(lg.total(), 0.0);
}

#[test]
fn datum_rejects_length_mismatch() {
    let l = crate::nets::one_hot(&[0, 1], 3);
    assert!(Datum::new(&l, &Tensor::zeros(&[3, 2])).is_err());
}

fn linear_instance(seed: u64, dim: usize) -> (LinearDecoder, Tensor, Tensor) {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (v, p, t) = (4, 3, 6);
    let w = Tensor::matrix(dim, p, (0..dim * p).map(|_| rng.random_range(-1.0..1.0)).collect());
    let a = Tensor::matrix(v, p, (0..v * p).map(|_| rng.random_range(-1.0..1.0)).collect());
    let tokens: Vec<usize> = (0..t).map(|_| rng.random_range(0..v)).collect();
    let x = Tensor::matrix(t, p, (0..t * p).map(|_| rng.random_range(-1.0..1.0)).collect());
    (LinearDecoder::new(w, a), crate::nets::one_hot(&tokens, v), x)
}

/// Normal-equations solution for a two-dim latent by Cramer's rule.
fn least_squares_2d(dec: &LinearDecoder, l: &Tensor, x: &Tensor) -> [f64; 2] {
    let w = dec.params.get("dec.w");
    let a = dec.params.get("dec.a");
    let p = w.cols();
    let (mut m, mut b) = ([[0.0; 2]; 2], [0.0; 2]);
    for t in 0..x.rows() {
        let tok = l.row_slice(t).iter().position(|&v| v == 1.0).unwrap();
        for j in 0..p {
            let r = x.values[t * p + j] - a.values[tok * p + j];
            for i in 0..2 {
                b[i] += w.values[i * p + j] * r;
                for k in 0..2 {
                    m[i][k] += w.values[i * p + j] * w.values[k * p + j];
                }
            }
        }
    }
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    [(b[0] * m[1][1] - m[0][1] * b[1]) / det, (m[0][0] * b[1] - m[1][0] * b[0]) / det]
}

#[test]
fn heuristic_encode_reaches_least_squares() {
    let (dec, l, x) = linear_instance(5, 2);
    let d = Datum::new(&l, &x).unwrap();
    let want = least_squares_2d(&dec, &l, &x);
    let enc = heuristic_encode(&dec, d, &[0.0, 0.0], 5000, 0.1).unwrap();
    let dist = ((enc.z[0] - want[0]).powi(2) + (enc.z[1] - want[1]).powi(2)).sqrt();
    assert!(dist <= 1e-4, "{:?} vs {want:?}", enc.z);
    assert!(enc.final_loss <= enc.initial_loss && !enc.worsened);
    let at = heuristic_loss(&dec, d, &want, false).unwrap().total();
    assert!((at - enc.final_loss).abs() < 1e-9);
}

#[test]
fn heuristic_encode_stays_at_optimum() {
    let (dec, l, x) = linear_instance(6, 2);
    let d = Datum::new(&l, &x).unwrap();
    let opt = least_squares_2d(&dec, &l, &x);
    let enc = heuristic_encode(&dec, d, &opt, 50, 2e-4).unwrap();
    let dist = ((enc.z[0] - opt[0]).powi(2) + (enc.z[1] - opt[1]).powi(2)).sqrt();
    assert!(dist <= 1e-8);
}

#[test]
fn box_prior_projects_onto_the_nearest_feasible_latent() {
    let (dec, l, x) = linear_instance(6, 2);
    let d = Datum::new(&l, &x).unwrap();
    let opt = least_squares_2d(&dec, &l, &x);
    let wide = LatentPrior::Box { lo: -1e3, hi: 1e3 };
    let free = heuristic_encode_map(&dec, d, &[0.0, 0.0], 4000, 0.05, &wide).unwrap();
    assert!((free.z[0] - opt[0]).abs() <= 1e-6 && (free.z[1] - opt[1]).abs() <= 1e-6);
    let (lo, hi) = (opt[0].min(opt[1]) + 0.05, opt[0].max(opt[1]) - 0.05);
    let boxed = heuristic_encode_map(&dec, d, &[0.0, 0.0], 4000, 0.05, &LatentPrior::Box { lo, hi }).unwrap();
    assert!(boxed.z.iter().all(|&v| (lo..=hi).contains(&v)));
    assert!(boxed.z.iter().any(|&v| v == lo || v == hi));
    assert!(boxed.final_loss >= free.final_loss);
}

#[test]
fn dead_latent_gets_zero_gradient() {
    let dec = LinearDecoder::new(Tensor::zeros(&[2, 3]), Tensor::matrix(1, 3, vec![0.5, -0.5, 1.0]));
    let l = crate::nets::one_hot(&[0, 0, 0], 1);
    let x = Tensor::matrix(3, 3, vec![1.0; 9]);
    let d = Datum::new(&l, &x).unwrap();
    let g = heuristic_loss(&dec, d, &[0.3, -0.2], true).unwrap().gradients().unwrap();
    assert!(g[LATENT_PARAM].values.iter().all(|&v| v == 0.0));
    let enc = heuristic_encode(&dec, d, &[0.3, -0.2], 50, 2e-4).unwrap();
    assert_eq!(enc.z, vec![0.3, -0.2]);
}

#[test]
fn heuristic_loss_zero_at_generating_latent() {
    let (dec, l, _) = linear_instance(7, 2);
    let z = [0.4, -0.9];
    let x = crate::nets::decode(&dec, &l, Some(&z)).unwrap();
    let d = Datum::new(&l, &x).unwrap();
    assert_eq!(heuristic_loss(&dec, d, &z, false).unwrap().total(), 0.0);
}

#[test]
fn heuristic_encode_rejects_bad_input() {
    let (dec, l, x) = linear_instance(8, 2);
    let d = Datum::new(&l, &x).unwrap();
    assert!(heuristic_encode(&dec, d, &[0.0], 5, 0.1).is_err());
    assert!(heuristic_encode(&dec, d, &[0.0, 0.0], 5, 0.0).is_err());
    assert!(matches!(
        heuristic_encode(&dec, d, &[1e200, 1e200], 5, 1e200),
        Err(Error::NonFiniteGradient) | Err(Error::Invalid(_))
    ));
}

#[test]
fn kl_of_unit_shift_is_half() {
    let (l, x) = scalar_datum(0.0);
    let dec = identity_decoder();
    let enc = FreeGaussian { mu: vec![1.0], logsigma: vec![0.0] };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let v = cvae_elbo(&dec, &enc, Datum::new(&l, &x).unwrap(), 1, 1.0, &mut rng).unwrap().value();
    assert!((v.term(Term::Kl) - 0.5).abs() < 1e-12);
}

#[test]
fn collapsed_posterior_has_zero_kl() {
    let (l, x) = scalar_datum(0.7);
    let dec = LinearDecoder::new(Tensor::matrix(1, 1, vec![0.0]), Tensor::matrix(1, 1, vec![0.2]));
    let enc = FreeGaussian { mu: vec![0.0], logsigma: vec![0.0] };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let v = cvae_elbo(&dec, &enc, Datum::new(&l, &x).unwrap(), 4, 1.0, &mut rng).unwrap().value();
    assert_eq!(v.term(Term::Kl), 0.0);
    let ll = gaussian_log_likelihood(&Tensor::matrix(1, 1, vec![0.2]), &x, 1.0);
    assert!((v.total + ll).abs() < 1e-12);
}

/// Linear-Gaussian model `x = z w + e`, `z ~ N(0,1)`, `e ~ N(0, I_p)`.
struct LinearGaussian {
    w: Vec<f64>,
    x: Vec<f64>,
}

impl LinearGaussian {
    fn log_evidence(&self) -> f64 {
        // Covariance I + w w^T: determinant 1 + |w|^2, inverse by
        // Sherman-Morrison.
        let ww: f64 = self.w.iter().map(|v| v * v).sum();
        let xw: f64 = self.x.iter().zip(&self.w).map(|(a, b)| a * b).sum();
        let xx: f64 = self.x.iter().map(|v| v * v).sum();
        let quad = xx - xw * xw / (1.0 + ww);
        -0.5 * quad - 0.5 * (1.0 + ww).ln() - 0.5 * self.x.len() as f64 * LN_2PI
    }

    fn elbo(&self, mu: f64, sigma: f64) -> f64 {
        let ww: f64 = self.w.iter().map(|v| v * v).sum();
        let se: f64 = self.x.iter().zip(&self.w).map(|(a, b)| (a - mu * b).powi(2)).sum();
        let ell = -0.5 * se - 0.5 * sigma * sigma * ww - 0.5 * self.x.len() as f64 * LN_2PI;
        let kl = 0.5 * (mu * mu + sigma * sigma - 1.0 - 2.0 * sigma.ln());
        ell - kl
    }

    fn posterior(&self) -> (f64, f64) {
        let ww: f64 = self.w.iter().map(|v| v * v).sum();
        let xw: f64 = self.x.iter().zip(&self.w).map(|(a, b)| a * b).sum();
        (xw / (1.0 + ww), (1.0 / (1.0 + ww)).sqrt())
    }

    fn decoder(&self) -> LinearDecoder {
        let p = self.w.len();
        LinearDecoder::new(Tensor::matrix(1, p, self.w.clone()), Tensor::zeros(&[1, p]))
    }
}

#[test]
fn elbo_bounds_linear_gaussian_evidence() {
    let model = LinearGaussian { w: vec![0.8, -0.4, 1.1], x: vec![0.5, 0.2, -1.3] };
    let lf = model.log_evidence();
    for &(mu, s) in &[(0.0, 1.0), (0.3, 0.2), (-1.0, 2.0), (2.0, 0.05)] {
        assert!(model.elbo(mu, s) <= lf + 1e-12);
    }
    let (mu, s) = model.posterior();
    assert!((model.elbo(mu, s) - lf).abs() < 1e-12);

    // Monte-Carlo estimate from the tape agrees with the closed form.
    let l = Tensor::matrix(1, 1, vec![1.0]);
    let x = Tensor::matrix(1, 3, model.x.clone());
    let enc = FreeGaussian { mu: vec![mu], logsigma: vec![s.ln()] };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let lg = cvae_elbo(&model.decoder(), &enc, Datum::new(&l, &x).unwrap(), 20000, 1.0, &mut rng)
        .unwrap();
    let mc = -lg.total();
    assert!((mc - lf).abs() < 0.02, "mc {mc} vs {lf}");
}

#[test]
fn cvae_gradients_match_finite_differences() {
    let model = LinearGaussian { w: vec![0.8, -0.4], x: vec![0.5, 0.2] };
    let l = Tensor::matrix(1, 1, vec![1.0]);
    let x = Tensor::matrix(1, 2, model.x.clone());
    let enc = FreeGaussian { mu: vec![0.3], logsigma: vec![-0.5] };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut lg = cvae_elbo(&model.decoder(), &enc, Datum::new(&l, &x).unwrap(), 3, 1.0, &mut rng)
        .unwrap();
    let loss = lg.loss;
    let rep = finite_diff_check(&mut lg.graph, loss, 1e-5).unwrap();
    assert!(rep.passes(1e-5), "{rep:?}");
}

#[test]
fn cvae_rejects_zero_samples_and_bad_sigma() {
    let (l, x) = scalar_datum(0.0);
    let enc = FreeGaussian { mu: vec![0.0], logsigma: vec![0.0] };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = Datum::new(&l, &x).unwrap();
    assert!(cvae_elbo(&identity_decoder(), &enc, d, 0, 1.0, &mut rng).is_err());
    let mut g = Graph::new();
    let mu = g.constant(Tensor::row(vec![0.0]));
    let s = g.constant(Tensor::row(vec![-1.0]));
    let kl = g.gaussian_kl(mu, s).unwrap();
    assert!(matches!(g.run(), Err(GraphError::NonPositiveSigma { .. })));
    let _ = kl;
}

#[test]
fn box_prior_density() {
    let p = LatentPrior::Box { lo: -1.0, hi: 1.0 };
    assert_eq!(p.log_density(&[0.5, -1.0]), 0.0);
    assert_eq!(p.log_density(&[1.5, 0.0]), f64::NEG_INFINITY);
    assert_eq!(LatentPrior::Flat.log_density(&[1e9]), 0.0);
}

#[test]
fn hyperparams_validate() {
    assert!(HyperParams::default().validate().is_ok());
    let bad = HyperParams { sigma2_q: 0.0, ..Default::default() };
    assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "sigma2_q"));
}

#[test]
fn sgd_update_definition() {
    let mut w = Tensor::scalar(1.0);
    sgd_update(&mut w, &Tensor::scalar(2.0), 0.1);
    assert!((w.item() - 0.8).abs() < 1e-15);
    sgd_update(&mut w, &Tensor::scalar(0.0), 0.1);
    assert!((w.item() - 0.8).abs() < 1e-15);
}

#[test]
fn verifiers_pass_on_small_batches() {
    let r1 = verify_prop1(10, 1).unwrap();
    assert!(r1.pass, "{r1:?}");
    let r2 = verify_prop2(10, 2, 0.5).unwrap();
    assert!(r2.pass, "{r2:?}");
    let r3 = verify_prop3(3, 3).unwrap();
    assert!(r3.pass, "{r3:?}");
    let r4 = verify_prop4(4, 4, &[1e-1, 1e-2, 1e-3]).unwrap();
    assert!(r4.pass, "{r4:?}");
    let re = verify_elbo_decomposition(10, 5).unwrap();
    assert!(re.pass, "{re:?}");
}
