//! Differentiable training objectives: amortized ELBO, the importance-weighted
//! k-sample bound, and the denoising / partially-denoising variants.
//!
//! One estimator underlies all four objective kinds: a k-sample
//! importance-weighted bound whose proposals may come from a noise-perturbed
//! encoder pass.  The decoder target is always the clean input; noise enters
//! the inference path only.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{OpKind, Tape, Var};
use crate::dist::{bernoulli_log_prob, gaussian_log_prob, gaussian_rsample, GaussianVars};
use crate::error::{Error, Result};
use crate::nn::{BoundDecoder, BoundEncoder, Decoder, Encoder};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    Vae,
    Dvae,
    Iwae,
    Diwae,
}

impl ObjectiveKind {
    /// Whether this kind injects noise into the inference path.
    pub fn denoising(&self) -> bool {
        matches!(self, ObjectiveKind::Dvae | ObjectiveKind::Diwae)
    }
}

/// Objective family selector plus its knobs.
///
/// `alpha = 1` is the fully-denoised objective, `alpha = 0` the clean one;
/// in between the loss is the exact convex mix of the two bound terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    /// Importance samples per bound evaluation.
    #[serde(default = "default_one")]
    pub k: usize,
    /// Monte Carlo repetitions of the bound per example and step.
    #[serde(default = "default_one")]
    pub m: usize,
    /// Encoder-input noise standard deviation.
    #[serde(default)]
    pub sigma: f64,
    /// Denoising mix weight in `[0, 1]`.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Weight-normalization cap for the encoder; `None` means no cap (H = ∞).
    #[serde(default)]
    pub weight_norm_h: Option<f64>,
}

fn default_one() -> usize {
    1
}

fn default_alpha() -> f64 {
    1.0
}

impl ObjectiveConfig {
    pub fn new(kind: ObjectiveKind) -> Self {
        ObjectiveConfig { kind, k: 1, m: 1, sigma: 0.0, alpha: 1.0, weight_norm_h: None }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig { msg });
        if self.k < 1 {
            return fail(format!("k must be ≥ 1, got {}", self.k));
        }
        if self.m < 1 {
            return fail(format!("m must be ≥ 1, got {}", self.m));
        }
        if !self.sigma.is_finite() || self.sigma < 0.0 {
            return fail(format!("sigma must be finite and ≥ 0, got {}", self.sigma));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !self.kind.denoising() && self.sigma != 0.0 {
            return fail(format!("kind {:?} requires sigma = 0, got {}", self.kind, self.sigma));
        }
        if let Some(h) = self.weight_norm_h {
            if !(h > 0.0) {
                return fail(format!("weight_norm_h must be > 0, got {h}"));
            }
        }
        Ok(())
    }
}

// ── model pair ───────────────────────────────────────────────────────

/// Encoder/decoder pair with the fixed prior `N(0, I)` over latents.
#[derive(Debug, Clone)]
pub struct ModelPair {
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl ModelPair {
    pub fn new(encoder: Encoder, decoder: Decoder) -> Result<Self> {
        if encoder.latent_dim != decoder.latent_dim {
            return Err(Error::InvalidConfig {
                msg: format!(
                    "encoder latent dim {} != decoder latent dim {}",
                    encoder.latent_dim, decoder.latent_dim
                ),
            });
        }
        if encoder.input_dim != decoder.output_dim {
            return Err(Error::InvalidConfig {
                msg: format!(
                    "encoder input dim {} != decoder output dim {}",
                    encoder.input_dim, decoder.output_dim
                ),
            });
        }
        Ok(ModelPair { encoder, decoder })
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.latent_dim
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundModelPair<'t> {
        BoundModelPair {
            tape,
            encoder: self.encoder.bind(tape),
            decoder: self.decoder.bind(tape),
            latent_dim: self.latent_dim(),
        }
    }

    /// Bind against parameter leaves supplied in [`ModelPair::params`] order.
    pub fn bind_from_vars<'t>(&self, tape: &'t Tape, vars: &[Var<'t>]) -> BoundModelPair<'t> {
        assert_eq!(vars.len(), self.params().len(), "parameter var count mismatch");
        let mut it = vars.iter();
        let encoder = self.encoder.bind_from_vars(&mut it);
        let decoder = self.decoder.bind_from_vars(&mut it);
        BoundModelPair { tape, encoder, decoder, latent_dim: self.latent_dim() }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut n = self.encoder.param_names();
        n.extend(self.decoder.param_names());
        n
    }

    pub fn clone_params(&self) -> Vec<Tensor> {
        self.params().into_iter().cloned().collect()
    }

    pub fn set_params(&mut self, values: &[Tensor]) {
        let mut params = self.params_mut();
        assert_eq!(params.len(), values.len(), "parameter count mismatch");
        for (slot, v) in params.iter_mut().zip(values) {
            assert_eq!(slot.shape(), v.shape(), "parameter shape mismatch");
            **slot = v.clone();
        }
    }
}

/// A model whose joint log-density `ln p(x, z)` is computable on a tape,
/// differentiably in `z` (and in any bound parameters).
pub trait BoundGenerative<'t> {
    fn latent_dim(&self) -> usize;
    /// Per-example `ln p(z) + ln p(x|z)` as a `[batch]` tensor.
    fn log_joint(&self, x: &Tensor, z: Var<'t>) -> Result<Var<'t>>;
}

impl<'t, T: BoundGenerative<'t> + ?Sized> BoundGenerative<'t> for Box<T> {
    fn latent_dim(&self) -> usize {
        (**self).latent_dim()
    }

    fn log_joint(&self, x: &Tensor, z: Var<'t>) -> Result<Var<'t>> {
        (**self).log_joint(x, z)
    }
}

/// A generative model that can be bound onto any tape.  Implemented by
/// [`ModelPair`] and by the analytic test models in the oracle module, so
/// the evaluation estimators run unchanged on either.
pub trait Generative {
    fn latent_dim(&self) -> usize;
    fn bind_generative<'t>(&self, tape: &'t Tape) -> Box<dyn BoundGenerative<'t> + 't>;
}

impl Generative for ModelPair {
    fn latent_dim(&self) -> usize {
        self.latent_dim()
    }

    fn bind_generative<'t>(&self, tape: &'t Tape) -> Box<dyn BoundGenerative<'t> + 't> {
        Box::new(self.bind(tape))
    }
}

pub struct BoundModelPair<'t> {
    pub tape: &'t Tape,
    pub encoder: BoundEncoder<'t>,
    pub decoder: BoundDecoder<'t>,
    latent_dim: usize,
}

impl<'t> BoundModelPair<'t> {
    pub fn param_vars(&self) -> Vec<Var<'t>> {
        let mut v = self.encoder.param_vars();
        v.extend(self.decoder.param_vars());
        v
    }
}

impl<'t> BoundGenerative<'t> for BoundModelPair<'t> {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn log_joint(&self, x: &Tensor, z: Var<'t>) -> Result<Var<'t>> {
        let batch = z.shape()[0];
        let prior = GaussianVars::standard(self.tape, batch, self.latent_dim);
        let prior_lp = gaussian_log_prob(&prior, z)?;
        let logits = self.decoder.forward(z)?;
        let recon = bernoulli_log_prob(logits, x)?;
        prior_lp.add(recon)
    }
}

// ── estimators ───────────────────────────────────────────────────────

/// `x̃ = x + σ·noise`.  The perturbed batch feeds the encoder only and may
/// leave `[0, 1]`.
pub fn perturb_inputs(x: &Tensor, sigma: f64, noise: &Tensor) -> Result<Tensor> {
    if sigma < 0.0 {
        return Err(Error::OutOfRange {
            op: "perturb_inputs",
            msg: format!("sigma must be ≥ 0, got {sigma}"),
        });
    }
    if x.shape() != noise.shape() {
        return Err(Error::ShapeMismatch {
            op: "perturb_inputs",
            lhs: x.shape().to_vec(),
            rhs: noise.shape().to_vec(),
        });
    }
    let mut out = x.clone();
    for (o, &n) in out.data_mut().iter_mut().zip(noise.data()) {
        *o += sigma * n;
    }
    Ok(out)
}

/// k-sample importance-weighted bound for a given proposal batch:
/// `logsumexp_i[ln p(x, z_i) − ln q(z_i)] − ln k`, one value per example.
///
/// `noise` supplies the k reparameterization draws (`[batch, latent]` each);
/// the reconstruction target `x` is always the clean batch regardless of
/// what produced `q`.
pub fn iwae_bound_from_q<'t, G: BoundGenerative<'t>>(
    gen: &G,
    q: &GaussianVars<'t>,
    x: &Tensor,
    k: usize,
    noise: &[Tensor],
) -> Result<Var<'t>> {
    if k < 1 {
        return Err(Error::InvalidConfig { msg: format!("k must be ≥ 1, got {k}") });
    }
    if noise.len() != k {
        return Err(Error::InvalidConfig {
            msg: format!("expected {k} noise draws, got {}", noise.len()),
        });
    }
    let tape = q.mean.tape();
    let batch = q.mean.shape()[0];
    let mut terms = Vec::with_capacity(k);
    for nz in noise {
        let zn = tape.leaf(nz);
        let z = gaussian_rsample(q, zn)?;
        let lw = gen.log_joint(x, z)?.sub(gaussian_log_prob(q, z)?)?;
        terms.push(lw.reshape(vec![batch, 1])?);
    }
    let stacked = tape.apply(OpKind::Concat(1), &terms)?;
    stacked.logsumexp(1)?.add_scalar(-(k as f64).ln())
}

/// Spec-level estimator: encode `proposals_from`, then evaluate the k-sample
/// bound against the clean `x`.
pub fn iwae_bound_sample<'t>(
    bound: &BoundModelPair<'t>,
    x: &Tensor,
    proposals_from: &Tensor,
    k: usize,
    noise: &[Tensor],
) -> Result<Var<'t>> {
    let q = bound.encoder.forward(bound.tape.leaf(proposals_from))?;
    iwae_bound_from_q(bound, &q, x, k, noise)
}

/// Draw k reparameterization noise tensors for a batch.
pub fn draw_z_noise(k: usize, batch: usize, latent: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    (0..k).map(|_| Tensor::randn(&[batch, latent], rng)).collect()
}

/// Negative training objective (to minimize) for one minibatch.
///
/// Per example the value averaged over `m` Monte Carlo repetitions is
/// `alpha · bound(proposals from x + ε) + (1 − alpha) · bound(proposals from
/// x)` for the denoising kinds, and the clean bound alone for `vae`/`iwae`.
/// Fresh ε per repetition; the k reparameterization draws are shared between
/// the noisy and clean terms of a repetition.
///
/// `eps_rng` and `z_rng` are independent streams, so a `dvae` run with
/// `sigma = 0` consumes the same `z` draws as the matching `vae` run and
/// produces bitwise the same loss.
pub fn training_loss<'t>(
    bound: &BoundModelPair<'t>,
    x: &Tensor,
    cfg: &ObjectiveConfig,
    eps_rng: &mut ChaCha8Rng,
    z_rng: &mut ChaCha8Rng,
) -> Result<Var<'t>> {
    cfg.validate()?;
    let tape = bound.tape;
    let batch = x.rows();
    let latent = bound.latent_dim;
    let denoise = cfg.kind.denoising() && cfg.sigma > 0.0 && cfg.alpha > 0.0;
    let need_clean = !denoise || cfg.alpha < 1.0;

    let q_clean = if need_clean {
        Some(bound.encoder.forward(tape.leaf(x))?)
    } else {
        None
    };

    let mut rep_terms = Vec::with_capacity(cfg.m);
    for _ in 0..cfg.m {
        let noise_z = draw_z_noise(cfg.k, batch, latent, z_rng);
        let term = if denoise {
            let eps = Tensor::randn(&[batch, x.cols()], eps_rng);
            let x_tilde = perturb_inputs(x, cfg.sigma, &eps)?;
            let q_noisy = bound.encoder.forward(tape.leaf(&x_tilde))?;
            let b_noisy = iwae_bound_from_q(bound, &q_noisy, x, cfg.k, &noise_z)?;
            match &q_clean {
                Some(qc) => {
                    let b_clean = iwae_bound_from_q(bound, qc, x, cfg.k, &noise_z)?;
                    b_noisy
                        .mul_scalar(cfg.alpha)?
                        .add(b_clean.mul_scalar(1.0 - cfg.alpha)?)?
                }
                None => b_noisy,
            }
        } else {
            iwae_bound_from_q(bound, q_clean.as_ref().expect("clean proposals"), x, cfg.k, &noise_z)?
        };
        rep_terms.push(term.reshape(vec![batch, 1])?);
    }
    let per_example = if cfg.m == 1 {
        rep_terms[0].reshape(vec![batch])?
    } else {
        tape.apply(OpKind::Concat(1), &rep_terms)?.mean(Some(1))?
    };
    per_example.mean(None)?.neg()
}
