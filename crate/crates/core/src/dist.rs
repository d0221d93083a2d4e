//! Diagonal Gaussian and Bernoulli distributions.
//!
//! Two layers: plain-value types ([`DiagGaussian`], [`BernoulliVec`]) used by
//! the closed-form oracles and bookkeeping, and on-tape batch functions
//! (`gaussian_*`, [`bernoulli_log_prob`]) used by the differentiable
//! objectives.  Both compute the same formulas; the tests cross-check them.


use rand::Rng;

use crate::autodiff::{softplus_scalar, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.8378770664093453;

// ── plain-value types ────────────────────────────────────────────────

/// Diagonal Gaussian given by mean and (strictly positive) variance vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::InvalidDistribution {
                msg: format!("mean dim {} != variance dim {}", mean.len(), var.len()),
            });
        }
        if var.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
            return Err(Error::InvalidDistribution { msg: "variance must be finite and > 0".into() });
        }
        Ok(DiagGaussian { mean, var })
    }

    pub fn standard(dim: usize) -> Self {
        DiagGaussian { mean: vec![0.0; dim], var: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn var(&self) -> &[f64] {
        &self.var
    }

    /// `z = mean + sqrt(var) ⊙ noise` for externally drawn standard noise.
    pub fn rsample(&self, noise: &[f64]) -> Result<Vec<f64>> {
        if noise.len() != self.dim() {
            return Err(Error::InvalidDistribution {
                msg: format!("noise dim {} != distribution dim {}", noise.len(), self.dim()),
            });
        }
        Ok(self
            .mean
            .iter()
            .zip(&self.var)
            .zip(noise)
            .map(|((&m, &v), &n)| m + v.sqrt() * n)
            .collect())
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let noise = Tensor::randn(&[self.dim()], rng);
        self.rsample(noise.data()).unwrap()
    }

    pub fn log_prob(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.dim() {
            return Err(Error::InvalidDistribution {
                msg: format!("point dim {} != distribution dim {}", z.len(), self.dim()),
            });
        }
        let mut lp = 0.0;
        for ((&m, &v), &zi) in self.mean.iter().zip(&self.var).zip(z) {
            lp += -0.5 * (LN_2PI + v.ln()) - (zi - m) * (zi - m) / (2.0 * v);
        }
        Ok(lp)
    }

    /// Closed-form `KL(self ‖ p)`, non-negative, zero iff parameters equal.
    pub fn kl(&self, p: &DiagGaussian) -> Result<f64> {
        if self.dim() != p.dim() {
            return Err(Error::InvalidDistribution {
                msg: format!("KL dims differ: {} vs {}", self.dim(), p.dim()),
            });
        }
        let mut kl = 0.0;
        for i in 0..self.dim() {
            let (mq, vq) = (self.mean[i], self.var[i]);
            let (mp, vp) = (p.mean[i], p.var[i]);
            kl += 0.5 * ((vp / vq).ln() + (vq + (mq - mp) * (mq - mp)) / vp - 1.0);
        }
        Ok(kl)
    }
}

/// Factorized Bernoulli over observation units, parameterized by logits.
#[derive(Debug, Clone, PartialEq)]
pub struct BernoulliVec {
    logits: Vec<f64>,
}

impl BernoulliVec {
    pub fn new(logits: Vec<f64>) -> Result<Self> {
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::InvalidDistribution { msg: "logits must be finite".into() });
        }
        Ok(BernoulliVec { logits })
    }

    pub fn dim(&self) -> usize {
        self.logits.len()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// `Σ_i x_i·l_i − softplus(l_i)`; requires binary `x`.
    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::InvalidDistribution {
                msg: format!("point dim {} != distribution dim {}", x.len(), self.dim()),
            });
        }
        check_binary(x)?;
        Ok(self
            .logits
            .iter()
            .zip(x)
            .map(|(&l, &xi)| xi * l - softplus_scalar(l))
            .sum())
    }
}

fn check_binary(x: &[f64]) -> Result<()> {
    if x.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::OutOfRange {
            op: "bernoulli_log_prob",
            msg: "target vector must be binary (0/1)".into(),
        });
    }
    Ok(())
}

// ── on-tape batch functions ──────────────────────────────────────────

/// Batch of diagonal Gaussians living on a tape: `mean` and `var` are both
/// `[batch, dim]`.  `var` must be elementwise positive.
#[derive(Clone, Copy)]
pub struct GaussianVars<'t> {
    pub mean: Var<'t>,
    pub var: Var<'t>,
}

impl<'t> GaussianVars<'t> {
    pub fn new(mean: Var<'t>, var: Var<'t>) -> Result<Self> {
        if mean.shape() != var.shape() {
            return Err(Error::InvalidDistribution {
                msg: format!("mean shape {:?} != variance shape {:?}", mean.shape(), var.shape()),
            });
        }
        if var.value().data().iter().any(|&v| v <= 0.0) {
            return Err(Error::InvalidDistribution { msg: "variance must be > 0".into() });
        }
        Ok(GaussianVars { mean, var })
    }

    /// The standard-normal prior `N(0, I)` as constant leaves.
    pub fn standard(tape: &'t crate::autodiff::Tape, batch: usize, dim: usize) -> Self {
        GaussianVars {
            mean: tape.leaf_owned(Tensor::zeros(&[batch, dim])),
            var: tape.leaf_owned(Tensor::full(&[batch, dim], 1.0)),
        }
    }
}

/// Reparameterized sample `mean + sqrt(var) ⊙ noise`; differentiable with
/// respect to the Gaussian parameters.
pub fn gaussian_rsample<'t>(q: &GaussianVars<'t>, noise: Var<'t>) -> Result<Var<'t>> {
    if noise.shape() != q.mean.shape() {
        return Err(Error::ShapeMismatch {
            op: "gaussian_rsample",
            lhs: q.mean.shape(),
            rhs: noise.shape(),
        });
    }
    q.mean.add(q.var.sqrt()?.mul(noise)?)
}

/// Per-example log-density `[batch]` of `z` under `q`.
pub fn gaussian_log_prob<'t>(q: &GaussianVars<'t>, z: Var<'t>) -> Result<Var<'t>> {
    if z.shape() != q.mean.shape() {
        return Err(Error::ShapeMismatch {
            op: "gaussian_log_prob",
            lhs: q.mean.shape(),
            rhs: z.shape(),
        });
    }
    let norm = q.var.log()?.add_scalar(LN_2PI)?.mul_scalar(-0.5)?;
    let quad = z.sub(q.mean)?.square()?.div(q.var.mul_scalar(2.0)?)?.neg()?;
    norm.add(quad)?.sum(Some(1))
}

/// Per-example closed-form `KL(q ‖ p)` as a `[batch]` tensor.
pub fn gaussian_kl<'t>(q: &GaussianVars<'t>, p: &GaussianVars<'t>) -> Result<Var<'t>> {
    if q.mean.shape() != p.mean.shape() {
        return Err(Error::ShapeMismatch {
            op: "gaussian_kl",
            lhs: q.mean.shape(),
            rhs: p.mean.shape(),
        });
    }
    let log_ratio = p.var.div(q.var)?.log()?;
    let quad = q.var.add(q.mean.sub(p.mean)?.square()?)?.div(p.var)?;
    log_ratio.add(quad)?.add_scalar(-1.0)?.sum(Some(1))?.mul_scalar(0.5)
}

/// Per-example Bernoulli log-likelihood `[batch]` of binary targets `x`
/// under `logits` (both `[batch, dim]`), in the overflow-free logit form.
pub fn bernoulli_log_prob<'t>(logits: Var<'t>, x: &Tensor) -> Result<Var<'t>> {
    if logits.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            op: "bernoulli_log_prob",
            lhs: logits.shape(),
            rhs: x.shape().to_vec(),
        });
    }
    check_binary(x.data())?;
    let tape = logits.tape();
    let xv = tape.leaf(x);
    logits.mul(xv)?.sub(logits.softplus()?)?.sum(Some(1))
}
