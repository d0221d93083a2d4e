//! Conjugate linear-Gaussian test model: `z ~ N(0, I_L)`,
//! `x = A·z + b + N(0, s²·I_d)` with orthogonal columns of `A`, so the exact
//! posterior `p(z|x)` is a *diagonal* Gaussian and the marginal `ln p(x)` is
//! available in closed form.  This is the workhorse for checking bound
//! estimators against analytic truth and for evaluating the denoising
//! regularizer at the infinite-capacity optimum.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::dist::{gaussian_log_prob, DiagGaussian, GaussianVars};
use crate::error::{Error, Result};
use crate::objective::{BoundGenerative, Generative};
use crate::oracle::{
    gaussian_to_naturals, kernel_weights, ExpFamily, NormMode, SyntheticPosteriorSet,
};
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.8378770664093453;

/// Linear-Gaussian latent-variable model with diagonal posteriors.
#[derive(Debug, Clone)]
pub struct LinearGaussianModel {
    /// Loading matrix `[d, L]` with mutually orthogonal columns.
    pub a: Tensor,
    /// Offset `[d]`.
    pub b: Tensor,
    /// Observation noise variance `s²`.
    pub noise_var: f64,
    /// Cached `‖a_col_j‖²` per latent dimension.
    col_sq: Vec<f64>,
}

impl LinearGaussianModel {
    /// Build from a loading matrix whose columns are made orthogonal via
    /// Gram–Schmidt (directions from the seed, scales kept in `[0.5, 1.5]`).
    pub fn random(d: usize, latent: usize, noise_var: f64, seed: u64) -> Self {
        assert!(latent <= d, "need d ≥ latent for orthogonal columns");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(latent);
        for _ in 0..latent {
            loop {
                let mut c: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                for prev in &cols {
                    let dot: f64 = c.iter().zip(prev).map(|(a, b)| a * b).sum();
                    let nsq: f64 = prev.iter().map(|v| v * v).sum();
                    for (ci, pi) in c.iter_mut().zip(prev) {
                        *ci -= dot / nsq * pi;
                    }
                }
                let norm: f64 = c.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 1e-6 {
                    let scale = rng.random_range(0.5..1.5) / norm;
                    c.iter_mut().for_each(|v| *v *= scale);
                    cols.push(c);
                    break;
                }
            }
        }
        let mut a = Tensor::zeros(&[d, latent]);
        for (j, c) in cols.iter().enumerate() {
            for (i, &v) in c.iter().enumerate() {
                a.data_mut()[i * latent + j] = v;
            }
        }
        let b = Tensor::rand_uniform(&[d], -0.5, 0.5, &mut rng);
        Self::new(a, b, noise_var)
    }

    /// The factorized model `p(x, z) = p(z)·p(x)`: zero loading matrix.
    pub fn factorized(d: usize, latent: usize, noise_var: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = Tensor::rand_uniform(&[d], -0.5, 0.5, &mut rng);
        Self::new(Tensor::zeros(&[d, latent]), b, noise_var)
    }

    pub fn new(a: Tensor, b: Tensor, noise_var: f64) -> Self {
        assert!(noise_var > 0.0);
        assert_eq!(a.rank(), 2);
        assert_eq!(b.shape(), &[a.shape()[0]]);
        let (d, latent) = (a.shape()[0], a.shape()[1]);
        // verify column orthogonality (the diagonal-posterior requirement)
        for j1 in 0..latent {
            for j2 in (j1 + 1)..latent {
                let dot: f64 =
                    (0..d).map(|i| a.data()[i * latent + j1] * a.data()[i * latent + j2]).sum();
                assert!(dot.abs() < 1e-9, "columns {j1},{j2} of A not orthogonal (dot {dot})");
            }
        }
        let col_sq: Vec<f64> = (0..latent)
            .map(|j| (0..d).map(|i| a.data()[i * latent + j].powi(2)).sum())
            .collect();
        LinearGaussianModel { a, b, noise_var, col_sq }
    }

    pub fn obs_dim(&self) -> usize {
        self.a.shape()[0]
    }

    /// Exact posterior `p(z|x)`: diagonal with
    /// `var_j = 1/(1 + ‖a_j‖²/s²)`, `mean_j = var_j · a_jᵀ(x−b)/s²`.
    pub fn posterior(&self, x: &[f64]) -> DiagGaussian {
        let (d, latent) = (self.obs_dim(), self.a.shape()[1]);
        assert_eq!(x.len(), d);
        let mut mean = Vec::with_capacity(latent);
        let mut var = Vec::with_capacity(latent);
        for j in 0..latent {
            let v = 1.0 / (1.0 + self.col_sq[j] / self.noise_var);
            let at_centered: f64 =
                (0..d).map(|i| self.a.data()[i * latent + j] * (x[i] - self.b.data()[i])).sum();
            var.push(v);
            mean.push(v * at_centered / self.noise_var);
        }
        DiagGaussian::new(mean, var).expect("posterior variance positive by construction")
    }

    /// Exact log-marginal `ln N(x; b, A·Aᵀ + s²·I)`.
    ///
    /// With orthogonal columns, `A·Aᵀ + s²·I` has eigenvalues `‖a_j‖² + s²`
    /// along the (normalized) columns and `s²` on the orthogonal complement,
    /// which gives the determinant and the quadratic form directly.
    pub fn log_marginal(&self, x: &[f64]) -> f64 {
        let (d, latent) = (self.obs_dim(), self.a.shape()[1]);
        assert_eq!(x.len(), d);
        let centered: Vec<f64> = x.iter().zip(self.b.data()).map(|(a, b)| a - b).collect();
        // components along the normalized columns
        let mut quad = 0.0;
        let mut logdet = (d - latent) as f64 * self.noise_var.ln();
        let mut residual_sq: f64 = centered.iter().map(|v| v * v).sum();
        for j in 0..latent {
            let proj: f64 =
                (0..d).map(|i| self.a.data()[i * latent + j] * centered[i]).sum::<f64>();
            let comp_sq = proj * proj / self.col_sq[j];
            let eig = self.col_sq[j] + self.noise_var;
            quad += comp_sq / eig;
            logdet += eig.ln();
            residual_sq -= comp_sq;
        }
        quad += residual_sq.max(0.0) / self.noise_var;
        -0.5 * (d as f64 * LN_2PI + logdet + quad)
    }

    /// Posterior natural parameters for every row, as a posterior set for
    /// the kernel-regression oracles.
    pub fn posterior_set(&self, data: &Tensor) -> SyntheticPosteriorSet {
        let naturals = (0..data.rows())
            .map(|i| gaussian_to_naturals(&self.posterior(data.row(i))))
            .collect();
        SyntheticPosteriorSet::new(ExpFamily::DiagGaussian, data.clone(), naturals)
            .expect("posteriors valid by construction")
    }

    /// Draw a dataset from the model itself.
    pub fn sample_data(&self, n: usize, seed: u64) -> Tensor {
        let (d, latent) = (self.obs_dim(), self.a.shape()[1]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Tensor::zeros(&[n, d]);
        for r in 0..n {
            let z = Tensor::randn(&[latent], &mut rng);
            let eps = Tensor::randn(&[d], &mut rng);
            let row: Vec<f64> = (0..d)
                .map(|i| {
                    let az: f64 =
                        (0..latent).map(|j| self.a.data()[i * latent + j] * z.data()[j]).sum();
                    az + self.b.data()[i] + self.noise_var.sqrt() * eps.data()[i]
                })
                .collect();
            out.set_row(r, &row);
        }
        out
    }
}

pub struct BoundLinearGaussian<'t> {
    tape: &'t Tape,
    a_t: Var<'t>, // [L, d]
    b: Var<'t>,   // [d]
    noise_var: f64,
    latent: usize,
}

impl<'t> BoundGenerative<'t> for BoundLinearGaussian<'t> {
    fn latent_dim(&self) -> usize {
        self.latent
    }

    fn log_joint(&self, x: &Tensor, z: Var<'t>) -> Result<Var<'t>> {
        let batch = z.shape()[0];
        if x.rows() != batch {
            return Err(Error::ShapeMismatch {
                op: "linear_gaussian_log_joint",
                lhs: x.shape().to_vec(),
                rhs: z.shape(),
            });
        }
        let prior = GaussianVars::standard(self.tape, batch, self.latent);
        let prior_lp = gaussian_log_prob(&prior, z)?;
        let mean = z.matmul(self.a_t)?.add(self.b)?;
        let lik = GaussianVars {
            mean,
            var: self.tape.leaf_owned(Tensor::full(&[batch, x.cols()], self.noise_var)),
        };
        let obs_lp = gaussian_log_prob(&lik, self.tape.leaf(x))?;
        prior_lp.add(obs_lp)
    }
}

impl Generative for LinearGaussianModel {
    fn latent_dim(&self) -> usize {
        self.a.shape()[1]
    }

    fn bind_generative<'t>(&self, tape: &'t Tape) -> Box<dyn BoundGenerative<'t> + 't> {
        let (d, latent) = (self.obs_dim(), self.a.shape()[1]);
        let mut a_t = Tensor::zeros(&[latent, d]);
        for i in 0..d {
            for j in 0..latent {
                a_t.data_mut()[j * d + i] = self.a.data()[i * latent + j];
            }
        }
        Box::new(BoundLinearGaussian {
            tape,
            a_t: tape.leaf_owned(a_t),
            b: tape.leaf(&self.b),
            noise_var: self.noise_var,
            latent,
        })
    }
}

/// Monte Carlo value of the denoising regularizer at the infinite-capacity
/// optimum: the average over data points and noise draws of
/// `KL(f*_σ(x+ε) ‖ p(z|x))`, with `f*_σ` the kernel-weighted combination of
/// the exact posterior naturals (squared-norm kernel).
pub fn denoising_regularizer_value(
    model: &LinearGaussianModel,
    data: &Tensor,
    sigma: f64,
    mc: usize,
    seed: u64,
) -> Result<f64> {
    denoising_regularizer_stats(model, data, sigma, mc, seed).map(|(mean, _)| mean)
}

/// Like [`denoising_regularizer_value`] but also returns the Monte Carlo
/// standard error of the estimate.
pub fn denoising_regularizer_stats(
    model: &LinearGaussianModel,
    data: &Tensor,
    sigma: f64,
    mc: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if mc < 100 {
        return Err(Error::InvalidConfig { msg: format!("mc must be ≥ 100, got {mc}") });
    }
    if !(sigma > 0.0) {
        return Err(Error::OutOfRange {
            op: "denoising_regularizer_value",
            msg: format!("sigma must be > 0, got {sigma}"),
        });
    }
    let posts = model.posterior_set(data);
    let n = data.rows();
    let d = data.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut total_sq = 0.0;
    for i in 0..n {
        let x = data.row(i);
        let exact = model.posterior(x);
        for _ in 0..mc {
            let noise = Tensor::randn(&[d], &mut rng);
            let x_tilde: Vec<f64> =
                x.iter().zip(noise.data()).map(|(&v, &e)| v + sigma * e).collect();
            let w = kernel_weights(&x_tilde, data, sigma, NormMode::Squared)?;
            let mut eta = vec![0.0; posts.natural_dim()];
            for (wi, etai) in w.iter().zip(&posts.naturals) {
                for (e, &v) in eta.iter_mut().zip(etai) {
                    *e += wi * v;
                }
            }
            let f_star = crate::oracle::gaussian_from_naturals(&eta)?;
            let kl = f_star.kl(&exact)?;
            total += kl;
            total_sq += kl * kl;
        }
    }
    let draws = (n * mc) as f64;
    let mean = total / draws;
    let var = (total_sq / draws - mean * mean).max(0.0);
    Ok((mean, (var / draws).sqrt()))
}
