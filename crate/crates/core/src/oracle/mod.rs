//! Closed-form and brute-force reference implementations on tractable
//! exponential-family instances.  These are the independent oracles that the
//! rest of the library is checked against: kernel-weighted KL centroids and
//! their grid minimizers, the optimal-decoder moment map, denoising
//! regularizer values on a conjugate model, and the two-bound comparison on
//! a finite mixture.

pub mod appendix_b;
pub mod conjugate;
pub mod verify;

pub use conjugate::LinearGaussianModel;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::sigmoid_scalar;
use crate::dist::DiagGaussian;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

// ── exponential families ─────────────────────────────────────────────

/// The two minimal exponential families used by the oracles.
///
/// Natural-parameter layout:
/// - diagonal Gaussian over `R^L`: `[η1_1 … η1_L, η2_1 … η2_L]` with
///   `η1 = μ/σ²`, `η2 = −1/(2σ²) < 0`; sufficient statistic `(z, z²)`.
/// - Bernoulli over `{0,1}^d`: the logit vector; sufficient statistic `x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpFamily {
    DiagGaussian,
    Bernoulli,
}

impl ExpFamily {
    pub fn suff_stat_desc(&self) -> &'static str {
        match self {
            ExpFamily::DiagGaussian => "T(z) = (z, z^2) per coordinate",
            ExpFamily::Bernoulli => "T(x) = x",
        }
    }

    pub fn valid_natural(&self, eta: &[f64]) -> bool {
        match self {
            ExpFamily::DiagGaussian => {
                eta.len() % 2 == 0
                    && eta.iter().all(|v| v.is_finite())
                    && eta[eta.len() / 2..].iter().all(|&n2| n2 < 0.0)
            }
            ExpFamily::Bernoulli => eta.iter().all(|v| v.is_finite()),
        }
    }

    pub fn natural_to_mean(&self, eta: &[f64]) -> Result<Vec<f64>> {
        if !self.valid_natural(eta) {
            return Err(Error::InvalidDistribution {
                msg: format!("invalid natural parameters for {self:?}"),
            });
        }
        match self {
            ExpFamily::DiagGaussian => {
                let l = eta.len() / 2;
                let mut mu = Vec::with_capacity(eta.len());
                for i in 0..l {
                    mu.push(-eta[i] / (2.0 * eta[l + i]));
                }
                for i in 0..l {
                    let var = -1.0 / (2.0 * eta[l + i]);
                    mu.push(mu[i] * mu[i] + var);
                }
                Ok(mu)
            }
            ExpFamily::Bernoulli => Ok(eta.iter().map(|&v| sigmoid_scalar(v)).collect()),
        }
    }

    pub fn mean_to_natural(&self, mu: &[f64]) -> Result<Vec<f64>> {
        match self {
            ExpFamily::DiagGaussian => {
                if mu.len() % 2 != 0 {
                    return Err(Error::InvalidDistribution {
                        msg: "Gaussian mean parameters come in (mean, second-moment) pairs".into(),
                    });
                }
                let l = mu.len() / 2;
                let mut eta = vec![0.0; mu.len()];
                for i in 0..l {
                    let var = mu[l + i] - mu[i] * mu[i];
                    if var <= 0.0 {
                        return Err(Error::InvalidDistribution {
                            msg: format!("second moment implies non-positive variance {var}"),
                        });
                    }
                    eta[i] = mu[i] / var;
                    eta[l + i] = -1.0 / (2.0 * var);
                }
                Ok(eta)
            }
            ExpFamily::Bernoulli => {
                if mu.iter().any(|&p| !(0.0 < p && p < 1.0)) {
                    return Err(Error::InvalidDistribution {
                        msg: "Bernoulli mean parameters must lie in (0, 1)".into(),
                    });
                }
                Ok(mu.iter().map(|&p| (p / (1.0 - p)).ln()).collect())
            }
        }
    }

    /// Log-partition `A(η)`.
    pub fn log_partition(&self, eta: &[f64]) -> Result<f64> {
        if !self.valid_natural(eta) {
            return Err(Error::InvalidDistribution {
                msg: format!("invalid natural parameters for {self:?}"),
            });
        }
        match self {
            ExpFamily::DiagGaussian => {
                let l = eta.len() / 2;
                let mut a = 0.0;
                for i in 0..l {
                    a += -eta[i] * eta[i] / (4.0 * eta[l + i]) - 0.5 * (-2.0 * eta[l + i]).ln();
                }
                Ok(a)
            }
            ExpFamily::Bernoulli => {
                Ok(eta.iter().map(|&v| crate::autodiff::softplus_scalar(v)).sum())
            }
        }
    }
}

/// A family member pinned to specific natural parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpFamilyMember {
    pub family: ExpFamily,
    pub natural: Vec<f64>,
}

impl ExpFamilyMember {
    pub fn new(family: ExpFamily, natural: Vec<f64>) -> Result<Self> {
        if !family.valid_natural(&natural) {
            return Err(Error::InvalidDistribution {
                msg: format!("invalid natural parameters for {family:?}"),
            });
        }
        Ok(ExpFamilyMember { family, natural })
    }

    pub fn mean(&self) -> Vec<f64> {
        self.family.natural_to_mean(&self.natural).expect("validated at construction")
    }

    pub fn log_partition(&self) -> f64 {
        self.family.log_partition(&self.natural).expect("validated at construction")
    }
}

/// Diagonal Gaussian from blocked natural parameters.
pub fn gaussian_from_naturals(eta: &[f64]) -> Result<DiagGaussian> {
    if !ExpFamily::DiagGaussian.valid_natural(eta) {
        return Err(Error::InvalidDistribution { msg: "invalid Gaussian naturals".into() });
    }
    let l = eta.len() / 2;
    let mut mean = Vec::with_capacity(l);
    let mut var = Vec::with_capacity(l);
    for i in 0..l {
        let v = -1.0 / (2.0 * eta[l + i]);
        var.push(v);
        mean.push(eta[i] * v);
    }
    DiagGaussian::new(mean, var)
}

/// Blocked natural parameters of a diagonal Gaussian.
pub fn gaussian_to_naturals(g: &DiagGaussian) -> Vec<f64> {
    let l = g.dim();
    let mut eta = vec![0.0; 2 * l];
    for i in 0..l {
        eta[i] = g.mean()[i] / g.var()[i];
        eta[l + i] = -1.0 / (2.0 * g.var()[i]);
    }
    eta
}

// ── synthetic posterior sets and kernel weights ──────────────────────

/// Dataset points paired with per-point posterior natural parameters, all in
/// the valid natural domain.
#[derive(Debug, Clone)]
pub struct SyntheticPosteriorSet {
    pub family: ExpFamily,
    pub points: Tensor, // [n, d]
    pub naturals: Vec<Vec<f64>>,
}

impl SyntheticPosteriorSet {
    pub fn new(family: ExpFamily, points: Tensor, naturals: Vec<Vec<f64>>) -> Result<Self> {
        if points.rows() != naturals.len() {
            return Err(Error::InvalidConfig {
                msg: format!("{} points but {} posteriors", points.rows(), naturals.len()),
            });
        }
        if naturals.is_empty() {
            return Err(Error::InvalidConfig { msg: "posterior set may not be empty".into() });
        }
        let dim = naturals[0].len();
        for eta in &naturals {
            if eta.len() != dim || !family.valid_natural(eta) {
                return Err(Error::InvalidDistribution {
                    msg: "posterior naturals invalid or inconsistent in dimension".into(),
                });
            }
        }
        Ok(SyntheticPosteriorSet { family, points, naturals })
    }

    pub fn len(&self) -> usize {
        self.naturals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.naturals.is_empty()
    }

    pub fn natural_dim(&self) -> usize {
        self.naturals[0].len()
    }
}

/// Which exponent the RBF kernel uses.  The derivation of the optimal
/// denoising inference model implies the squared norm; the literal mode
/// keeps the unsquared form as printed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Squared,
    Literal,
}

/// Normalized kernel weights `w_σ(x, x_i) = K_σ(x, x_i) / Σ_j K_σ(x, x_j)`,
/// computed in log-space.  Positive, sum to one.
pub fn kernel_weights(
    x: &[f64],
    dataset: &Tensor,
    sigma: f64,
    mode: NormMode,
) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::OutOfRange {
            op: "kernel_weights",
            msg: format!("sigma must be > 0, got {sigma}"),
        });
    }
    let n = dataset.rows();
    if n == 0 {
        return Err(Error::EmptySplit { split: "kernel dataset" });
    }
    if dataset.cols() != x.len() {
        return Err(Error::ShapeMismatch {
            op: "kernel_weights",
            lhs: vec![x.len()],
            rhs: dataset.shape().to_vec(),
        });
    }
    let mut logk = Vec::with_capacity(n);
    for i in 0..n {
        let sq: f64 = dataset.row(i).iter().zip(x).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let dist = match mode {
            NormMode::Squared => sq,
            NormMode::Literal => sq.sqrt(),
        };
        logk.push(-dist / (2.0 * sigma * sigma));
    }
    let m = logk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = logk.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    Ok(w)
}

/// The optimal denoising inference model at infinite capacity: the
/// kernel-weighted convex combination of the posterior naturals.
pub fn optimal_denoising_inference(
    x: &[f64],
    posts: &SyntheticPosteriorSet,
    sigma: f64,
    mode: NormMode,
) -> Result<Vec<f64>> {
    let w = kernel_weights(x, &posts.points, sigma, mode)?;
    let dim = posts.natural_dim();
    let mut eta = vec![0.0; dim];
    for (wi, etai) in w.iter().zip(&posts.naturals) {
        for (e, &v) in eta.iter_mut().zip(etai) {
            *e += wi * v;
        }
    }
    Ok(eta)
}

// ── brute-force grid minimizer ───────────────────────────────────────

/// Default grid resolution: points per dimension.
pub const GRID_POINTS_PER_DIM: usize = 201;
/// Default hull margin as a fraction of the per-dimension range.
pub const GRID_MARGIN: f64 = 0.5;

/// Grid of natural-domain candidates for the Gaussian family, axis-aligned
/// in per-coordinate *moment* coordinates `[μ_1…μ_L, v_1…v_L]`.
///
/// The weighted-KL objective separates per moment coordinate
/// (`∂²/∂μ∂v ≡ 0`), so the discrete minimizer of a product grid provably
/// lands within one cell of the continuous minimizer per dimension.  An
/// axis-aligned grid in natural coordinates lacks that guarantee: the
/// Fisher coupling of `(η1, η2)` at large means creates valleys along which
/// the discrete argmin drifts many cells at negligible objective change.
#[derive(Debug, Clone)]
pub struct MomentGrid {
    pub axes: Vec<Vec<f64>>,
}

/// Blocked moment coordinates `[μ…, v…]` of a Gaussian natural vector.
pub fn naturals_to_moments(eta: &[f64]) -> Result<Vec<f64>> {
    let g = gaussian_from_naturals(eta)?;
    let mut out = g.mean().to_vec();
    out.extend_from_slice(g.var());
    Ok(out)
}

fn moments_to_naturals(m: &[f64]) -> Vec<f64> {
    let l = m.len() / 2;
    let mut eta = vec![0.0; m.len()];
    for i in 0..l {
        eta[i] = m[i] / m[l + i];
        eta[l + i] = -1.0 / (2.0 * m[l + i]);
    }
    eta
}

impl MomentGrid {
    /// Cover the moment-coordinate hull of the posterior set with `margin`
    /// relative slack and `points` samples per dimension.  Variance axes are
    /// clamped positive.
    pub fn covering(naturals: &[Vec<f64>], points: usize, margin: f64) -> Result<MomentGrid> {
        assert!(points >= 2);
        let moments: Vec<Vec<f64>> =
            naturals.iter().map(|e| naturals_to_moments(e)).collect::<Result<_>>()?;
        let dim = moments[0].len();
        let l = dim / 2;
        let mut axes = Vec::with_capacity(dim);
        for d in 0..dim {
            let lo = moments.iter().map(|e| e[d]).fold(f64::INFINITY, f64::min);
            let hi = moments.iter().map(|e| e[d]).fold(f64::NEG_INFINITY, f64::max);
            let range = if hi > lo { hi - lo } else { lo.abs().max(1.0) * 0.5 };
            let mut a = lo - margin * range;
            let b = hi + margin * range;
            if d >= l {
                a = a.max(lo * 0.25).max(1e-9); // variance stays positive
            }
            let step = (b - a) / (points - 1) as f64;
            axes.push((0..points).map(|i| a + i as f64 * step).collect());
        }
        Ok(MomentGrid { axes })
    }

    /// Per-dimension grid step, in moment coordinates.
    pub fn cell(&self) -> Vec<f64> {
        self.axes.iter().map(|a| a[1] - a[0]).collect()
    }

    pub fn total_points(&self) -> usize {
        self.axes.iter().map(|a| a.len()).product()
    }

    /// Grid point in moment coordinates.
    pub fn point(&self, mut flat: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.axes.len()];
        for (d, axis) in self.axes.iter().enumerate().rev() {
            out[d] = axis[flat % axis.len()];
            flat /= axis.len();
        }
        out
    }

    /// Grid point as natural parameters.
    pub fn point_naturals(&self, flat: usize) -> Vec<f64> {
        moments_to_naturals(&self.point(flat))
    }

    fn on_boundary(&self, mut flat: usize) -> Option<usize> {
        for (d, axis) in self.axes.iter().enumerate().rev() {
            let idx = flat % axis.len();
            if idx == 0 || idx == axis.len() - 1 {
                return Some(d);
            }
            flat /= axis.len();
        }
        None
    }
}

/// Weighted-KL objective `Σ_i w_i · KL(q_η ‖ p_{η_i})` for Gaussian
/// posteriors, via the closed-form KL.
pub fn weighted_kl_objective(
    eta: &[f64],
    weights: &[f64],
    posts: &SyntheticPosteriorSet,
) -> Result<f64> {
    let q = gaussian_from_naturals(eta)?;
    let mut total = 0.0;
    for (w, post_eta) in weights.iter().zip(&posts.naturals) {
        let p = gaussian_from_naturals(post_eta)?;
        total += w * q.kl(&p)?;
    }
    Ok(total)
}

/// Exhaustive grid minimizer of the weighted KL sum — the independent oracle
/// for the kernel-regression optimum.  Returns the minimizing natural
/// parameters; errors if the minimizer lands on the grid boundary (the grid
/// was too small to bracket it).
pub fn brute_force_weighted_kl_min(
    weights: &[f64],
    posts: &SyntheticPosteriorSet,
    grid: &MomentGrid,
) -> Result<Vec<f64>> {
    if posts.family != ExpFamily::DiagGaussian {
        return Err(Error::InvalidConfig {
            msg: "grid minimizer implemented for the Gaussian family".into(),
        });
    }
    let mut best = f64::INFINITY;
    let mut best_flat = 0usize;
    for flat in 0..grid.total_points() {
        let eta = grid.point_naturals(flat);
        let obj = weighted_kl_objective(&eta, weights, posts)?;
        if obj < best {
            best = obj;
            best_flat = flat;
        }
    }
    if let Some(dim) = grid.on_boundary(best_flat) {
        return Err(Error::GridBoundary { dim });
    }
    Ok(grid.point_naturals(best_flat))
}

/// Max-over-pairs estimate of the Lipschitz constant of the optimal
/// denoising inference map, in L1 norms.  Pairs are sampled uniformly from
/// the dataset bounding box (with margin); pairs closer than 1e-9 in L1 are
/// skipped.
pub fn empirical_lipschitz(
    posts: &SyntheticPosteriorSet,
    sigma: f64,
    probe_pairs: usize,
    seed: u64,
    mode: NormMode,
) -> Result<f64> {
    if probe_pairs < 100 {
        return Err(Error::InvalidConfig {
            msg: format!("probe_pairs must be ≥ 100, got {probe_pairs}"),
        });
    }
    let d = posts.points.cols();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for r in 0..posts.points.rows() {
        for (j, &v) in posts.points.row(r).iter().enumerate() {
            lo[j] = lo[j].min(v);
            hi[j] = hi[j].max(v);
        }
    }
    for j in 0..d {
        let range = (hi[j] - lo[j]).max(1.0);
        lo[j] -= 0.5 * range;
        hi[j] += 0.5 * range;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..d).map(|j| rng.random_range(lo[j]..hi[j])).collect()
    };
    let mut l_hat = 0.0f64;
    for _ in 0..probe_pairs {
        let x1 = sample(&mut rng);
        let x2 = sample(&mut rng);
        let dx: f64 = x1.iter().zip(&x2).map(|(a, b)| (a - b).abs()).sum();
        if dx < 1e-9 {
            continue;
        }
        let f1 = optimal_denoising_inference(&x1, posts, sigma, mode)?;
        let f2 = optimal_denoising_inference(&x2, posts, sigma, mode)?;
        let df: f64 = f1.iter().zip(&f2).map(|(a, b)| (a - b).abs()).sum();
        l_hat = l_hat.max(df / dx);
    }
    Ok(l_hat)
}

// ── optimal decoder (moment map) ─────────────────────────────────────

/// The infinite-capacity optimal decoder at a latent point: the
/// responsibility-weighted average of sufficient statistics
/// `μ = Σ_i q(x_i|z) · T(x_i)`, with responsibilities computed in log-space.
/// For the Bernoulli family `T(x) = x`, so `μ` is a pixelwise convex
/// combination of the dataset rows.
pub fn optimal_decoder_params<F>(z: &[f64], data: &Tensor, proposal_fn: F) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> DiagGaussian,
{
    let n = data.rows();
    if n == 0 {
        return Err(Error::EmptySplit { split: "decoder dataset" });
    }
    let mut logdens = Vec::with_capacity(n);
    for i in 0..n {
        let q = proposal_fn(data.row(i));
        logdens.push(q.log_prob(z)?);
    }
    let m = logdens.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::DensityUnderflow);
    }
    let mut resp: Vec<f64> = logdens.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = resp.iter().sum();
    resp.iter_mut().for_each(|v| *v /= s);

    let d = data.cols();
    let mut mu = vec![0.0; d];
    for (i, r) in resp.iter().enumerate() {
        for (m, &x) in mu.iter_mut().zip(data.row(i)) {
            *m += r * x;
        }
    }
    Ok(mu)
}

// ── shared random-instance helpers (also used by the verify suite) ───

/// Random 1-D-observation Gaussian posterior set: `n` scattered points with
/// random posterior means/variances.
pub fn random_gaussian_instance(n: usize, seed: u64) -> SyntheticPosteriorSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = Tensor::rand_uniform(&[n, 1], -2.0, 2.0, &mut rng);
    let naturals = (0..n)
        .map(|_| {
            let mean = rng.random_range(-2.0..2.0);
            let var = rng.random_range(0.2..2.0);
            gaussian_to_naturals(&DiagGaussian::new(vec![mean], vec![var]).unwrap())
        })
        .collect();
    SyntheticPosteriorSet::new(ExpFamily::DiagGaussian, points, naturals).unwrap()
}
