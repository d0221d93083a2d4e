//! Two-bound comparison on a finite-mixture inference model.
//!
//! The inference path draws a discrete auxiliary variable `z'` and then a
//! Gaussian component `q(z|z')`.  Two valid lower bounds on `ln p(x)` arise:
//! `L_a` uses the marginalized proposal `q(z|x) = Σ_c ψ_c q(z|c)` in the
//! denominator, `L_b` uses the conditional `q(z|z')`.  Marginalization is
//! the tighter choice: `L_a − L_b = E_{z'}[KL(q(z|z') ‖ q(z|x))] ≥ 0`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.8378770664093453;

fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln()) - (x - mean) * (x - mean) / (2.0 * var)
}

/// Scalar toy model: `p(z) = N(0,1)`, `p(x|z) = N(z, lik_var)` at a fixed
/// observation `x0`; proposal mixture over components `(psi_c, m_c, v_c)`.
#[derive(Debug, Clone)]
pub struct MixtureToyModel {
    pub psi: Vec<f64>,
    pub comp_mean: Vec<f64>,
    pub comp_var: Vec<f64>,
    pub lik_var: f64,
    pub x0: f64,
}

impl MixtureToyModel {
    pub fn new(
        psi: Vec<f64>,
        comp_mean: Vec<f64>,
        comp_var: Vec<f64>,
        lik_var: f64,
        x0: f64,
    ) -> Result<Self> {
        if psi.len() != comp_mean.len() || psi.len() != comp_var.len() || psi.is_empty() {
            return Err(Error::InvalidConfig { msg: "mixture component lists must align".into() });
        }
        let total: f64 = psi.iter().sum();
        if (total - 1.0).abs() > 1e-12 || psi.iter().any(|&p| p < 0.0) {
            return Err(Error::InvalidConfig { msg: "psi must be a probability vector".into() });
        }
        if comp_var.iter().any(|&v| v <= 0.0) || lik_var <= 0.0 {
            return Err(Error::InvalidConfig { msg: "variances must be positive".into() });
        }
        Ok(MixtureToyModel { psi, comp_mean, comp_var, lik_var, x0 })
    }

    pub fn log_joint(&self, z: f64) -> f64 {
        normal_logpdf(z, 0.0, 1.0) + normal_logpdf(self.x0, z, self.lik_var)
    }

    /// Log-density of the marginalized proposal (finite Gaussian mixture).
    pub fn mix_log_prob(&self, z: f64) -> f64 {
        let terms: Vec<f64> = self
            .psi
            .iter()
            .zip(self.comp_mean.iter().zip(&self.comp_var))
            .filter(|(&p, _)| p > 0.0)
            .map(|(&p, (&m, &v))| p.ln() + normal_logpdf(z, m, v))
            .collect();
        let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        mx + terms.iter().map(|t| (t - mx).exp()).sum::<f64>().ln()
    }

    fn sample_component<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (c, &p) in self.psi.iter().enumerate() {
            acc += p;
            if u < acc {
                return c;
            }
        }
        self.psi.len() - 1
    }
}

/// Paired Monte Carlo estimates of the two bounds and their gap.
#[derive(Debug, Clone)]
pub struct AppendixBEstimate {
    pub l_a: f64,
    pub l_a_se: f64,
    pub l_b: f64,
    pub l_b_se: f64,
    /// `L_a − L_b` from the same draws (so the SE is of the difference).
    pub gap: f64,
    pub gap_se: f64,
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, (var / n).sqrt())
}

/// Monte Carlo estimates of `L_a` (marginalized proposal) and `L_b`
/// (conditional proposal) from common two-stage draws.
pub fn appendix_b_bound_gap(
    toy: &MixtureToyModel,
    samples: usize,
    seed: u64,
) -> Result<AppendixBEstimate> {
    if samples < 1000 {
        return Err(Error::InvalidConfig {
            msg: format!("samples must be ≥ 1000, got {samples}"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a_terms = Vec::with_capacity(samples);
    let mut b_terms = Vec::with_capacity(samples);
    let mut gap_terms = Vec::with_capacity(samples);
    for _ in 0..samples {
        let c = toy.sample_component(&mut rng);
        let eps: f64 = rand_distr::StandardNormal.sample(&mut rng);
        let z = toy.comp_mean[c] + toy.comp_var[c].sqrt() * eps;
        let joint = toy.log_joint(z);
        let comp_lp = normal_logpdf(z, toy.comp_mean[c], toy.comp_var[c]);
        let mix_lp = toy.mix_log_prob(z);
        a_terms.push(joint - mix_lp);
        b_terms.push(joint - comp_lp);
        gap_terms.push(comp_lp - mix_lp);
    }
    let (l_a, l_a_se) = mean_se(&a_terms);
    let (l_b, l_b_se) = mean_se(&b_terms);
    let (gap, gap_se) = mean_se(&gap_terms);
    Ok(AppendixBEstimate { l_a, l_a_se, l_b, l_b_se, gap, gap_se })
}

use rand_distr::Distribution;

/// Independent (component-stratified) estimate of
/// `E_{z'}[KL(q(z|z') ‖ q(z|x))]`, the analytic value of the bound gap.
pub fn mixture_kl_expectation(
    toy: &MixtureToyModel,
    samples_per_component: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if samples_per_component < 100 {
        return Err(Error::InvalidConfig {
            msg: format!("samples_per_component must be ≥ 100, got {samples_per_component}"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut var_total = 0.0;
    for c in 0..toy.psi.len() {
        if toy.psi[c] == 0.0 {
            continue;
        }
        let mut terms = Vec::with_capacity(samples_per_component);
        for _ in 0..samples_per_component {
            let eps: f64 = rand_distr::StandardNormal.sample(&mut rng);
            let z = toy.comp_mean[c] + toy.comp_var[c].sqrt() * eps;
            terms.push(
                normal_logpdf(z, toy.comp_mean[c], toy.comp_var[c]) - toy.mix_log_prob(z),
            );
        }
        let (kl_c, se_c) = mean_se(&terms);
        total += toy.psi[c] * kl_c;
        var_total += (toy.psi[c] * se_c).powi(2);
    }
    Ok((total, var_total.sqrt()))
}
