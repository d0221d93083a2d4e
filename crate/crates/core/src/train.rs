//! Adam optimization with exponential learning-rate decay, shuffled
//! minibatching, and early stopping on a validation bound.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::amortized_bound;
use crate::objective::{training_loss, ModelPair, ObjectiveConfig};
use crate::seed::{rng_for3, STREAM_EPS, STREAM_SHUFFLE, STREAM_VAL, STREAM_Z};
use crate::tensor::Tensor;

/// `lr0 · 0.1^(t/(T−1))`: decays from `lr0` at t = 0 to `0.1·lr0` at t = T−1.
/// `T = 1` returns `lr0`.
pub fn lr_schedule(t: usize, total: usize, lr0: f64) -> Result<f64> {
    if t >= total {
        return Err(Error::ScheduleOutOfRange { t, total });
    }
    if total == 1 {
        return Ok(lr0);
    }
    Ok(lr0 * 0.1f64.powf(t as f64 / (total - 1) as f64))
}

/// Standard Adam with bias correction.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(params: &[&Tensor]) -> Self {
        Self::with_hyper(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(params: &[&Tensor], beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }

    /// One update over all parameters.  A non-finite gradient aborts with a
    /// diagnostic naming the parameter; parameters are untouched in that case.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Tensor],
        names: &[String],
        lr: f64,
    ) -> Result<()> {
        assert_eq!(params.len(), self.m.len(), "optimizer built for a different parameter set");
        assert_eq!(params.len(), grads.len());
        for (i, g) in grads.iter().enumerate() {
            if !g.is_all_finite() {
                let param = names.get(i).cloned().unwrap_or_else(|| format!("param[{i}]"));
                return Err(Error::NonFiniteGrad { param });
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let g = grads[i].data();
            let p = params[i].data_mut();
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Total iterations T.
    pub iters: usize,
    pub batch_size: usize,
    /// Validation-bound cadence.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Importance samples for the validation bound.
    #[serde(default = "default_eval_k")]
    pub eval_k: usize,
    pub seed: u64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
}

fn default_eval_every() -> usize {
    500
}

fn default_eval_k() -> usize {
    64
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_adam_eps() -> f64 {
    1e-8
}

impl TrainConfig {
    pub fn new(lr0: f64, iters: usize, batch_size: usize, seed: u64) -> Self {
        TrainConfig {
            lr0,
            iters,
            batch_size,
            eval_every: default_eval_every(),
            eval_k: default_eval_k(),
            seed,
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig { msg });
        if !(self.lr0 > 0.0) {
            return fail(format!("lr0 must be > 0, got {}", self.lr0));
        }
        if self.iters < 1 {
            return fail("iters must be ≥ 1".into());
        }
        if self.batch_size < 1 {
            return fail("batch_size must be ≥ 1".into());
        }
        if self.eval_every < 1 {
            return fail("eval_every must be ≥ 1".into());
        }
        if self.eval_k < 1 {
            return fail("eval_k must be ≥ 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRecord {
    pub iter: usize,
    pub train_loss: f64,
    pub val_bound: f64,
}

/// Reason the run stopped before iteration T.
#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub iter: usize,
    pub message: String,
}

/// Per-run record: evaluation points, the best checkpoint, and whether the
/// run diverged.  The trained model is left at its final parameters; restore
/// the early-stopping choice with [`ModelPair::set_params`] on
/// `best_params`.
#[derive(Debug, Clone)]
pub struct TrainHistory {
    pub records: Vec<HistoryRecord>,
    pub best_iteration: usize,
    pub best_val_bound: f64,
    pub best_params: Vec<Tensor>,
    pub diverged: Option<Divergence>,
}

/// Epoch-shuffled minibatch index stream.
struct BatchStream {
    n: usize,
    batch: usize,
    seed: u64,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
}

impl BatchStream {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut s = BatchStream { n, batch, seed, order: Vec::new(), cursor: 0, epoch: 0 };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        use rand::Rng;
        let mut rng = rng_for3(self.seed, STREAM_SHUFFLE, self.epoch);
        self.order = (0..self.n).collect();
        for i in (1..self.n).rev() {
            let j = rng.random_range(0..=i);
            self.order.swap(i, j);
        }
        self.cursor = 0;
        self.epoch += 1;
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor >= self.n {
            self.reshuffle();
        }
        let hi = (self.cursor + self.batch).min(self.n);
        let out = self.order[self.cursor..hi].to_vec();
        self.cursor = hi;
        out
    }
}

/// Run `T` iterations of Adam over shuffled minibatches, evaluating the
/// validation bound (clean encoding, `eval_k` importance samples) every
/// `eval_every` iterations and at the final iteration.  Divergence aborts
/// the loop and is reported in the returned history.
pub fn train(
    model: &mut ModelPair,
    data: &Dataset,
    ocfg: &ObjectiveConfig,
    tcfg: &TrainConfig,
) -> Result<TrainHistory> {
    ocfg.validate()?;
    tcfg.validate()?;
    if data.train.rows() == 0 {
        return Err(Error::EmptySplit { split: "train" });
    }
    if data.val.rows() == 0 {
        return Err(Error::EmptySplit { split: "val" });
    }

    let names = model.param_names();
    let mut adam = {
        let params = model.params();
        Adam::with_hyper(&params, tcfg.beta1, tcfg.beta2, tcfg.adam_eps)
    };
    let mut stream = BatchStream::new(data.train.rows(), tcfg.batch_size, tcfg.seed);

    let mut history = TrainHistory {
        records: Vec::new(),
        best_iteration: 0,
        best_val_bound: f64::NEG_INFINITY,
        best_params: model.clone_params(),
        diverged: None,
    };

    for t in 0..tcfg.iters {
        let lr = lr_schedule(t, tcfg.iters, tcfg.lr0)?;
        let idx = stream.next_batch();
        let x = data.train.gather_rows(&idx);

        let mut eps_rng = rng_for3(tcfg.seed, STREAM_EPS, t as u64);
        let mut z_rng = rng_for3(tcfg.seed, STREAM_Z, t as u64);

        let step_result = (|| -> Result<f64> {
            let tape = Tape::new();
            let bound = model.bind(&tape);
            let loss = training_loss(&bound, &x, ocfg, &mut eps_rng, &mut z_rng)?;
            let loss_value = loss.item();
            let gmap = tape.backward(loss)?;
            let grads: Vec<Tensor> = bound.param_vars().iter().map(|v| gmap.grad(*v)).collect();
            let mut params = model.params_mut();
            adam.step(&mut params, &grads, &names, lr)?;
            Ok(loss_value)
        })();

        let loss_value = match step_result {
            Ok(v) => v,
            Err(e) => {
                log::warn!("training diverged at iteration {t}: {e}");
                history.diverged = Some(Divergence { iter: t, message: e.to_string() });
                break;
            }
        };

        if t % tcfg.eval_every == 0 || t == tcfg.iters - 1 {
            let val_seed = crate::seed::child_seed3(tcfg.seed, STREAM_VAL, t as u64);
            let val_bound = match amortized_bound(model, &data.val, tcfg.eval_k, 1, val_seed) {
                Ok(v) => v,
                Err(e) => {
                    // the step succeeded but the updated model already
                    // overflows: same abort-with-history semantics
                    log::warn!("validation bound diverged at iteration {t}: {e}");
                    history.diverged = Some(Divergence { iter: t, message: e.to_string() });
                    break;
                }
            };
            history.records.push(HistoryRecord { iter: t, train_loss: loss_value, val_bound });
            if val_bound > history.best_val_bound {
                history.best_val_bound = val_bound;
                history.best_iteration = t;
                history.best_params = model.clone_params();
            }
        }
    }

    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_dataset;
    use crate::nn::{parse_arch, Decoder, Encoder};
    use crate::objective::ObjectiveKind;

    fn small_model(seed: u64, d: usize, latent: usize) -> ModelPair {
        let enc =
            Encoder::build(d, &parse_arch(&format!("d8-z{latent}")).unwrap(), None, seed).unwrap();
        let dec =
            Decoder::build(latent, &parse_arch(&format!("d8-x{d}")).unwrap(), seed + 1).unwrap();
        ModelPair::new(enc, dec).unwrap()
    }

    #[test]
    fn lr_schedule_endpoints_and_value() {
        assert_eq!(lr_schedule(0, 100, 1e-3).unwrap(), 1e-3);
        let last = lr_schedule(99, 100, 1e-3).unwrap();
        assert!((last - 1e-4).abs() < 1e-18);
        // lr0=1e-3, T=11, t=5 → 1e-3·10^(−1/2)
        let mid = lr_schedule(5, 11, 1e-3).unwrap();
        assert!((mid - 3.1622776601683795e-4).abs() < 1e-12);
        assert_eq!(lr_schedule(0, 1, 0.5).unwrap(), 0.5);
        assert!(matches!(lr_schedule(5, 5, 1.0), Err(Error::ScheduleOutOfRange { .. })));
    }

    #[test]
    fn lr_schedule_strictly_decreasing() {
        let total = 57;
        let mut prev = f64::INFINITY;
        for t in 0..total {
            let lr = lr_schedule(t, total, 0.01).unwrap();
            assert!(lr < prev);
            prev = lr;
        }
        assert!((prev - 0.001).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_magnitude() {
        // scalar g=1, lr=0.1: m̂=1, v̂=1 → Δ = −0.1/(1+1e-8)
        let mut p = Tensor::scalar(2.0);
        let mut adam = Adam::new(&[&p]);
        let names = vec!["p".to_string()];
        adam.step(&mut [&mut p], &[Tensor::scalar(1.0)], &names, 0.1).unwrap();
        let expect = 2.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.item() - expect).abs() < 1e-15, "{} vs {expect}", p.item());
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut p = Tensor::from_vec(vec![1.0, -2.0]);
        let mut adam = Adam::new(&[&p]);
        let names = vec!["p".to_string()];
        adam.step(&mut [&mut p], &[Tensor::from_vec(vec![0.0, 0.0])], &names, 0.3).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_rejects_nan_gradient_naming_parameter() {
        let mut p = Tensor::scalar(0.0);
        let mut adam = Adam::new(&[&p]);
        let names = vec!["encoder.hidden0.weight".to_string()];
        let e = adam.step(&mut [&mut p], &[Tensor::scalar(f64::NAN)], &names, 0.1);
        match e {
            Err(Error::NonFiniteGrad { param }) => assert_eq!(param, "encoder.hidden0.weight"),
            other => panic!("expected NonFiniteGrad, got {other:?}"),
        }
        assert_eq!(p.item(), 0.0);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut p = Tensor::from_vec(vec![0.5, -0.5, 2.0]);
            let mut adam = Adam::new(&[&p]);
            let names = vec!["p".to_string()];
            for i in 0..50 {
                let g = Tensor::from_vec(vec![(i as f64).sin(), 0.3, -1.0 / (i + 1) as f64]);
                adam.step(&mut [&mut p], &[g], &names, 0.01).unwrap();
            }
            p
        };
        let a = run();
        let b = run();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn train_single_iteration_records_once() {
        let data = synthetic_dataset(50, 6, 2, 3);
        let mut model = small_model(1, 6, 2);
        let ocfg = ObjectiveConfig::new(ObjectiveKind::Vae);
        let tcfg = TrainConfig::new(1e-3, 1, 8, 7);
        let h = train(&mut model, &data, &ocfg, &tcfg).unwrap();
        assert_eq!(h.records.len(), 1);
        assert_eq!(h.records[0].iter, 0);
        assert_eq!(h.best_iteration, 0);
        assert!(h.diverged.is_none());
    }

    #[test]
    fn train_requires_nonempty_splits() {
        let mut data = synthetic_dataset(50, 6, 2, 3);
        data.val = Tensor::zeros(&[0, 6]);
        let mut model = small_model(1, 6, 2);
        let ocfg = ObjectiveConfig::new(ObjectiveKind::Vae);
        let tcfg = TrainConfig::new(1e-3, 2, 8, 7);
        assert!(matches!(
            train(&mut model, &data, &ocfg, &tcfg),
            Err(Error::EmptySplit { split: "val" })
        ));
    }

    #[test]
    fn divergence_aborts_with_history_so_far() {
        let data = synthetic_dataset(60, 6, 2, 5);
        let mut model = small_model(9, 6, 2);
        let ocfg = ObjectiveConfig::new(ObjectiveKind::Vae);
        let mut tcfg = TrainConfig::new(1e80, 500, 8, 7); // absurd lr forces overflow
        tcfg.eval_every = 1;
        let h = train(&mut model, &data, &ocfg, &tcfg).unwrap();
        let div = h.diverged.expect("run must diverge at lr = 1e80");
        assert!(div.iter < 500);
        // records collected up to the failing iteration are retained
        assert!(h.records.iter().all(|r| r.iter < div.iter || r.iter == 0));
        assert!(!h.best_params.is_empty());
    }

    #[test]
    fn train_seed_changes_trajectory() {
        let data = synthetic_dataset(60, 6, 2, 5);
        let ocfg = ObjectiveConfig::new(ObjectiveKind::Vae);
        let run = |seed: u64| {
            let mut model = small_model(2, 6, 2);
            let tcfg = TrainConfig::new(1e-3, 20, 8, seed);
            train(&mut model, &data, &ocfg, &tcfg).unwrap();
            model.clone_params()
        };
        let a = run(1);
        let b = run(2);
        assert!(a.iter().zip(&b).any(|(x, y)| x != y), "different seeds gave identical params");
    }

    #[test]
    fn train_is_bitwise_deterministic() {
        let data = synthetic_dataset(60, 6, 2, 5);
        let ocfg = ObjectiveConfig::new(ObjectiveKind::Vae);
        let run = || {
            let mut model = small_model(2, 6, 2);
            let tcfg = TrainConfig::new(1e-3, 25, 8, 11);
            let h = train(&mut model, &data, &ocfg, &tcfg).unwrap();
            (model.clone_params(), h)
        };
        let (pa, ha) = run();
        let (pb, hb) = run();
        for (x, y) in pa.iter().zip(&pb) {
            assert_eq!(x, y);
        }
        assert_eq!(ha.records, hb.records);
    }

    #[test]
    fn best_snapshot_matches_recorded_maximum() {
        let data = synthetic_dataset(80, 6, 2, 9);
        let mut model = small_model(3, 6, 2);
        let ocfg = ObjectiveConfig::new(ObjectiveKind::Vae);
        let mut tcfg = TrainConfig::new(5e-3, 60, 8, 13);
        tcfg.eval_every = 10;
        let h = train(&mut model, &data, &ocfg, &tcfg).unwrap();
        let max = h.records.iter().map(|r| r.val_bound).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(h.best_val_bound, max);
        let best_rec =
            h.records.iter().find(|r| r.val_bound == max).expect("max comes from records");
        assert_eq!(h.best_iteration, best_rec.iter);
    }

    #[test]
    fn training_improves_synthetic_two_cluster_bound() {
        // regression threshold: ≥ 5 nats improvement on an easy 2-cluster set
        let data = synthetic_dataset(300, 16, 2, 17);
        let mut model = small_model(4, 16, 2);
        let ocfg = ObjectiveConfig::new(ObjectiveKind::Vae);
        let mut tcfg = TrainConfig::new(3e-3, 2000, 32, 19);
        tcfg.eval_every = 200;
        let h = train(&mut model, &data, &ocfg, &tcfg).unwrap();
        assert!(h.diverged.is_none());
        let first = h.records.first().unwrap().train_loss;
        let last = h.records.last().unwrap().train_loss;
        // loss is a negated bound: improvement = first − last
        assert!(
            first - last >= 5.0,
            "expected ≥ 5 nats improvement, got {first} → {last}"
        );
    }
}
