//! Adam training loop with cosine learning-rate schedule, evaluation, and
//! gradient accumulation for the sensitivity analysis.
//!
//! Everything is single-threaded and seeded; identical seeds produce
//! bit-identical metric histories.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::CoreError;
use crate::nn::{argmax_rows, softmax_xent, Gradients, LayerGrads, Mode, Model};
use crate::tensor::Tensor;

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty applied to weights and PACT thresholds (never biases).
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            lr_max: 1e-3,
            lr_min: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.epochs == 0 {
            return Err(CoreError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(CoreError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.lr_min <= self.lr_max) {
            return Err(CoreError::InvalidConfig(format!(
                "lr_min {} must not exceed lr_max {}",
                self.lr_min, self.lr_max
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(CoreError::InvalidConfig(format!("{name}={b} outside [0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(CoreError::InvalidConfig("eps must be > 0".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(CoreError::InvalidConfig("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Cosine schedule: `lr(t) = lr_min + 0.5 (lr_max - lr_min)(1 + cos(pi t / T))`.
pub fn cosine_lr(t: usize, total: usize, lr_min: f64, lr_max: f64) -> f64 {
    let frac = t as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Metrics collected per epoch; mirrors the CSV columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

/// Renders the metric history as CSV (epoch, lr, train_loss, train_acc, val_acc).
pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,lr,train_loss,train_acc,val_acc\n");
    for m in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            m.epoch, m.lr, m.train_loss, m.train_acc, m.val_acc
        ));
    }
    out
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl Adam {
    fn new(model: &mut Model, cfg: &TrainConfig) -> Self {
        let sizes: Vec<usize> = model.params_mut().iter().map(|p| p.data.len()).collect();
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        }
    }

    fn step(&mut self, model: &mut Model, grads: &Gradients, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let grad_slices = flat_grads(grads);
        let params = model.params_mut();
        debug_assert_eq!(params.len(), grad_slices.len());
        for ((param, grad), (m, v)) in
            params.into_iter().zip(grad_slices).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..param.data.len() {
                let mut g = grad[i];
                if param.weight_decay {
                    g += self.weight_decay * param.data[i];
                }
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                param.data[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Gradient slices aligned with [`Model::params_mut`] order.
fn flat_grads(grads: &Gradients) -> Vec<&[f64]> {
    let mut out: Vec<&[f64]> = Vec::new();
    for g in &grads.per_layer {
        match g {
            LayerGrads::Dense { weight, bias } | LayerGrads::Conv2d { weight, bias } => {
                out.push(weight.data());
                out.push(bias.data());
            }
            LayerGrads::Pact { alpha } => out.push(std::slice::from_ref(alpha)),
            LayerGrads::None => {}
        }
    }
    out
}

/// Trains in place and returns the per-epoch metric history.
///
/// In quantized mode the FixP scheme scales are refreshed from the shadow
/// weights at the start of every epoch, then held fixed across the epoch's
/// steps. A non-finite loss aborts with a divergence diagnostic.
pub fn train(
    model: &mut Model,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    cfg: &TrainConfig,
    mode: Mode,
) -> Result<Vec<EpochMetrics>, CoreError> {
    cfg.validate()?;
    if train_set.len() == 0 {
        return Err(CoreError::InvalidConfig("training dataset is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model, cfg);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        if mode == Mode::Quantized {
            model.refresh_fixp_scales()?;
        }
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr_min, cfg.lr_max);

        let mut indices: Vec<usize> = (0..train_set.len()).collect();
        indices.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in indices.chunks(cfg.batch_size) {
            let (features, labels) = train_set.gather(chunk)?;
            // Exploding parameters show up as non-finite activations one step
            // before the loss does; both are divergence.
            let (logits, cache) = match model.forward(&features, mode) {
                Ok(out) => out,
                Err(CoreError::NonFiniteTensor(_)) => return Err(CoreError::Diverged { epoch }),
                Err(e) => return Err(e),
            };
            let (loss, dlogits) = softmax_xent(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(CoreError::Diverged { epoch });
            }
            loss_sum += loss * chunk.len() as f64;
            correct += argmax_rows(&logits)
                .iter()
                .zip(&labels)
                .filter(|(pred, label)| pred == label)
                .count();
            let grads = model.backward(&cache, &dlogits)?;
            adam.step(model, &grads, lr);
        }

        let n = train_set.len() as f64;
        let val_acc = match val_set {
            Some(val) => evaluate(model, val, mode)?,
            None => f64::NAN,
        };
        history.push(EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            val_acc,
        });
    }
    Ok(history)
}

/// Classification accuracy of a deterministic single pass.
pub fn evaluate(model: &Model, data: &Dataset, mode: Mode) -> Result<f64, CoreError> {
    if data.len() == 0 {
        return Err(CoreError::InvalidConfig("evaluation dataset is empty".into()));
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in indices.chunks(256) {
        let (features, labels) = data.gather(chunk)?;
        let (logits, _) = model.forward(&features, mode)?;
        correct += argmax_rows(&logits)
            .iter()
            .zip(&labels)
            .filter(|(pred, label)| pred == label)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Full-precision weight gradients of the mean loss, accumulated over the
/// whole calibration set in deterministic batch order.
///
/// Returns one `(layer_id, gradient)` entry per quantizable layer, aligned
/// with [`Model::quantizable_layers`].
pub fn accumulate_weight_gradients(
    model: &Model,
    data: &Dataset,
    batch_size: usize,
    max_batches: Option<usize>,
) -> Result<Vec<(String, Vec<f64>)>, CoreError> {
    if data.len() == 0 {
        return Err(CoreError::InvalidConfig("calibration dataset is empty".into()));
    }
    let mut sums: Vec<(String, Vec<f64>)> = model
        .quantizable_layers()
        .iter()
        .map(|(id, w)| (id.to_string(), vec![0.0; w.len()]))
        .collect();

    let indices: Vec<usize> = (0..data.len()).collect();
    let mut seen = 0usize;
    for (bi, chunk) in indices.chunks(batch_size).enumerate() {
        if let Some(limit) = max_batches {
            if bi >= limit {
                break;
            }
        }
        let (features, labels) = data.gather(chunk)?;
        let (logits, cache) = model.forward(&features, Mode::Fp32)?;
        let (_, dlogits) = softmax_xent(&logits, &labels)?;
        let grads = model.backward(&cache, &dlogits)?;
        seen += chunk.len();

        let mut slot = 0usize;
        for g in &grads.per_layer {
            if let LayerGrads::Dense { weight, .. } | LayerGrads::Conv2d { weight, .. } = g {
                // softmax_xent averages over the batch; undo to sum per sample.
                for (acc, &gval) in sums[slot].1.iter_mut().zip(weight.data()) {
                    *acc += gval * chunk.len() as f64;
                }
                slot += 1;
            }
        }
    }
    for (_, g) in &mut sums {
        for v in g.iter_mut() {
            *v /= seen as f64;
        }
    }
    Ok(sums)
}

/// One full-precision forward on a probe batch; used to seed shapes and to
/// sanity-check a freshly built model.
pub fn probe_forward(model: &Model, data: &Dataset) -> Result<Tensor, CoreError> {
    let idx: Vec<usize> = (0..data.len().min(2)).collect();
    let (features, _) = data.gather(&idx)?;
    Ok(model.forward(&features, Mode::Fp32)?.0)
}
