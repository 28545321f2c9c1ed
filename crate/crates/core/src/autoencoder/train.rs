use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Autoencoder, AutoencoderError, Result, BN_MOMENTUM};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Encoder sizes after the input layer; the default is `[128, 64, 32]`.
    pub hidden_dims: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// λ1, the coefficient of the squared weight norm.
    pub weight_decay: f64,
    /// λ2, the coefficient of the latent KL term.
    pub kl_weight: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden_dims: vec![128, 64, 32],
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-5,
            kl_weight: 1e-3,
            lr_decay: 0.95,
            decay_every: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AutoencoderError::InvalidConfig(m.to_string()));
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return bad("hidden_dims must be non-empty and positive");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(self.learning_rate > 0.0) || !(self.adam_eps > 0.0) || self.decay_every == 0 {
            return bad("learning rate, adam epsilon and decay interval must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 || self.kl_weight < 0.0 || !(self.lr_decay > 0.0) {
            return bad("regularisation weights must be non-negative");
        }
        Ok(())
    }

    pub fn layer_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden_dims);
        dims
    }
}

/// Learning rate used during 1-based epoch `epoch`: decayed once after
/// every `decay_every` completed epochs.
pub fn learning_rate_for_epoch(config: &TrainConfig, epoch: usize) -> f64 {
    let completed = epoch.saturating_sub(1);
    config.learning_rate * config.lr_decay.powi((completed / config.decay_every) as i32)
}

/// Adam state over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Autoencoder,
    /// Mean total loss per epoch, weighted by batch size.
    pub epoch_losses: Vec<f64>,
}

/// Batches of `batch_size` over `order`; a trailing batch of one row is
/// merged into the previous batch because the latent KL term needs two rows.
fn minibatches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut batches: Vec<&[usize]> = order.chunks(batch_size).collect();
    if batches.len() >= 2 && batches.last().is_some_and(|b| b.len() == 1) {
        batches.pop();
        let start = (batches.len() - 1) * batch_size;
        *batches.last_mut().unwrap() = &order[start..];
    }
    batches
}

fn gather_rows(x: ArrayView2<'_, f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), x.ncols()));
    for (r, &i) in rows.iter().enumerate() {
        out.row_mut(r).assign(&x.row(i));
    }
    out
}

/// Trains a freshly initialised autoencoder on the rows of `x`.
pub fn train(x: ArrayView2<'_, f64>, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let model = Autoencoder::init_xavier(&config.layer_dims(x.ncols()), config.seed);
    train_from(model, x, config)
}

/// Continues training `model` with minibatch Adam.
pub fn train_from(mut model: Autoencoder, x: ArrayView2<'_, f64>, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if x.ncols() != model.input_dim() {
        return Err(AutoencoderError::DimensionMismatch {
            expected: model.input_dim(),
            got: x.ncols(),
        });
    }
    let n = x.nrows();
    if n < 2 {
        return Err(AutoencoderError::TooFewRows);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut adam = Adam::new(model.trainable_len(), config.beta1, config.beta2, config.adam_eps);
    let mut params = model.trainable_params();
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let lr = learning_rate_for_epoch(config, epoch);
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        for rows in minibatches(&order, config.batch_size) {
            let batch = gather_rows(x, rows);
            let bp = model.backprop(batch.view(), config.weight_decay, config.kl_weight, None)?;
            if !bp.parts.total.is_finite() {
                return Err(AutoencoderError::NonFiniteLoss(epoch));
            }
            weighted += bp.parts.total * rows.len() as f64;
            adam.step(&mut params, &bp.grads.to_flat(), lr);
            if params.iter().any(|p| !p.is_finite()) {
                return Err(AutoencoderError::NonFiniteLoss(epoch));
            }
            model.set_trainable_params(&params);
            update_running_stats(&mut model, &bp.stats, rows.len());
        }
        epoch_losses.push(weighted / n as f64);
    }
    Ok(TrainOutcome { model, epoch_losses })
}

fn update_running_stats(model: &mut Autoencoder, stats: &super::backprop::BatchStats, m: usize) {
    let unbias = if m > 1 { m as f64 / (m - 1) as f64 } else { 1.0 };
    for (mlp, layer_stats) in [
        (&mut model.encoder, &stats.encoder),
        (&mut model.decoder, &stats.decoder),
    ] {
        for (layer, s) in mlp.layers.iter_mut().zip(layer_stats) {
            if let (Some(bn), Some((mean, var))) = (&mut layer.norm, s) {
                bn.running_mean *= 1.0 - BN_MOMENTUM;
                bn.running_mean.scaled_add(BN_MOMENTUM, mean);
                bn.running_var *= 1.0 - BN_MOMENTUM;
                bn.running_var.scaled_add(BN_MOMENTUM * unbias, var);
            }
        }
    }
}
