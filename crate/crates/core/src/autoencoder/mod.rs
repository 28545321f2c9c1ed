//! Fully connected autoencoder with batch normalisation.
//!
//! Hidden layers compute `affine -> batch norm -> ReLU`; the last layer of
//! both encoder and decoder is affine only, so the latent code is
//! unconstrained and reconstructions are real-valued.
//!
//! The training objective is
//!
//! ```text
//! L = (1/m) Σ_i ‖x_i − x̂_i‖² + λ1 Σ_l ‖W_l‖² + λ2 · ½ Σ_j (v_j + μ_j² − 1 − ln v_j)
//! ```
//!
//! where `μ_j` and `v_j` are the batch mean and (biased, floored) variance
//! of latent dimension `j`, i.e. the KL divergence from the moment-matched
//! Gaussian of the batch to `N(0, I)`. Gradients are computed analytically in
//! [`backprop`].

mod backprop;
mod checkpoint;
mod train;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use backprop::{Gradients, LatentTerm, LayerGrads, LossParts};
pub use checkpoint::{AutoencoderRecord, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use train::{learning_rate_for_epoch, train, train_from, Adam, TrainConfig, TrainOutcome};

/// Variance added inside batch normalisation.
pub const BN_EPS: f64 = 1e-5;
/// Floor added to latent variances in the KL term so that collapsed
/// dimensions give a large but finite penalty.
pub const KL_VAR_FLOOR: f64 = 1e-8;
/// Weight of the newest batch in the running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum AutoencoderError {
    #[error("expected {expected} input columns, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("the latent KL term needs a batch of at least two rows")]
    BatchTooSmallForKL,
    #[error("loss became non-finite in epoch {0}")]
    NonFiniteLoss(usize),
    #[error("training needs at least two rows")]
    TooFewRows,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, AutoencoderError>;

/// Whether batch norm uses batch statistics or the stored running ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNorm {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
        }
    }
}

/// One affine layer, optionally followed by batch norm and ReLU.
///
/// `weight` is stored `fan_in × fan_out` so a batch is mapped as `X W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub norm: Option<BatchNorm>,
}

impl Dense {
    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }
}

/// Stack of dense layers; every layer but the last is normalised and rectified.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// Xavier-uniform weights, zero biases, unit batch-norm scale.
    pub fn xavier(dims: &[usize], rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least two layer sizes");
        assert!(dims.iter().all(|&d| d >= 1), "layer sizes must be positive");
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight =
                    Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..=bound));
                Dense {
                    weight,
                    bias: Array1::zeros(fan_out),
                    norm: (l != last).then(|| BatchNorm::new(fan_out)),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].fan_in()];
        dims.extend(self.layers.iter().map(Dense::fan_out));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty MLP").fan_out()
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>, mode: Mode) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(AutoencoderError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        let mut h = x.to_owned();
        for layer in &self.layers {
            let mut a = h.dot(&layer.weight) + &layer.bias;
            if let Some(bn) = &layer.norm {
                let (mean, var) = match mode {
                    Mode::Train => batch_moments(a.view()),
                    Mode::Eval => (bn.running_mean.clone(), bn.running_var.clone()),
                };
                let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                for mut row in a.rows_mut() {
                    for j in 0..row.len() {
                        let y = bn.gamma[j] * (row[j] - mean[j]) * inv_std[j] + bn.beta[j];
                        row[j] = y.max(0.0);
                    }
                }
            }
            h = a;
        }
        Ok(h)
    }

    fn weight_sq_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weight.iter().map(|w| w * w).sum::<f64>())
            .sum()
    }

    fn trainable_len(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                l.weight.len() + l.bias.len() + l.norm.as_ref().map_or(0, |bn| 2 * bn.gamma.len())
            })
            .sum()
    }
}

/// Column means and biased variances.
pub(crate) fn batch_moments(a: ArrayView2<'_, f64>) -> (Array1<f64>, Array1<f64>) {
    let m = a.nrows() as f64;
    let mean = a.sum_axis(Axis(0)) / m;
    let mut var = Array1::zeros(a.ncols());
    for row in a.rows() {
        for j in 0..row.len() {
            let d = row[j] - mean[j];
            var[j] += d * d;
        }
    }
    (mean, var / m)
}

/// Encoder/decoder pair; the decoder mirrors the encoder's layer sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder {
    pub encoder: Mlp,
    pub decoder: Mlp,
}

impl Autoencoder {
    /// Xavier initialisation for encoder sizes `layer_dims` (input first,
    /// latent last) and the mirrored decoder.
    pub fn init_xavier(layer_dims: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Mlp::xavier(layer_dims, &mut rng);
        let mirrored: Vec<usize> = layer_dims.iter().rev().copied().collect();
        let decoder = Mlp::xavier(&mirrored, &mut rng);
        Self { encoder, decoder }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        self.encoder.dims()
    }

    pub fn encode(&self, x: ArrayView2<'_, f64>, mode: Mode) -> Result<Array2<f64>> {
        self.encoder.forward(x, mode)
    }

    pub fn decode(&self, z: ArrayView2<'_, f64>, mode: Mode) -> Result<Array2<f64>> {
        self.decoder.forward(z, mode)
    }

    pub fn reconstruct(&self, x: ArrayView2<'_, f64>, mode: Mode) -> Result<Array2<f64>> {
        let z = self.encode(x, mode)?;
        self.decode(z.view(), mode)
    }

    /// `Σ ‖W‖²` over encoder and decoder weights; biases and batch-norm
    /// parameters are excluded.
    pub fn weight_sq_norm(&self) -> f64 {
        self.encoder.weight_sq_norm() + self.decoder.weight_sq_norm()
    }

    fn mlps(&self) -> [&Mlp; 2] {
        [&self.encoder, &self.decoder]
    }

    fn mlps_mut(&mut self) -> [&mut Mlp; 2] {
        [&mut self.encoder, &mut self.decoder]
    }

    pub fn trainable_len(&self) -> usize {
        self.encoder.trainable_len() + self.decoder.trainable_len()
    }

    /// Weights, biases, γ and β of every layer, encoder first, flattened in
    /// the same order as [`Gradients::to_flat`].
    pub fn trainable_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.trainable_len());
        for mlp in self.mlps() {
            for layer in &mlp.layers {
                out.extend(layer.weight.iter());
                out.extend(layer.bias.iter());
                if let Some(bn) = &layer.norm {
                    out.extend(bn.gamma.iter());
                    out.extend(bn.beta.iter());
                }
            }
        }
        out
    }

    pub fn set_trainable_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.trainable_len(), "parameter vector length");
        let mut it = flat.iter().copied();
        for mlp in self.mlps_mut() {
            for layer in &mut mlp.layers {
                layer.weight.iter_mut().for_each(|w| *w = it.next().unwrap());
                layer.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
                if let Some(bn) = &mut layer.norm {
                    bn.gamma.iter_mut().for_each(|g| *g = it.next().unwrap());
                    bn.beta.iter_mut().for_each(|b| *b = it.next().unwrap());
                }
            }
        }
    }

    /// Replaces every running batch-norm statistic with the exact (biased)
    /// moments of `x`, so that eval-mode outputs on `x` equal train-mode ones.
    pub fn recalibrate(&mut self, x: ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(AutoencoderError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        let mut h = x.to_owned();
        for mlp in self.mlps_mut() {
            for layer in &mut mlp.layers {
                let mut a = h.dot(&layer.weight) + &layer.bias;
                if let Some(bn) = &mut layer.norm {
                    let (mean, var) = batch_moments(a.view());
                    let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                    for mut row in a.rows_mut() {
                        for j in 0..row.len() {
                            row[j] = (bn.gamma[j] * (row[j] - mean[j]) * inv_std[j] + bn.beta[j]).max(0.0);
                        }
                    }
                    bn.running_mean = mean;
                    bn.running_var = var;
                }
                h = a;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn xavier_bound_and_determinism() {
        let ae = Autoencoder::init_xavier(&[4, 2], 3);
        assert!(ae.encoder.layers[0].weight.iter().all(|w| w.abs() <= 1.0));
        assert!(ae.encoder.layers[0].bias.iter().all(|&b| b == 0.0));
        assert_eq!(ae, Autoencoder::init_xavier(&[4, 2], 3));
        assert_ne!(ae, Autoencoder::init_xavier(&[4, 2], 4));
        assert_eq!(ae.decoder.dims(), vec![2, 4]);
    }

    #[test]
    fn default_architecture_mirrors() {
        let ae = Autoencoder::init_xavier(&[10, 128, 64, 32], 0);
        assert_eq!(ae.decoder.dims(), vec![32, 64, 128, 10]);
        assert!(ae.encoder.layers[2].norm.is_none());
        assert!(ae.encoder.layers[1].norm.is_some());
        let gamma = &ae.encoder.layers[0].norm.as_ref().unwrap().gamma;
        assert!(gamma.iter().all(|&g| g == 1.0));
    }

    #[test]
    fn zero_weights_give_zero_latent() {
        let mut ae = Autoencoder::init_xavier(&[3, 5, 2], 1);
        let zeros = vec![0.0; ae.trainable_len()];
        ae.set_trainable_params(&zeros);
        let x = array![[1.0, -2.0, 3.0], [0.5, 0.0, 1.0]];
        for mode in [Mode::Train, Mode::Eval] {
            let z = ae.encode(x.view(), mode).unwrap();
            assert!(z.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_identity_layer_passes_input_through() {
        let mut ae = Autoencoder::init_xavier(&[3, 3], 1);
        ae.encoder.layers[0].weight = Array2::eye(3);
        let x = array![[1.0, -2.0, 3.0]];
        assert_eq!(ae.encode(x.view(), Mode::Eval).unwrap(), x);
    }

    #[test]
    fn hidden_identity_layer_applies_relu_in_eval() {
        let mut ae = Autoencoder::init_xavier(&[2, 2, 2], 1);
        ae.encoder.layers[0].weight = Array2::eye(2);
        ae.encoder.layers[1].weight = Array2::eye(2);
        let x = array![[1.0, -2.0]];
        let z = ae.encode(x.view(), Mode::Eval).unwrap();
        let scale = 1.0 / (1.0 + BN_EPS).sqrt();
        assert_eq!(z, array![[scale, 0.0]]);
    }

    #[test]
    fn dimension_mismatch() {
        let ae = Autoencoder::init_xavier(&[3, 2], 1);
        let x = Array2::zeros((2, 4));
        assert_eq!(
            ae.encode(x.view(), Mode::Eval).unwrap_err(),
            AutoencoderError::DimensionMismatch { expected: 3, got: 4 }
        );
        assert!(ae.decode(x.view(), Mode::Eval).is_err());
    }

    #[test]
    fn flat_params_round_trip() {
        let ae = Autoencoder::init_xavier(&[5, 4, 3], 9);
        let flat = ae.trainable_params();
        assert_eq!(flat.len(), ae.trainable_len());
        let mut other = Autoencoder::init_xavier(&[5, 4, 3], 10);
        other.set_trainable_params(&flat);
        assert_eq!(other.trainable_params(), flat);
    }

    #[test]
    fn recalibrated_eval_equals_train() {
        let mut ae = Autoencoder::init_xavier(&[4, 6, 5, 2], 2);
        let x = Array2::from_shape_fn((7, 4), |(i, j)| ((i * 3 + j) as f64).sin());
        ae.recalibrate(x.view()).unwrap();
        let train = ae.reconstruct(x.view(), Mode::Train).unwrap();
        let eval = ae.reconstruct(x.view(), Mode::Eval).unwrap();
        for (a, b) in train.iter().zip(eval.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
