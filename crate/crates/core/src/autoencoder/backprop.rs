//! Train-mode forward pass with caches, the three-part loss, and analytic
//! gradients.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::{batch_moments, Autoencoder, AutoencoderError, Mlp, Result, BN_EPS, KL_VAR_FLOOR};

/// Loss components; `total` is their exact sum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub reconstruction: f64,
    pub weight_decay: f64,
    pub kl: f64,
}

impl LossParts {
    fn new(reconstruction: f64, weight_decay: f64, kl: f64) -> Self {
        Self {
            total: reconstruction + weight_decay + kl,
            reconstruction,
            weight_decay,
            kl,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub gamma: Option<Array1<f64>>,
    pub beta: Option<Array1<f64>>,
}

/// Gradients with the same layout as [`Autoencoder`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub encoder: Vec<LayerGrads>,
    pub decoder: Vec<LayerGrads>,
}

impl Gradients {
    /// Flattened in the order of [`Autoencoder::trainable_params`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in self.encoder.iter().chain(&self.decoder) {
            out.extend(layer.weight.iter());
            out.extend(layer.bias.iter());
            if let (Some(g), Some(b)) = (&layer.gamma, &layer.beta) {
                out.extend(g.iter());
                out.extend(b.iter());
            }
        }
        out
    }
}

struct LayerCache {
    input: Array2<f64>,
    // batch-norm layers only
    x_hat: Option<Array2<f64>>,
    inv_std: Option<Array1<f64>>,
    // post-normalisation, pre-ReLU activations
    pre_relu: Option<Array2<f64>>,
}

/// Batch statistics observed in a train-mode pass, per normalised layer.
pub(crate) struct BatchStats {
    pub encoder: Vec<Option<(Array1<f64>, Array1<f64>)>>,
    pub decoder: Vec<Option<(Array1<f64>, Array1<f64>)>>,
}

fn forward_cached(
    mlp: &Mlp,
    x: ArrayView2<'_, f64>,
) -> (Array2<f64>, Vec<LayerCache>, Vec<Option<(Array1<f64>, Array1<f64>)>>) {
    let mut caches = Vec::with_capacity(mlp.layers.len());
    let mut stats = Vec::with_capacity(mlp.layers.len());
    let mut h = x.to_owned();
    for layer in &mlp.layers {
        let a = h.dot(&layer.weight) + &layer.bias;
        match &layer.norm {
            Some(bn) => {
                let (mean, var) = batch_moments(a.view());
                let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                let x_hat = (&a - &mean) * &inv_std;
                let y = &x_hat * &bn.gamma + &bn.beta;
                let out = y.mapv(|v| v.max(0.0));
                caches.push(LayerCache {
                    input: h,
                    x_hat: Some(x_hat),
                    inv_std: Some(inv_std),
                    pre_relu: Some(y),
                });
                stats.push(Some((mean, var)));
                h = out;
            }
            None => {
                caches.push(LayerCache {
                    input: h,
                    x_hat: None,
                    inv_std: None,
                    pre_relu: None,
                });
                stats.push(None);
                h = a;
            }
        }
    }
    (h, caches, stats)
}

/// Back-propagates `d_out` (gradient w.r.t. the MLP output) and returns
/// parameter gradients plus the gradient w.r.t. the MLP input.
fn backward(mlp: &Mlp, caches: &[LayerCache], d_out: Array2<f64>) -> (Vec<LayerGrads>, Array2<f64>) {
    let mut grads = Vec::with_capacity(mlp.layers.len());
    let mut upstream = d_out;
    for (layer, cache) in mlp.layers.iter().zip(caches).rev() {
        let (d_affine, gamma, beta) = match (&layer.norm, &cache.x_hat, &cache.inv_std, &cache.pre_relu) {
            (Some(bn), Some(x_hat), Some(inv_std), Some(pre_relu)) => {
                let m = x_hat.nrows() as f64;
                let mut dy = upstream;
                dy.zip_mut_with(pre_relu, |g, &y| {
                    if y <= 0.0 {
                        *g = 0.0;
                    }
                });
                let d_gamma = (&dy * x_hat).sum_axis(Axis(0));
                let d_beta = dy.sum_axis(Axis(0));
                let dx_hat = &dy * &bn.gamma;
                let sum_dx_hat = dx_hat.sum_axis(Axis(0));
                let sum_dx_hat_xhat = (&dx_hat * x_hat).sum_axis(Axis(0));
                let da = (&dx_hat * m - &sum_dx_hat - &(x_hat * &sum_dx_hat_xhat)) * &(inv_std / m);
                (da, Some(d_gamma), Some(d_beta))
            }
            _ => (upstream, None, None),
        };
        let d_weight = cache.input.t().dot(&d_affine);
        let d_bias = d_affine.sum_axis(Axis(0));
        upstream = d_affine.dot(&layer.weight.t());
        grads.push(LayerGrads {
            weight: d_weight,
            bias: d_bias,
            gamma,
            beta,
        });
    }
    grads.reverse();
    (grads, upstream)
}

/// KL divergence of `N(μ, diag v)` from `N(0, I)` with batch moments of `z`,
/// and its gradient with respect to `z`.
fn latent_kl(z: ArrayView2<'_, f64>) -> (f64, Array2<f64>) {
    let m = z.nrows() as f64;
    let (mean, var) = batch_moments(z);
    let v = var.mapv(|s| s + KL_VAR_FLOOR);
    let kl = 0.5
        * mean
            .iter()
            .zip(v.iter())
            .map(|(&mu, &vj)| vj + mu * mu - 1.0 - vj.ln())
            .sum::<f64>();
    let mut grad = z.to_owned();
    for mut row in grad.rows_mut() {
        for j in 0..row.len() {
            row[j] = ((1.0 - 1.0 / v[j]) * (row[j] - mean[j]) + mean[j]) / m;
        }
    }
    (kl, grad)
}

pub(crate) struct Backprop {
    pub parts: LossParts,
    pub latent_term: f64,
    pub grads: Gradients,
    pub stats: BatchStats,
}

/// Extra objective term on the latent batch: returns its value and its
/// gradient with respect to the latent matrix.
pub type LatentTerm<'a> = &'a dyn Fn(ArrayView2<'_, f64>) -> (f64, Array2<f64>);

impl Autoencoder {
    fn check_batch(&self, batch: ArrayView2<'_, f64>) -> Result<()> {
        if batch.ncols() != self.input_dim() {
            return Err(AutoencoderError::DimensionMismatch {
                expected: self.input_dim(),
                got: batch.ncols(),
            });
        }
        if batch.nrows() < 2 {
            return Err(AutoencoderError::BatchTooSmallForKL);
        }
        Ok(())
    }

    /// Train-mode loss on `batch`.
    pub fn loss(&self, batch: ArrayView2<'_, f64>, weight_decay: f64, kl_weight: f64) -> Result<LossParts> {
        Ok(self.objective(batch, weight_decay, kl_weight, None)?.0)
    }

    /// Train-mode loss plus an optional latent term, without gradients.
    pub fn objective(
        &self,
        batch: ArrayView2<'_, f64>,
        weight_decay: f64,
        kl_weight: f64,
        latent_term: Option<LatentTerm<'_>>,
    ) -> Result<(LossParts, f64)> {
        self.check_batch(batch)?;
        let z = self.encode(batch, super::Mode::Train)?;
        let recon = self.decode(z.view(), super::Mode::Train)?;
        let m = batch.nrows() as f64;
        let rec = (&recon - &batch).iter().map(|e| e * e).sum::<f64>() / m;
        let (kl, _) = latent_kl(z.view());
        let extra = latent_term.map_or(0.0, |f| f(z.view()).0);
        Ok((
            LossParts::new(rec, weight_decay * self.weight_sq_norm(), kl_weight * kl),
            extra,
        ))
    }

    /// Gradient of the train-mode loss with respect to every weight, bias,
    /// γ and β.
    pub fn grad(&self, batch: ArrayView2<'_, f64>, weight_decay: f64, kl_weight: f64) -> Result<Gradients> {
        Ok(self.backprop(batch, weight_decay, kl_weight, None)?.grads)
    }

    /// Loss and gradients together.
    pub fn loss_and_grad(
        &self,
        batch: ArrayView2<'_, f64>,
        weight_decay: f64,
        kl_weight: f64,
        latent_term: Option<LatentTerm<'_>>,
    ) -> Result<(LossParts, f64, Gradients)> {
        let bp = self.backprop(batch, weight_decay, kl_weight, latent_term)?;
        Ok((bp.parts, bp.latent_term, bp.grads))
    }

    pub(crate) fn backprop(
        &self,
        batch: ArrayView2<'_, f64>,
        weight_decay: f64,
        kl_weight: f64,
        latent_term: Option<LatentTerm<'_>>,
    ) -> Result<Backprop> {
        self.check_batch(batch)?;
        let m = batch.nrows() as f64;
        let (z, enc_caches, enc_stats) = forward_cached(&self.encoder, batch);
        let (recon, dec_caches, dec_stats) = forward_cached(&self.decoder, z.view());

        let residual = &recon - &batch;
        let rec = residual.iter().map(|e| e * e).sum::<f64>() / m;
        let d_recon = residual * (2.0 / m);
        let (mut dec_grads, mut d_z) = backward(&self.decoder, &dec_caches, d_recon);

        let (kl, d_kl) = latent_kl(z.view());
        d_z.scaled_add(kl_weight, &d_kl);
        let mut extra = 0.0;
        if let Some(term) = latent_term {
            let (value, d_term) = term(z.view());
            extra = value;
            d_z += &d_term;
        }
        let (mut enc_grads, _) = backward(&self.encoder, &enc_caches, d_z);

        for (grads, mlp) in [(&mut enc_grads, &self.encoder), (&mut dec_grads, &self.decoder)] {
            for (g, layer) in grads.iter_mut().zip(&mlp.layers) {
                g.weight.scaled_add(2.0 * weight_decay, &layer.weight);
            }
        }

        Ok(Backprop {
            parts: LossParts::new(rec, weight_decay * self.weight_sq_norm(), kl_weight * kl),
            latent_term: extra,
            grads: Gradients {
                encoder: enc_grads,
                decoder: dec_grads,
            },
            stats: BatchStats {
                encoder: enc_stats,
                decoder: dec_stats,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::Mode;
    use ndarray::array;

    #[test]
    fn standard_moments_give_zero_kl() {
        // Each column has mean 0 and biased variance 1.
        let z = array![[1.0, -1.0], [-1.0, 1.0]];
        let (kl, _) = latent_kl(z.view());
        assert!(kl.abs() < 1e-15);
    }

    #[test]
    fn parts_sum_to_total() {
        let ae = Autoencoder::init_xavier(&[4, 3, 2], 5);
        let x = Array2::from_shape_fn((6, 4), |(i, j)| (i as f64 - j as f64 * 0.7).cos());
        let p = ae.loss(x.view(), 1e-3, 1e-2).unwrap();
        assert_eq!(p.total, p.reconstruction + p.weight_decay + p.kl);
        assert!(p.reconstruction >= 0.0 && p.weight_decay >= 0.0 && p.kl >= 0.0);
    }

    #[test]
    fn perfect_reconstruction_with_zero_weights_leaves_only_kl() {
        let mut ae = Autoencoder::init_xavier(&[2, 2], 1);
        ae.set_trainable_params(&vec![0.0; ae.trainable_len()]);
        let x = Array2::zeros((3, 2));
        let p = ae.loss(x.view(), 0.5, 1e-3).unwrap();
        assert_eq!(p.reconstruction, 0.0);
        assert_eq!(p.weight_decay, 0.0);
        assert_eq!(p.total, p.kl);
        assert!(p.kl > 0.0);
    }

    #[test]
    fn single_row_batch_rejected() {
        let ae = Autoencoder::init_xavier(&[2, 2], 1);
        let x = Array2::zeros((1, 2));
        assert_eq!(ae.loss(x.view(), 0.0, 0.0).unwrap_err(), AutoencoderError::BatchTooSmallForKL);
    }

    #[test]
    fn weight_decay_gradient_is_data_term_plus_two_lambda_w() {
        let ae = Autoencoder::init_xavier(&[3, 2], 8);
        let x = array![[1.0, 0.5, -0.3], [0.2, -1.0, 0.7], [0.0, 0.4, 0.9]];
        let base = ae.grad(x.view(), 0.0, 0.0).unwrap();
        let lambda = 0.37;
        let with = ae.grad(x.view(), lambda, 0.0).unwrap();
        for (g0, (g1, layer)) in base
            .encoder
            .iter()
            .chain(&base.decoder)
            .zip(with.encoder.iter().chain(&with.decoder).zip(
                ae.encoder.layers.iter().chain(&ae.decoder.layers),
            ))
        {
            let expected = &g0.weight + &(&layer.weight * (2.0 * lambda));
            assert_eq!(g1.weight, expected);
            assert_eq!(g1.bias, g0.bias);
        }
    }

    #[test]
    fn zero_input_gives_zero_first_layer_reconstruction_gradient() {
        let ae = Autoencoder::init_xavier(&[4, 3, 2], 2);
        let x = Array2::zeros((5, 4));
        let g = ae.grad(x.view(), 0.0, 0.0).unwrap();
        assert!(g.encoder[0].weight.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn objective_matches_loss() {
        let ae = Autoencoder::init_xavier(&[3, 4, 2], 4);
        let x = Array2::from_shape_fn((5, 3), |(i, j)| ((i + 2 * j) as f64).sin());
        let a = ae.loss(x.view(), 1e-2, 1e-2).unwrap();
        let (b, _, _) = ae.loss_and_grad(x.view(), 1e-2, 1e-2, None).unwrap();
        assert_eq!(a, b);
        let z = ae.encode(x.view(), Mode::Train).unwrap();
        assert_eq!(z.nrows(), 5);
    }
}
