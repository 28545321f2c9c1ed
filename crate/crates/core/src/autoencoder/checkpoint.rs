//! Versioned JSON checkpoints. Floats are written in shortest round-trip
//! form, so save/load reproduces parameters bit for bit.

use std::io::{Read, Write};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{Autoencoder, AutoencoderError, BatchNorm, Dense, Mlp, Result};

pub const CHECKPOINT_FORMAT: &str = "lpot-autoencoder";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
pub(crate) struct NormRecord {
    gamma: Vec<f64>,
    beta: Vec<f64>,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct LayerRecord {
    fan_in: usize,
    fan_out: usize,
    /// Row-major `fan_in × fan_out`.
    weight: Vec<f64>,
    bias: Vec<f64>,
    norm: Option<NormRecord>,
}

#[derive(Serialize, Deserialize)]
pub struct AutoencoderRecord {
    format: String,
    version: u32,
    layer_dims: Vec<usize>,
    encoder: Vec<LayerRecord>,
    decoder: Vec<LayerRecord>,
}

fn mlp_record(mlp: &Mlp) -> Vec<LayerRecord> {
    mlp.layers
        .iter()
        .map(|l| LayerRecord {
            fan_in: l.fan_in(),
            fan_out: l.fan_out(),
            weight: l.weight.iter().copied().collect(),
            bias: l.bias.to_vec(),
            norm: l.norm.as_ref().map(|bn| NormRecord {
                gamma: bn.gamma.to_vec(),
                beta: bn.beta.to_vec(),
                running_mean: bn.running_mean.to_vec(),
                running_var: bn.running_var.to_vec(),
            }),
        })
        .collect()
}

fn mlp_from_record(records: Vec<LayerRecord>) -> Result<Mlp> {
    let bad = |m: String| AutoencoderError::Checkpoint(m);
    if records.is_empty() {
        return Err(bad("network without layers".into()));
    }
    let mut layers = Vec::with_capacity(records.len());
    let mut prev_out = None;
    for (l, r) in records.into_iter().enumerate() {
        if prev_out.is_some_and(|p| p != r.fan_in) {
            return Err(bad(format!("layer {l} input width does not match previous output")));
        }
        prev_out = Some(r.fan_out);
        let weight = Array2::from_shape_vec((r.fan_in, r.fan_out), r.weight)
            .map_err(|e| bad(format!("layer {l} weight: {e}")))?;
        if r.bias.len() != r.fan_out {
            return Err(bad(format!("layer {l} bias length")));
        }
        let norm = match r.norm {
            Some(n) => {
                if [&n.gamma, &n.beta, &n.running_mean, &n.running_var]
                    .iter()
                    .any(|v| v.len() != r.fan_out)
                {
                    return Err(bad(format!("layer {l} batch-norm length")));
                }
                if n.running_var.iter().any(|&v| !(v >= 0.0)) {
                    return Err(bad(format!("layer {l} has a negative running variance")));
                }
                Some(BatchNorm {
                    gamma: Array1::from(n.gamma),
                    beta: Array1::from(n.beta),
                    running_mean: Array1::from(n.running_mean),
                    running_var: Array1::from(n.running_var),
                })
            }
            None => None,
        };
        layers.push(Dense {
            weight,
            bias: Array1::from(r.bias),
            norm,
        });
    }
    Ok(Mlp { layers })
}

impl Autoencoder {
    pub fn to_record(&self) -> AutoencoderRecord {
        AutoencoderRecord {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            layer_dims: self.layer_dims(),
            encoder: mlp_record(&self.encoder),
            decoder: mlp_record(&self.decoder),
        }
    }

    pub fn from_record(record: AutoencoderRecord) -> Result<Self> {
        if record.format != CHECKPOINT_FORMAT {
            return Err(AutoencoderError::Checkpoint(format!(
                "unexpected format tag {:?}",
                record.format
            )));
        }
        if record.version != CHECKPOINT_VERSION {
            return Err(AutoencoderError::Checkpoint(format!(
                "unsupported version {}",
                record.version
            )));
        }
        let model = Self {
            encoder: mlp_from_record(record.encoder)?,
            decoder: mlp_from_record(record.decoder)?,
        };
        if model.layer_dims() != record.layer_dims
            || model.decoder.input_dim() != model.latent_dim()
            || model.decoder.output_dim() != model.input_dim()
        {
            return Err(AutoencoderError::Checkpoint("encoder and decoder shapes disagree".into()));
        }
        Ok(model)
    }

    pub fn save<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer(out, &self.to_record()).map_err(|e| AutoencoderError::Checkpoint(e.to_string()))
    }

    pub fn load<R: Read>(input: R) -> Result<Self> {
        let record: AutoencoderRecord =
            serde_json::from_reader(input).map_err(|e| AutoencoderError::Checkpoint(e.to_string()))?;
        Self::from_record(record)
    }
}
