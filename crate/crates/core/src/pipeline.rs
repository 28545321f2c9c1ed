//! Joint fitting: autoencoder pretraining followed by alternating rounds of
//! graph propagation, stage-to-stage transport and representation updates.
//!
//! Within one outer round the graph operator `S`, the scores `F` and the
//! transport plans are frozen. The representation update descends
//! `L_AE + β1·L_prop + β2·Σ⟨T, C(Z)⟩` with step halving, so every accepted
//! step is non-increasing in that objective. `L_prop` does not depend on the
//! network once `F` and `S` are frozen and enters only as a constant.

use std::io::{Read, Write};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autoencoder::{self, Autoencoder, AutoencoderError, AutoencoderRecord, Mode, TrainConfig};
use crate::dataset::SemiLabels;
use crate::graph::{AffinityGraph, GraphError};
use crate::propagation::{
    init_label_matrix, propagate_closed_form_with_limit, propagate_iterative, PropagationError,
    PropagationResult, DEFAULT_DENSE_LIMIT,
};
use crate::sparse::CsrMatrix;
use crate::transport::{stage_progression, StageProgression, TransportConfig, TransportError};

pub use crate::propagation::propagation_residual;

pub const MODEL_FORMAT: &str = "lpot-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Autoencoder(#[from] AutoencoderError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Propagation(#[from] PropagationError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("objective became non-finite in outer iteration {0}")]
    NonFiniteLoss(usize),
    #[error("{rows} feature rows but {labels} labels")]
    DimensionMismatch { rows: usize, labels: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("model has no training latents")]
    EmptyModel,
    #[error("model file: {0}")]
    Io(#[from] std::io::Error),
    #[error("model file: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Which propagation route to use each outer round.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Solver {
    /// Direct solve up to `dense_limit` nodes, iteration beyond.
    Auto,
    ClosedForm,
    Iterative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub alpha: f64,
    pub k_neighbors: usize,
    pub t_outer: usize,
    /// Label-change threshold; `None` means `⌈0.001·n⌉`.
    pub eps_y: Option<usize>,
    pub inner_steps: usize,
    /// Initial (and maximum) step length of the representation update;
    /// defaults to the pretraining learning rate.
    pub step_size: f64,
    pub max_halvings: usize,
    pub solver: Solver,
    pub dense_limit: usize,
    pub prop_eps: f64,
    pub prop_t_max: usize,
    pub transport: TransportConfig,
    /// Seeds autoencoder initialisation and shuffling; overrides the seed in
    /// the training configuration passed to [`fit`].
    pub seed: u64,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            beta1: 1.0,
            beta2: 0.01,
            beta3: 0.1,
            alpha: 0.2,
            k_neighbors: 15,
            t_outer: 10,
            eps_y: None,
            inner_steps: 5,
            step_size: 1e-3,
            max_halvings: 30,
            solver: Solver::Auto,
            dense_limit: DEFAULT_DENSE_LIMIT,
            prop_eps: 1e-9,
            prop_t_max: 1000,
            transport: TransportConfig::default(),
            seed: 0,
        }
    }
}

impl JointConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PipelineError::InvalidConfig(m.to_string()));
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2), ("beta3", self.beta3)] {
            if !(b >= 0.0) || !b.is_finite() {
                return bad(&format!("{name} must be non-negative and finite"));
            }
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1)");
        }
        if self.k_neighbors == 0 {
            return bad("k_neighbors must be at least 1");
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return bad("step_size must be positive");
        }
        Ok(())
    }

    pub fn resolved_eps_y(&self, n: usize) -> usize {
        self.eps_y.unwrap_or_else(|| ((0.001 * n as f64).ceil() as usize).max(1))
    }
}

/// Loss components of one outer round, evaluated on the full data.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l_ae: f64,
    pub l_prop: f64,
    pub l_ot: f64,
    pub l_smooth: f64,
}

/// `L_AE + β1·L_prop + β2·L_OT + β3·L_smooth`.
pub fn total_loss(parts: &LossTerms, config: &JointConfig) -> f64 {
    parts.l_ae + config.beta1 * parts.l_prop + config.beta2 * parts.l_ot + config.beta3 * parts.l_smooth
}

/// `Σ_{i,j} w_ij ‖f_i − f_j‖²` over ordered pairs, so each edge counts twice.
pub fn smoothness_loss(weights: &CsrMatrix, f: ArrayView2<'_, f64>) -> f64 {
    let mut total = 0.0;
    for i in 0..weights.n() {
        for (j, w) in weights.row(i) {
            let d: f64 = f.row(i).iter().zip(f.row(j).iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            total += w * d;
        }
    }
    total
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuterRecord {
    pub l_ae: f64,
    pub l_prop: f64,
    pub l_ot: f64,
    pub l_smooth: f64,
    pub total: f64,
    /// Labels that differ from the previous round; `None` in the first.
    pub labels_changed: Option<usize>,
    /// Frozen-structure objective before the update and after each
    /// accepted step. Empty when the round ended the fit.
    pub inner_objectives: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    /// `t_outer = 0`: one propagation on the pretrained latents.
    NoOuterLoop,
    LabelsStable,
    MaxOuter,
}

#[derive(Clone, Debug)]
pub struct FittedModel {
    pub autoencoder: Autoencoder,
    /// Eval-mode latents of the training rows.
    pub latent: Array2<f64>,
    pub propagation: PropagationResult,
    pub progression: Option<StageProgression>,
    pub trace: Vec<OuterRecord>,
    pub stop_reason: StopReason,
    pub propagation_passes: usize,
    pub pretrain_losses: Vec<f64>,
}

fn propagate(s: &CsrMatrix, y: ArrayView2<'_, f64>, config: &JointConfig) -> Result<PropagationResult> {
    let direct = match config.solver {
        Solver::ClosedForm => true,
        Solver::Iterative => false,
        Solver::Auto => s.n() <= config.dense_limit,
    };
    let result = if direct {
        propagate_closed_form_with_limit(s, y, config.alpha, config.dense_limit)?
    } else {
        propagate_iterative(s, y, config.alpha, config.prop_eps, config.prop_t_max)?
    };
    Ok(result)
}

/// Stage transports over the current labels; a single predicted stage
/// leaves nothing to transport.
fn transports(z: ArrayView2<'_, f64>, labels: &[usize], config: &JointConfig) -> Result<Option<StageProgression>> {
    match stage_progression(z, labels, &config.transport) {
        Ok(p) => Ok(Some(p)),
        Err(TransportError::SingleStage) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Step-halving descent on the frozen-structure objective. Returns the
/// objective before the first step and after each accepted step.
fn representation_update(
    model: &mut Autoencoder,
    x: ArrayView2<'_, f64>,
    progression: Option<&StageProgression>,
    constant: f64,
    ae: &TrainConfig,
    config: &JointConfig,
    outer: usize,
) -> Result<Vec<f64>> {
    let beta2 = config.beta2;
    let ot_term = |z: ArrayView2<'_, f64>| match progression {
        Some(p) if beta2 > 0.0 => {
            let (v, g) = p.fixed_plan_cost_and_grad(z);
            (beta2 * v, g * beta2)
        }
        _ => (0.0, Array2::zeros(z.dim())),
    };
    let (parts, extra, mut grads) = model.loss_and_grad(x, ae.weight_decay, ae.kl_weight, Some(&ot_term))?;
    let mut current = parts.total + extra + constant;
    if !current.is_finite() {
        return Err(PipelineError::NonFiniteLoss(outer));
    }
    let mut objectives = vec![current];
    let mut params = model.trainable_params();
    let mut step = config.step_size;
    let mut trial_model = model.clone();
    for _ in 0..config.inner_steps {
        let g = grads.to_flat();
        let mut accepted = None;
        for _ in 0..=config.max_halvings {
            let trial: Vec<f64> = params.iter().zip(&g).map(|(p, d)| p - step * d).collect();
            trial_model.set_trainable_params(&trial);
            let (p, e) = trial_model.objective(x, ae.weight_decay, ae.kl_weight, Some(&ot_term))?;
            let value = p.total + e + constant;
            if value.is_finite() && value <= current {
                accepted = Some((trial, value));
                break;
            }
            step *= 0.5;
        }
        let Some((trial, value)) = accepted else { break };
        params = trial;
        current = value;
        objectives.push(current);
        model.set_trainable_params(&params);
        grads = model.loss_and_grad(x, ae.weight_decay, ae.kl_weight, Some(&ot_term))?.2;
        step = (step * 2.0).min(config.step_size);
    }
    model.set_trainable_params(&params);
    Ok(objectives)
}

/// Pretrains the autoencoder on `x`, then alternates propagation, stage
/// transport and representation updates until the predicted labels settle
/// or `t_outer` rounds have run.
pub fn fit(x: ArrayView2<'_, f64>, semi: &SemiLabels, ae_config: &TrainConfig, config: &JointConfig) -> Result<FittedModel> {
    config.validate()?;
    if x.nrows() != semi.len() {
        return Err(PipelineError::DimensionMismatch {
            rows: x.nrows(),
            labels: semi.len(),
        });
    }
    let (_, y) = init_label_matrix(semi)?;
    let n = x.nrows();
    let eps_y = config.resolved_eps_y(n);

    let ae = TrainConfig {
        seed: config.seed,
        ..ae_config.clone()
    };
    let outcome = autoencoder::train(x, &ae)?;
    let mut model = outcome.model;
    model.recalibrate(x)?;
    let mut z = model.encode(x, Mode::Eval)?;

    if config.t_outer == 0 {
        let graph = AffinityGraph::build(z.view(), config.k_neighbors)?;
        let propagation = propagate(&graph.normalized, y.view(), config)?;
        return Ok(FittedModel {
            autoencoder: model,
            latent: z,
            propagation,
            progression: None,
            trace: Vec::new(),
            stop_reason: StopReason::NoOuterLoop,
            propagation_passes: 1,
            pretrain_losses: outcome.epoch_losses,
        });
    }

    let mut trace = Vec::with_capacity(config.t_outer);
    let mut previous: Option<Vec<usize>> = None;
    let mut stop_reason = StopReason::MaxOuter;
    let mut passes = 0;
    let mut last = None;
    for outer in 1..=config.t_outer {
        let graph = AffinityGraph::build(z.view(), config.k_neighbors)?;
        let result = propagate(&graph.normalized, y.view(), config)?;
        passes += 1;
        let changed = previous
            .as_ref()
            .map(|p| p.iter().zip(&result.labels).filter(|(a, b)| a != b).count());
        let progression = transports(z.view(), &result.labels, config)?;

        let l_ae = model.loss(x, ae.weight_decay, ae.kl_weight)?.total;
        let l_prop = propagation_residual(&graph.normalized, result.scores.view(), y.view(), config.alpha);
        let l_ot = progression.as_ref().map_or(0.0, |p| p.total_cost());
        let l_smooth = smoothness_loss(&graph.weights, result.scores.view());
        let terms = LossTerms {
            l_ae,
            l_prop,
            l_ot,
            l_smooth,
        };
        let total = total_loss(&terms, config);
        if !total.is_finite() {
            return Err(PipelineError::NonFiniteLoss(outer));
        }
        let mut record = OuterRecord {
            l_ae,
            l_prop,
            l_ot,
            l_smooth,
            total,
            labels_changed: changed,
            inner_objectives: Vec::new(),
        };

        let stable = changed.is_some_and(|c| c < eps_y);
        if stable || outer == config.t_outer {
            if stable {
                stop_reason = StopReason::LabelsStable;
            }
            trace.push(record);
            last = Some((result, progression));
            break;
        }

        record.inner_objectives = representation_update(
            &mut model,
            x,
            progression.as_ref(),
            config.beta1 * l_prop,
            &ae,
            config,
            outer,
        )?;
        model.recalibrate(x)?;
        z = model.encode(x, Mode::Eval)?;
        trace.push(record);
        previous = Some(result.labels);
    }
    let (propagation, progression) = last.expect("at least one outer round runs");
    Ok(FittedModel {
        autoencoder: model,
        latent: z,
        propagation,
        progression,
        trace,
        stop_reason,
        propagation_passes: passes,
        pretrain_losses: outcome.epoch_losses,
    })
}

/// Labels for new rows from the nearest training latent (lowest index on
/// ties), with that neighbour's confidence.
pub fn predict(model: &FittedModel, x_new: ArrayView2<'_, f64>) -> Result<(Vec<usize>, Vec<f64>)> {
    if model.latent.nrows() == 0 {
        return Err(PipelineError::EmptyModel);
    }
    if x_new.nrows() == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let z = model.autoencoder.encode(x_new, Mode::Eval)?;
    let mut labels = Vec::with_capacity(z.nrows());
    let mut confidence = Vec::with_capacity(z.nrows());
    for row in z.rows() {
        let mut best = (f64::INFINITY, 0);
        for (i, train) in model.latent.rows().into_iter().enumerate() {
            let d: f64 = row.iter().zip(train.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, i);
            }
        }
        labels.push(model.propagation.labels[best.1]);
        confidence.push(model.propagation.confidence[best.1]);
    }
    Ok((labels, confidence))
}

#[derive(Serialize, Deserialize)]
struct ModelRecord {
    format: String,
    version: u32,
    autoencoder: AutoencoderRecord,
    latent: Array2<f64>,
    propagation: PropagationResult,
    progression: Option<StageProgression>,
    trace: Vec<OuterRecord>,
    stop_reason: StopReason,
    propagation_passes: usize,
    pretrain_losses: Vec<f64>,
}

impl FittedModel {
    pub fn save<W: Write>(&self, out: W) -> Result<()> {
        let record = ModelRecord {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            autoencoder: self.autoencoder.to_record(),
            latent: self.latent.clone(),
            propagation: self.propagation.clone(),
            progression: self.progression.clone(),
            trace: self.trace.clone(),
            stop_reason: self.stop_reason,
            propagation_passes: self.propagation_passes,
            pretrain_losses: self.pretrain_losses.clone(),
        };
        serde_json::to_writer(out, &record)?;
        Ok(())
    }

    pub fn load<R: Read>(input: R) -> Result<Self> {
        let record: ModelRecord = serde_json::from_reader(input)?;
        if record.format != MODEL_FORMAT || record.version != MODEL_VERSION {
            return Err(PipelineError::InvalidConfig(format!(
                "unsupported model format {} v{}",
                record.format, record.version
            )));
        }
        if record.latent.nrows() != record.propagation.labels.len() {
            return Err(PipelineError::DimensionMismatch {
                rows: record.latent.nrows(),
                labels: record.propagation.labels.len(),
            });
        }
        Ok(Self {
            autoencoder: Autoencoder::from_record(record.autoencoder)?,
            latent: record.latent,
            propagation: record.propagation,
            progression: record.progression,
            trace: record.trace,
            stop_reason: record.stop_reason,
            propagation_passes: record.propagation_passes,
            pretrain_losses: record.pretrain_losses,
        })
    }

    pub fn labels(&self) -> &[usize] {
        &self.propagation.labels
    }
}
