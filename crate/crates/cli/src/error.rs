use std::path::PathBuf;

use lpot::autoencoder::AutoencoderError;
use lpot::dataset::DatasetError;
use lpot::graph::GraphError;
use lpot::metrics::MetricsError;
use lpot::pipeline::PipelineError;
use lpot::preprocessing::PreprocessError;
use lpot::propagation::PropagationError;
use lpot::transport::TransportError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("preprocessing: {0}")]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            HarnessError::Pipeline(e) => match e {
                PipelineError::NonFiniteLoss(_) => true,
                PipelineError::Autoencoder(AutoencoderError::NonFiniteLoss(_)) => true,
                PipelineError::Graph(g) => {
                    matches!(g, GraphError::IsolatedNode(_) | GraphError::NonPositiveSigma(_))
                }
                PipelineError::Propagation(p) => {
                    matches!(p, PropagationError::ZeroRow(_) | PropagationError::SolveFailure)
                }
                PipelineError::Transport(t) => !matches!(t, TransportError::InvalidLambda(_)),
                _ => false,
            },
            _ => false,
        }
    }

    /// Process exit code: 2 for numerical failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.is_numerical() {
            2
        } else {
            1
        }
    }
}
