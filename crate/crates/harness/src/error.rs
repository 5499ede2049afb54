//! One top-level error with the CLI's exit-code split: anything wrong with
//! inputs before work starts is a validation error (exit 1), anything that
//! breaks mid-run is a pipeline error (exit 2).

use crate::aligner::AlignError;
use crate::client::ClientError;
use crate::experiment::ConfigError;
use crate::formats::IngestError;
use crate::predictor::PredictError;
use mmgl_core::encoder::EncoderError;
use mmgl_core::gnn::GnnError;
use mmgl_core::graph::GraphError;
use mmgl_core::metrics::MetricsError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Pipeline(String),
}

impl HarnessError {
    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Self {
        let context = context.into();
        move |source| HarnessError::Io { context, source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Ingest(_) | HarnessError::Usage(_) => 1,
            _ => 2,
        }
    }
}
