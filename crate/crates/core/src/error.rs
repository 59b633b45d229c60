use thiserror::Error;

use crate::completeness::CompletenessError;
use crate::corpus::CorpusError;
use crate::firewall::FirewallError;
use crate::inference::InferenceError;
use crate::llm::LlmError;
use crate::losses::LossError;
use crate::permtest::PermTestError;
use crate::themes::ThemeError;

/// Any error produced by this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    PermTest(#[from] PermTestError),
    #[error(transparent)]
    Theme(#[from] ThemeError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Completeness(#[from] CompletenessError),
    #[error(transparent)]
    Firewall(#[from] FirewallError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
