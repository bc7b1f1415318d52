use std::path::PathBuf;

use voxc_grad::GradError;

use crate::vocab::VocabError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Wav { path: PathBuf, msg: String },
    #[error("{path}:{line}: {msg}")]
    Manifest {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("invalid audio: {0}")]
    Audio(String),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("input too short: {samples} samples, receptive field needs {needed}")]
    TooShort { samples: usize, needed: usize },
    #[error("{0}")]
    Objective(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("language model: {0}")]
    Lm(String),
    #[error("speaker profiles: {0}")]
    Profile(String),
    #[error("schedule: {0}")]
    Schedule(String),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("step {step}: non-finite loss (batch: {utterances})")]
    NonFiniteLoss { step: usize, utterances: String },
    #[error("utterance {id}: {source}")]
    Utterance {
        id: String,
        #[source]
        source: Box<Error>,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn for_utterance(self, id: &str) -> Self {
        Error::Utterance {
            id: id.to_string(),
            source: Box::new(self),
        }
    }
}
