use std::path::PathBuf;

/// Errors produced anywhere in the separation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: not a RIFF/WAVE file ({reason})")]
    NotWav { path: PathBuf, reason: String },

    #[error("{path}: unsupported encoding ({detail}); only 16-bit PCM mono is accepted")]
    UnsupportedEncoding { path: PathBuf, detail: String },

    #[error("expected a {expected} Hz signal, got {actual} Hz")]
    WrongSampleRate { expected: u32, actual: u32 },

    #[error("{what}: need at least {needed} samples/frames, got {actual}")]
    TooShort {
        what: String,
        needed: usize,
        actual: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("{0} has zero power")]
    ZeroPower(&'static str),

    #[error("batch normalization needs at least 2 values per channel, got {0}")]
    DegenerateBatch(usize),

    #[error("parameter `{0}` has no gradient; run a backward pass first")]
    MissingGrad(String),

    #[error("Gram matrix is singular even after damping")]
    SingularGram,

    #[error("need at least 2 speakers, corpus has {0}")]
    NotEnoughSpeakers(usize),

    #[error("no usable utterance pair after {attempts} attempts (need {needed_frames} frames)")]
    TooShortUtterance {
        attempts: usize,
        needed_frames: usize,
    },

    #[error("invalid corpus manifest: {0}")]
    InvalidManifest(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("{path}: {err}")]
    File { path: PathBuf, err: std::io::Error },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Attaches `path` to an I/O error.
pub(crate) fn at(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |err| Error::File {
        path: path.to_owned(),
        err,
    }
}
