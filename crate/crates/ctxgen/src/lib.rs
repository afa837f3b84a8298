//! Controlled text generation on synthetic corpora: a sentence VAE whose
//! generator is steered by per-attribute convolutional discriminators
//! through temperature-annealed soft decoding, trained by alternating
//! wake (reconstruction) and sleep (dream-sample) phases.
//!
//! The crate is organized bottom-up: [`data`] builds vocabularies, the
//! synthetic grammar and its exact attribute oracle; [`model`] holds the
//! three networks (LSTM generator, LSTM encoder, CNN discriminators);
//! [`objectives`] assembles every loss and annealing schedule; [`trainer`]
//! runs the full alternation with deterministic seeding and binary
//! checkpoints; [`eval`] reproduces the measurement protocols.

pub mod data;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod trainer;

use std::fmt;
use std::path::PathBuf;

#[derive(Debug)]
pub enum Error {
    /// Tape or optimizer failure from the autodiff layer.
    Autodiff(autodiff::Error),
    /// File system failure, with the path that caused it.
    Io { path: PathBuf, source: std::io::Error },
    /// A text input (config, grammar, corpus) failed to parse.
    Parse { what: String, line: usize, msg: String },
    /// Config contains a key this build does not understand.
    UnknownKey { key: String },
    /// Config is missing a required key.
    MissingKey { key: String },
    /// A config value is present but unusable.
    BadValue { key: String, msg: String },
    /// A sentence exceeds the model's maximum length.
    OverLength { len: usize, max_len: usize },
    /// Vocabulary construction failed.
    EmptyCorpus,
    /// The grammar specification violates its own constraints.
    Grammar(String),
    /// Checkpoint file is unreadable: bad magic, version, checksum, or
    /// truncation.
    Checkpoint(String),
    /// A forward pass or loss produced NaN or infinity.
    NonFinite { context: String },
    /// An evaluation request cannot be served.
    Eval(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Autodiff(e) => write!(f, "{e}"),
            Error::Io { path, source } => write!(f, "{}: {source}", path.display()),
            Error::Parse { what, line, msg } => write!(f, "{what}, line {line}: {msg}"),
            Error::UnknownKey { key } => write!(f, "unknown config key '{key}'"),
            Error::MissingKey { key } => write!(f, "missing config key '{key}'"),
            Error::BadValue { key, msg } => write!(f, "bad value for '{key}': {msg}"),
            Error::OverLength { len, max_len } => {
                write!(f, "sentence of length {len} exceeds max length {max_len}")
            }
            Error::EmptyCorpus => write!(f, "cannot build a vocabulary from an empty corpus"),
            Error::Grammar(msg) => write!(f, "invalid grammar: {msg}"),
            Error::Checkpoint(msg) => write!(f, "bad checkpoint: {msg}"),
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::Eval(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Autodiff(e) => Some(e),
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl From<autodiff::Error> for Error {
    fn from(e: autodiff::Error) -> Self {
        Error::Autodiff(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Attach a path to a raw IO error.
pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
