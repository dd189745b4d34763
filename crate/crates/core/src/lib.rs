//! Joint parsing and sentence segmentation of conversational speech turns,
//! with optional prosodic features.

use std::io;

pub mod corpus;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod prosody;
pub mod treebank;

use numerics::NumericsError;
use prosody::ProsodyError;
use treebank::TreeError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Prosody(#[from] ProsodyError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("mismatch: {0}")]
    Mismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("bad data: {0}")]
    Data(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
