// SPDX-License-Identifier: MIT OR Apache-2.0

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid lag {lag}: need 1 <= lag < T = {len}")]
    InvalidLag { lag: usize, len: usize },

    #[error("invalid block size {size}: must lie in [2, {max}]")]
    InvalidBlock { size: usize, max: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("solver diverged after {iterations} iterations")]
    Diverged { iterations: usize },

    #[error("segment {segment} too short after trimming: {len} usable points, need {need}")]
    SegmentTooShort {
        segment: usize,
        len: usize,
        need: usize,
    },

    #[error("window too short: length {len}, need at least {need}")]
    Window { len: usize, need: usize },

    #[error("information ratio undefined: sparse component is identically zero")]
    UndefinedRatio,
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Self::Numeric(msg.into())
    }
}
