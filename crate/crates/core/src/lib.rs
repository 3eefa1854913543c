//! Keyword spotting with smoothed max pooling loss.
//!
//! An SVDF encoder emits per-frame posteriors over `K + 1` sound units and a
//! small SVDF decoder turns those into a per-frame keyword score. Both heads
//! train jointly under frame cross entropy, max pooling, or smoothed max
//! pooling objectives; evaluation reports false rejects against false
//! accepts per hour.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
mod binio;
pub mod frontend;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, ErrorKind, Result};
