//! File formats, dataset evaluation and the `cyclecorr` command line.
//!
//! The computational pipeline lives in the `cyclecorr` crate; this crate
//! reads and writes feature stacks (`FSTK`), tensors (`FMAP`), training
//! checkpoints (`FCKP`), `pairs.jsonl` annotations, key=value configs and
//! PGM/PPM images, and runs pair evaluation on a worker pool.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod format;
pub mod fsio;
pub mod pnm;
pub mod selftest;

pub use error::{CliError, FormatError, Result};
