//! Framewise polyphonic piano transcription workbench.

pub mod audio;
pub mod data;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod hpstudy;
pub mod io;
pub mod nn;
pub mod optim;
pub mod train;
pub mod zoo;

pub use error::{Error, Result};
