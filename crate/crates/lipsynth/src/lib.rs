//! Speech-to-lip video generation at desk scale.
//!
//! Given 0.64 s of speech (as a 64x128 log-mel spectrogram) and a single
//! 64x64 lip image, the generator synthesizes a 16-frame lip clip. Training
//! combines a derivative-correlation loss (audio derivative vs. optical
//! flow), a pixel loss, a perceptual loss from a self-trained autoencoder,
//! and a three-stream conditional GAN. Everything runs on CPU in f64 on top
//! of the `lipsynth-grad` tape.
//!
//! The crate ships a fully synthetic "talking ellipse" corpus with analytic
//! landmarks and known audio-visual delays, so losses, metrics and the
//! delay analysis can be validated end to end without external data.

pub mod adversary;
pub mod config;
pub mod corr;
pub mod data;
pub mod flow;
pub mod generator;
pub mod io;
pub mod metrics;
pub mod objectives;
pub mod perceptual;
pub mod signal;
pub mod synth;
pub mod train;
pub mod vision;

use lipsynth_grad::Exec;

#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Format(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("config: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Diverged(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn format(msg: impl Into<String>) -> Error {
        Error::Format(msg.into())
    }
    pub fn invalid(msg: impl Into<String>) -> Error {
        Error::InvalidInput(msg.into())
    }
}

/// Execution backend selection. `LIPSYNTH_THREADS=1` (or building without
/// the `parallel` feature) forces the sequential kernels; both produce
/// bit-identical results.
pub fn exec_from_env() -> Exec {
    match std::env::var("LIPSYNTH_THREADS") {
        Ok(v) if v.trim() == "1" || v.trim() == "0" => Exec::Seq,
        _ => {
            #[cfg(feature = "parallel")]
            {
                Exec::Par
            }
            #[cfg(not(feature = "parallel"))]
            {
                Exec::Seq
            }
        }
    }
}
