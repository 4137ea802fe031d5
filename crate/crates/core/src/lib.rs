//! Timed-text regularized speech separation at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] and [`autodiff`]: dense matrices and a tape-based reverse-mode
//!   engine used by every trainable component.
//! * [`signal`] and [`wav`]: waveforms, SI-SDR, permutation invariant loss,
//!   mixing and 16-bit PCM I/O.
//! * [`corpus`]: a deterministic synthetic speech corpus with exact word
//!   timings and a subword lexicon.
//! * [`encoders`]: frozen audio and text embedding front-ends.
//! * [`alignment`]: subword-level alignment of audio frames to tokens.
//! * [`summarizer`]: the segment summarizer / sentence aggregator transformer
//!   and the timed-text loss.
//! * [`separator`]: the mask-based separation network, its PIT training and
//!   timed-text regularized finetuning.
//! * [`experiments`]: discrimination study and separation scoreboard.
//! * [`config`] and [`pipeline`]: run configuration and the file-based stages
//!   driven by the command line tool.

pub mod tensor;
pub mod autodiff;
pub mod signal;
pub mod wav;
pub mod corpus;
pub mod encoders;
pub mod alignment;
pub mod params;
pub mod optim;
pub mod summarizer;
pub mod separator;
pub mod gradcheck;
pub mod experiments;
pub mod config;
pub mod pipeline;
