//! Forward model and inverse pipeline for Mössbauer absorption spectra of a
//! ⁵⁷Fe film phase-modulated by a surface acoustic wave.
//!
//! The forward direction ([`floquet`], [`specgen`]) turns drive parameters
//! into synthetic counting spectra. The inverse direction ([`specfit`],
//! [`calib`], [`extract`], [`globalfit`]) recovers the modulation scaling `m`
//! and the standing-wave reflection `α` from spectra. [`idt`] models the
//! transducers that launch the wave.

pub mod calib;
pub mod config;
pub mod error;
pub mod extract;
pub mod floquet;
pub mod globalfit;
pub mod idt;
pub mod io;
pub mod lm;
pub mod physics;
pub mod pipeline;
pub mod specfit;
pub mod specgen;

pub use error::{Error, Result};
