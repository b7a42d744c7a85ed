//! Physical-layer toolkit for Starlink-style Ku-band OFDM downlink frames.
//!
//! The crate covers the full pipeline:
//!
//! * [`grid`] / [`constellation`] — frame structure, index sets, alphabets;
//! * [`pilots`] — band-edge pilot sequence generation from the published
//!   hexadecimal constants;
//! * [`synth`] — frame/waveform synthesis and channel impairment;
//! * [`acq`] — matched-filter acquisition over a delay–Doppler grid;
//! * [`demod`] — channel estimation, equalization, constellation
//!   identification, per-symbol phase/delay estimation, and hard decoding;
//! * [`template`] — reference-template and T-code machinery for the
//!   predictable post-header structure;
//! * [`analysis`] — processing-gain accounting and TOA precision bounds.
//!
//! All randomized routines take explicit seeds and are deterministic; file
//! formats round-trip through their readers.

pub mod acq;
pub mod analysis;
pub mod constellation;
pub mod demod;
pub mod dsp;
pub mod error;
pub mod grid;
pub mod matrix;
pub mod pilots;
pub mod sequences;
pub mod synth;
pub mod template;

pub use error::{Error, Result};
