//! Emitter association by channel identification in a 4x4 MIMO sounding setup.
//!
//! The pipeline: Zadoff-Chu reference sequences ([`zc`]) are transmitted through a
//! synthetic multipath channel ([`sim`]), receivers estimate per-pair channel
//! responses and turn them into normalized feature planes ([`chanest`]), features
//! are assembled into labeled, split datasets ([`dataset`]), and small deterministic
//! convolutional classifiers ([`nn`], [`models`]) associate received energy with the
//! emitting transmitter.

pub mod chanest;
pub mod config;
pub mod dataset;
pub mod models;
pub mod nn;
pub mod seeds;
pub mod sim;
pub mod zc;

/// Baseband sample type used across every DSP interface in this crate.
pub use num_complex::Complex64;
