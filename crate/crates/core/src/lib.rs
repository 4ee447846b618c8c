//! Toolkit for estimating the speech-intelligibility threshold SNR₉₀ of
//! consonant–vowel tokens.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audio;
pub mod augment;
pub mod baseline;
pub mod cli;
pub mod cnn;
pub mod dsp;
pub mod error;
pub mod features;
pub mod jsonl;
pub mod noise;
pub mod pipeline;
pub mod psychometrics;
pub mod synthetic;

pub use audio::{AudioClip, Consonant, SegmentAnnotation, TokenLabel};
pub use error::{Error, Result};
