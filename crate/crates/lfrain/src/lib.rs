//! Light-field rain removal.
//!
//! A desk-scale, fully testable implementation of a rain removal pipeline for
//! light-field images: synthetic rainy-scene generation, a 4D-convolutional
//! multi-scale rain detector with Gaussian-process semi-supervision, a depth
//! estimator driving a fog model, and a recurrent attention-based restorer
//! trained adversarially. All numerics are f64, all randomness flows from one
//! master seed, and every run is bitwise reproducible.

pub mod blocks;
pub mod cli;
pub mod config;
pub mod depth;
pub mod detector;
pub mod error;
pub mod gp;
pub mod lightfield;
pub mod optim;
pub mod params;
pub mod percept;
pub mod restorer;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
