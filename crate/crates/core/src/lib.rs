//! Multi-task sentence encoders: BiLSTM-Max encoders trained under fully-shared,
//! shared-private and adversarial shared-private frameworks, a biattentive pooling
//! classifier, and probes for what the learned sentence vectors capture.

pub mod biatt;
pub mod encoder;
pub mod error;
pub mod mtl;
pub mod ndgrad;
pub mod probes;
pub mod textdata;
pub mod trainer;

pub use error::{Error, Result};
