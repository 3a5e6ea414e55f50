//! Paragraph handwriting recognition: MDLSTM encoders, an iterative
//! attention-weighted collapse that segments lines implicitly, a BLSTM
//! decoder and CTC training, all in double precision on the CPU.

pub mod cli;
pub mod collapse;
pub mod config;
pub mod ctc;
pub mod data;
pub mod error;
pub mod eval;
pub mod layers;
pub mod model;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
