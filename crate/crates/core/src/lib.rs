pub mod adversary;
pub mod config;
pub mod data;
pub mod disentangle;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod model;
pub mod modality;
pub mod nn;
pub mod numcore;
pub mod temporal;

pub use error::{Error, Result};
