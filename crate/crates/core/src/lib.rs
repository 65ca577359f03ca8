//! Heterogeneous knowledge distillation with region-aware attention on the
//! student side and adaptive feedback prompts on the teacher side.
//!
//! The crate is organised bottom-up: [`params`] and [`nn`] provide
//! parameter storage and layers, [`backbones`] the four-stage model zoo,
//! [`raa`], [`afp`] and [`losses`] the method, [`distiller`] the training
//! step, and [`experiment`] / [`report`] the end-to-end runs.

pub mod afp;
pub mod align;
pub mod backbones;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distiller;
pub mod error;
pub mod experiment;
pub mod feature;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod raa;
pub mod report;

pub use error::{Error, Result};
