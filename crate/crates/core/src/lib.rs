//! Counterfactual experiments on pixel normalization in a small, fully
//! instrumented convolutional generator.
//!
//! The pipeline: a [`generator::Generator`] (optionally built analytically by
//! [`forge`]) renders scenes, [`segment`] labels them by palette, [`ace`]
//! estimates per-unit causal effects on class area, and [`did`] separates the
//! normalization's share of an ablation's effect from everything else.

pub mod ace;
pub mod analysis;
pub mod config;
pub mod did;
pub mod error;
pub mod forge;
pub mod generator;
pub mod interventions;
pub mod io;
pub mod latent;
pub mod model;
pub mod pixnorm;
pub mod segment;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
