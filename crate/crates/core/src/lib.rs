//! GalaxyEdit: a desk-scale instruction-editing toolkit.
//!
//! * [`pipeline`], [`instructions`] and [`clients`] build add/remove
//!   training pairs from images through pluggable model services.
//! * [`volterra`], [`adapter`] and [`diffusion`] implement the Volterra
//!   fusion adapter on a small pixel-space diffusion model.
//! * [`metrics`] and [`rating`] evaluate edits automatically and through
//!   a blind human-rating service.

pub mod adapter;
pub mod clients;
pub mod config;
pub mod conv;
pub mod diffusion;
pub mod e2e;
pub mod error;
pub mod gradcheck;
pub mod imaging;
pub mod instructions;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rating;
pub mod scene;
pub mod synth;
pub mod tensor_util;
pub mod volterra;

pub use error::{Error, Result};
