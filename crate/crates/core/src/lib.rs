//! Jigsaw self-supervision and visual-attentive prompt learning on a frozen
//! vision-language backbone, with the base-to-new, cross-dataset and
//! single-source multi-target evaluation protocols.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod datahub;
pub mod error;
pub mod imageops;
pub mod losses;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod protocols;
pub mod sslhead;
pub mod trainer;
pub mod vatp;

pub use error::{CsawError, Result};
