//! Self-ensemble label filtering for training classifiers on noisy labels.

pub mod datagen;
pub mod ensemble;
mod error;
pub mod harness;
pub mod losses;
pub mod ndnum;
pub mod selfloop;

pub use error::{Error, Result};
