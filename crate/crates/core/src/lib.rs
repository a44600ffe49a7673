//! Attentive recurrent comparators: a recurrent controller alternates
//! glimpses between two images and emits a similarity score.

pub mod attention;
pub mod cli;
pub mod controller;
pub mod data;
pub mod error;
pub mod model;
pub mod oneshot;
pub mod training;
pub mod viz;

pub use error::{ArcError, Result};
pub use model::{ArcConfig, ArcModel};
