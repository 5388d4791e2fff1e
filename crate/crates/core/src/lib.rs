pub mod cleirnet;
pub mod dependency;
pub mod error;
pub mod eval;
pub mod geo;
pub mod nn;
pub mod rng;
pub mod seir;
pub mod tdefsi;

pub use error::{Error, Result};
