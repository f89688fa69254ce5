//! Constructive upper and lower bounds for the infinity-transportation
//! distance between densities and empirical measures.

pub mod bounds;
pub mod density;
pub mod error;
pub mod experiment;
pub mod field;
pub mod geometry;
pub mod knothe;
pub mod matching;
pub mod multiscale;
pub mod partition;
pub mod pushforward;
pub mod sampling;
pub mod stage;
pub mod transport1d;
pub mod wp;

pub use error::{Error, Result};
