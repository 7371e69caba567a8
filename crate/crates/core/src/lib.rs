//! Bootstrapped diffusion from partial data views.

pub mod bootstrap;
pub mod bounds;
pub mod diffusion;
pub mod error;
pub mod evalkit;
pub mod io;
pub mod linops;
pub mod neural;
pub mod rng;
pub mod synthdata;

pub use error::{Error, Result};
