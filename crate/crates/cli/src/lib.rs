//! Command-line driver for bootstrapped diffusion experiments.
pub mod acceptance;
pub mod commands;
pub mod config;
pub mod plot;
pub mod quadrature;
