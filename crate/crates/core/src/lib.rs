//! Observe-and-price mechanism for an online three-sided advertising market.

pub mod analysis;
pub mod canonical;
pub mod cli;
pub mod econ;
pub mod engine;
pub mod io;
pub mod market;
pub mod money;
pub mod rational;
