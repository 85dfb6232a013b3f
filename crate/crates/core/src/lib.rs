//! Online continual learning at desk scale: non-i.i.d. stream scenarios, the
//! CWR/AR1/latent-replay family of gradient strategies, Gamma-GWR growing
//! networks, and a growing dual-memory architecture with internally generated
//! replay — plus the metrics and experiment driver to benchmark them all on
//! synthetic or CSV-loaded feature streams.

pub mod backbone;
pub mod commands;
pub mod config;
pub mod error;
pub mod gdm;
pub mod gwr;
pub mod heads;
pub mod metrics;
pub mod oracle;
pub mod reg;
pub mod runner;
pub mod strategy;
pub mod stream;

pub use error::{Error, Result};
