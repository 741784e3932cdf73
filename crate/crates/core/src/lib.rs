//! Simulation of RIS-aided wireless sensing and localization.
//!
//! Modules follow the processing chain: surface element models ([`ris`]),
//! signal synthesis ([`channel`]), measurement metrics ([`metrics`]), and the
//! four pipelines built on top of them: sensing with commodity signals
//! ([`metasensing`]), multi-target radar detection ([`metaradar`]), RSS
//! fingerprint localization ([`metalocalization`]) and particle-filter SLAM
//! ([`metaslam`]). [`harness`] wires them to scenario files and record
//! output.

pub mod channel;
pub mod error;
pub mod harness;
pub mod metalocalization;
pub mod metaradar;
pub mod metasensing;
pub mod metaslam;
pub mod metrics;
pub mod ris;
pub mod rng;

pub use error::{Error, Result};
