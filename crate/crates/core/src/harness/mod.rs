//! Seeded streams, estimators and the suite runner.

pub mod config;
pub mod report;
pub mod rng;
pub mod stats;
pub mod suite;

pub use config::SuiteConfig;
pub use report::SuiteReport;
pub use suite::run_suite;
