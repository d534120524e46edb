//! Scenario harness: configuration, experiment data, forward UQ, envelope
//! verification, the empirical range loop and reports.

pub mod adjust;
pub mod config;
pub mod data;
pub mod fuq;
pub mod report;
pub mod run;

pub use adjust::{sample_adjust_iuq, SampleAdjustConfig, SampleAdjustResult};
pub use config::{Method, ScenarioConfig};
pub use fuq::{envelope_check, forward_uq, EnvelopeReport, FuqBands, ParamSource};
pub use report::{build_report, emit_report, load_report, render};
pub use run::{Scenario, ScenarioRun};
