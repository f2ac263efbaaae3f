//! Experiment orchestration: config parsing, sweep execution, verification,
//! and report aggregation for the width-sweep lab.

pub mod config;
pub mod oracle;
pub mod report;
pub mod sweep;
pub mod verify;
