//! Sweeps, calibration and the command-line front end.

pub mod calibrate;
pub mod cli;
pub mod config;
pub mod equiv;
pub mod io_table;

pub use calibrate::{calibrate, CalibrationPlan, CalibrationReport, Sample, SampleKind};
pub use config::{BenchConfig, OutputFormat, CONFIG_ENV};
pub use equiv::{
    run_equivalence, CaseResult, CaseShape, EquivReport, Fault, SweepSpec, F32_TOLERANCE,
};
pub use io_table::{io_rows, rows_to_csv, rows_to_json, IoRow, IoSweep, SCHEMA_VERSION};
