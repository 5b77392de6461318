//! Experiment configuration, batch runner, CSV/summary output and the
//! finite-difference suite.

mod config;
mod experiment;
mod gradcheck;

pub use config::{parse_strategy, CorpusSource, ExperimentConfig, PRESETS, SEED_ENV};
pub use experiment::{
    emit_summary, format_csv, normalize_efficiency, parse_csv, prepare_seed, run_experiment, write_outputs, CsvRow,
    Experiment, OutputFiles, RunOutput, SeedSetup, CSV_COLUMNS, CSV_SCHEMA, SUMMARY_COLUMNS,
};
pub use gradcheck::{gradcheck_suite, GradCheckCase, GRADCHECK_TOLERANCE};
