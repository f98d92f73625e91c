//! Harness around `delta_attn`: synthetic workloads, the `DTNS` tensor and
//! `DKVC` cache formats, experiment runs against the dense oracle, sweeps,
//! heatmaps and the built-in self test.

pub mod cache_file;
pub mod config;
pub mod error;
pub mod experiment;
pub mod heatmap;
pub mod selftest;
pub mod sweep;
pub mod synth;
pub mod tensor_file;

pub use config::{parse_config_text, ConfigOverrides, ExperimentConfig, KeyProcess, Scenario};
pub use error::{HarnessError, Result};
pub use experiment::{run_experiment, Experiment};
pub use synth::{gen_synthetic, HeadTensors};
