//! Experiment drivers for hybrid tensor-network models: classification,
//! autoencoding, scalar regression sweeps, a contraction benchmark and
//! parameter tables, all configured from flat key-value files.

pub mod arch;
pub mod config;
pub mod experiments;
pub mod fetch;
pub mod output;

pub use config::{ConfigError, ExperimentConfig, Task};
pub use experiments::{
    run_autoencode, run_bench_contract, run_classify, run_count_params, run_regress, RunError,
};
