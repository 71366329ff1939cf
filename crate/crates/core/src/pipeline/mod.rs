//! The dual-path composition procedure, its feature cache, run configs,
//! diagnostics and run-directory outputs.

mod cache;
mod config;
mod diagnostics;
mod noise;
mod output;
mod run;

pub use cache::KvCache;
pub use config::{
    AttentionMapRequest, DiagnosticsSpec, LayerStep, RefSpec, RunConfig, DEFAULT_STEPS, DEFAULT_WEIGHT_SEED,
    MAX_REFS,
};
pub use diagnostics::{
    attention_mass, correspondence_from_capture, correspondence_map, CorrespondenceMap, PhaseTimings,
    RunDiagnostics,
};
pub use noise::{ref_noise_policies, Fixed, FreshPerStep, RefNoisePolicy, DEFAULT_REF_NOISE_POLICY};
pub use output::{inspect_attention, load_capture, read_manifest, write_run, MANIFEST_FILE, RESULT_FILE};
pub use run::{
    harvest_reference_features, run_freecustom, sample_vanilla, with_thread_cap, Pipeline, RunOptions, RunOutput,
    THREADS_ENV,
};
