//! Run orchestration: configuration, synthetic data, training, evaluation.
//!
//! The driver ties the numeric, corpus, pairing, and evaluation layers into
//! runnable commands. Everything is deterministic under a single run seed:
//! the synthetic generator, batch assembly, parameter initialization, and
//! every artifact written under the output directory.

pub mod config;
pub mod data;
pub mod model;
pub mod run;
pub mod synth;
pub mod train;

pub use config::{parse_config_text, read_config_file, DescriptorSource, RunConfig};
pub use data::{
    eval_manifest_from_str, eval_manifest_to_string, interactive_manifest_from_str,
    interactive_manifest_to_string, read_eval_manifest, read_interactive_manifest, EvalRecord,
    InteractiveRecord,
};
pub use model::{Checkpoint, Model, IMAGE_PREFIX, TACTILE_PREFIX};
pub use run::{
    model_from_checkpoint, prepare_localization_samples, prototype_table,
    prototype_table_to_string, robustness_summary, run_eval, run_gradcheck, run_interactive,
    run_localize, run_robustness, write_report, LocalizeOutcome, LocalizeQuery,
};
pub use synth::{
    category_signatures, generate_synthetic_corpus, SynthOutputs, SyntheticCorpusSpec,
};
pub use train::{load_side_input, load_training_corpus, train, LoadedCorpus, SideInput, TrainOutcome};
