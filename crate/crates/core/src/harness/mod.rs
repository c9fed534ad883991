//! Configuration, corpora, run directories and latent export.

pub mod checks;
pub mod config;
pub mod data;
pub mod latents;
pub mod run;

pub use checks::{tiny_config, total_loss_grad_check};
pub use config::{preset, preset_names, RunConfig, ENV_PREFIX};
pub use data::{gen_synthetic, load_corpus, Corpus, Pair, Provenance, Split, SynthConfig, MARKER};
pub use latents::dump_latents;
pub use run::{
    decode_corpus, evaluate_run, gen_data, init_model, load_data, load_params, load_run, run_config, run_dir,
    run_experiment, save_params, ErrorManifest, LoadedRun, RunSummary,
};
