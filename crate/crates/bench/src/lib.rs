//! Shared fixtures for the criterion benches under `benches/`.

use kws_core::config::RunConfig;
use kws_core::data::{stack_context, synth_corpus, Utterance};
use kws_core::model::ModelParams;

/// Default model with seeded weights and `count` stacked synthetic utterances.
pub fn fixture(count: usize) -> (RunConfig, ModelParams, Vec<Utterance>) {
    let cfg = RunConfig::default();
    let raw = synth_corpus(&cfg.synth, count).expect("default synth config is valid");
    let data = stack_context(&raw, cfg.frontend.left_context, cfg.frontend.right_context);
    let params = ModelParams::init_uniform(&cfg.model, 0.3, 1).expect("default model config is valid");
    (cfg, params, data)
}
