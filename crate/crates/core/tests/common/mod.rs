#![allow(dead_code)]

use umcl::config::{RunConfig, RunData};
use umcl::data::SynthConfig;
use umcl::training::TrainConfig;

/// A run small enough to train in well under a second.
pub fn tiny_run(steps: u64, seed: u64) -> (RunConfig, RunData) {
    let train = TrainConfig {
        steps,
        lr: 3e-3,
        batch_size: 16,
        num_classes: 4,
        image_dim: 12,
        embed_dim: 16,
        hidden_dim: 24,
        token_dim: 16,
        vocab_size: 512,
        context_len: 4,
        log_every: 10,
        seed,
        ..TrainConfig::default()
    };
    let synth = SynthConfig {
        samples_per_class: 40,
        text_samples_per_class: 40,
        eval_samples_per_class: 20,
        ..SynthConfig::default()
    };
    let run = RunConfig::synthetic(train, synth, seed);
    let data = run.load_data().expect("synthetic data");
    (run, data)
}
