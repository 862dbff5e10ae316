//! Benchmark-only crate; see `benches/main.rs`.
//!
//! Shared setup for the benches: a small calibrated fixture and its search
//! prompts.

use eosflip::codec::FormatKind;
use eosflip::fixture::fixture_builder;
use eosflip::io::{PromptCorpus, PromptEntry};
use eosflip::model::{TinyLmConfig, TinyLmModel};

pub fn bench_config() -> TinyLmConfig {
    TinyLmConfig {
        vocab_size: 64,
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        d_ff: 64,
        eos_id: 2,
        max_len: 48,
        rng_seed: 5,
    }
}

pub fn bench_fixture(kind: FormatKind) -> (TinyLmModel, Vec<PromptEntry>) {
    let (model, _) = fixture_builder(&bench_config(), 21, (4, 16), kind).expect("fixture");
    let prompts = PromptCorpus::synthetic(77, 4, (4, 10), 64, &[2]);
    (model, prompts.entries)
}
