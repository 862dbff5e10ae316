//! Desk-scale simulator for bit-flip inference-cost attacks on autoregressive
//! language models.
//!
//! The attack surface is the output-embedding row of the end-of-sequence
//! token: a gradient-guided search picks a handful of weights in that row,
//! chooses one bit per weight to flip so the stored value lands near a
//! gradient-descent target, and applies the flips directly to the stored
//! words. A model corrupted this way keeps ranking every other token exactly
//! as before (no other row changes), but stops emitting EOS, so generation
//! runs to the length cap.
//!
//! Layout:
//! - [`codec`]: bit-exact int8 (two's complement + per-tensor scale) and
//!   IEEE 754 half-precision storage, single-bit flips, nearest-target bit
//!   selection.
//! - [`model`]: a minimal decoder-only transformer (forward only) exposing
//!   per-step hidden states and EOS probabilities.
//! - [`io`]: model file serialization and JSONL prompt corpora.
//! - [`fixture`]: deterministic synthetic models calibrated to terminate
//!   within a target baseline length band.
//! - [`attack`]: the EOS-suppression loss, analytic row gradient, and the
//!   one-shot / progressive flip searches.
//! - [`eval`]: length/termination metrics, cosine interpretation traces,
//!   and the weight-reconstruction (clipping) defense.

pub mod attack;
pub mod codec;
pub mod eval;
pub mod fixture;
pub mod io;
pub mod mat;
pub mod model;

pub use attack::{
    eos_loss, run_attack, run_one_shot, run_progressive, scale_gradient, select_weights,
    Aggregation, AttackConfig, AttackError, AttackReport, FlipRecord, SearchMode,
};
pub use codec::{
    decode, encode, flip_bit, select_bit, BitWord, CodecError, FormatKind, NumericFormat,
    QuantizedTensor,
};
pub use eval::{
    cosine_trace, defense_weight_reconstruction, evaluate, CosineTrace, EvalError, Metrics,
    ModelEval,
};
pub use fixture::{fixture_builder, FixtureError, ProbeReport};
pub use io::{load_model, load_prompts, save_model, IoError, PromptCorpus, PromptEntry};
pub use model::{
    forward, generate, generate_seeded, replay, GenerationTrace, ModelError, Termination,
    TinyLmConfig, TinyLmModel,
};
