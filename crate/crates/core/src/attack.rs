//! The flip search: EOS-suppression loss, analytic row gradient, weight
//! ranking, and the one-shot / progressive orchestration.
//!
//! One search epoch decodes every search prompt once (greedy by default),
//! sums the per-step EOS probabilities into the loss, and accumulates the
//! closed-form gradient of that loss with respect to the EOS output row:
//! with the generated tokens held fixed and no weight tying, each step
//! contributes `p * (1 - p) * h`. The gradient norm is rescaled into
//! `[grad_low, grad_up]` to survive the vanishing-gradient regime once EOS
//! probabilities collapse, the largest-magnitude coordinates pick the target
//! weights, and for each chosen weight the single bit flip landing nearest
//! the gradient-descent target `w - g` is applied to the stored word.
//!
//! One-shot mode does all of this in a single epoch, flipping at most one bit
//! per weight. Progressive mode repeats `n` rounds of epoch + top-1 flip on
//! the mutated model, and may revisit the same weight.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{decode, flip_bit, select_bit, BitWord, CodecError};
use crate::io::PromptEntry;
use crate::mat::norm_l2_f64;
use crate::model::{generate_seeded, GenerationTrace, ModelError, TinyLmModel};

#[derive(Debug, Error, PartialEq)]
pub enum AttackError {
    #[error("gradient is exactly zero (probabilities saturated)")]
    ZeroGradient,
    #[error("invalid attack configuration: {0}")]
    InvalidConfig(String),
    #[error("no search prompts supplied")]
    NoSearchPrompts,
    #[error("flip record {index} does not match the model words (dim {dim}, expected {expected}, found {found})")]
    InconsistentFlip {
        index: usize,
        dim: usize,
        expected: BitWord,
        found: BitWord,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Which decode steps contribute to the loss and gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Full,
    LatterHalf,
    Last,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    OneShot,
    Progressive,
}

fn default_grad_low() -> f64 {
    1e-3
}

fn default_grad_up() -> f64 {
    1.0
}

fn default_scaling() -> bool {
    true
}

/// Search configuration. `search_max_len = None` means the model's own cap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub mode: SearchMode,
    pub n_flips: usize,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default = "default_grad_low")]
    pub grad_low: f64,
    #[serde(default = "default_grad_up")]
    pub grad_up: f64,
    #[serde(default = "default_scaling")]
    pub scaling: bool,
    #[serde(default)]
    pub search_max_len: Option<usize>,
    #[serde(default)]
    pub search_temperature: f64,
    #[serde(default)]
    pub rng_seed: u64,
}

impl AttackConfig {
    pub fn one_shot(n_flips: usize) -> Self {
        AttackConfig {
            mode: SearchMode::OneShot,
            n_flips,
            aggregation: Aggregation::Full,
            grad_low: default_grad_low(),
            grad_up: default_grad_up(),
            scaling: true,
            search_max_len: None,
            search_temperature: 0.0,
            rng_seed: 0,
        }
    }

    pub fn progressive(n_flips: usize) -> Self {
        AttackConfig {
            mode: SearchMode::Progressive,
            ..Self::one_shot(n_flips)
        }
    }

    pub fn validate(&self, model: &TinyLmModel) -> Result<(), AttackError> {
        if self.n_flips < 1 {
            return Err(AttackError::InvalidConfig("n_flips must be >= 1".into()));
        }
        if self.n_flips > model.config.d_model && self.mode == SearchMode::OneShot {
            return Err(AttackError::InvalidConfig(format!(
                "one-shot n_flips {} exceeds the row width {}",
                self.n_flips, model.config.d_model
            )));
        }
        if !(self.grad_low > 0.0 && self.grad_up > self.grad_low && self.grad_up.is_finite()) {
            return Err(AttackError::InvalidConfig(format!(
                "need 0 < grad_low < grad_up, got [{}, {}]",
                self.grad_low, self.grad_up
            )));
        }
        if let Some(m) = self.search_max_len {
            if m < 1 || m > model.config.max_len {
                return Err(AttackError::InvalidConfig(format!(
                    "search_max_len {m} outside [1, {}]",
                    model.config.max_len
                )));
            }
        }
        if !(self.search_temperature >= 0.0 && self.search_temperature.is_finite()) {
            return Err(AttackError::InvalidConfig(
                "search_temperature must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// One applied bit flip, with everything needed to audit or replay it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlipRecord {
    pub round: usize,
    pub dim: usize,
    pub bit: u8,
    pub word_before: BitWord,
    pub word_after: BitWord,
    pub fp_before: f32,
    pub fp_after: f32,
    pub target_fp: f64,
}

/// A dimension passed over during a round (every candidate flip was
/// non-finite).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedDim {
    pub round: usize,
    pub dim: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub config: AttackConfig,
    pub search_prompt_ids: Vec<String>,
    /// Summed EOS loss over the search prompts before any flip.
    pub initial_loss: f64,
    /// Loss measured after each completed round (one entry for one-shot).
    pub round_losses: Vec<f64>,
    pub flips: Vec<FlipRecord>,
    pub skipped_dims: Vec<SkippedDim>,
    pub total_bit_flips: usize,
    /// Populated when a progressive run stopped early, with the reason.
    pub aborted: Option<String>,
}

impl AttackReport {
    pub fn final_loss(&self) -> f64 {
        *self.round_losses.last().unwrap_or(&self.initial_loss)
    }
}

/// 0-based index window of the steps that contribute under `aggregation`.
///
/// `LatterHalf` is steps `ceil(N/2)+1 ..= N` in 1-based terms; for `N = 1`
/// that window is empty and the loss is zero.
pub fn aggregation_window(n: usize, aggregation: Aggregation) -> std::ops::Range<usize> {
    match aggregation {
        Aggregation::Full => 0..n,
        Aggregation::LatterHalf => n.div_ceil(2)..n,
        Aggregation::Last => n.saturating_sub(1)..n,
    }
}

/// EOS-suppression loss of one trace: the sum of per-step EOS probabilities
/// over the aggregation window.
pub fn eos_loss(trace: &GenerationTrace, aggregation: Aggregation) -> f64 {
    let window = aggregation_window(trace.steps(), aggregation);
    trace.eos_probs[window].iter().sum()
}

/// Closed-form gradient of the summed EOS loss with respect to the EOS output
/// row, with the token sequences held fixed: per step, `p * (1 - p) * h`.
pub fn accumulate_eos_row_gradient(
    traces: &[GenerationTrace],
    aggregation: Aggregation,
    d_model: usize,
) -> Vec<f64> {
    let mut g = vec![0.0f64; d_model];
    for trace in traces {
        for i in aggregation_window(trace.steps(), aggregation) {
            let p = trace.eos_probs[i];
            let w = p * (1.0 - p);
            for (gj, &hj) in g.iter_mut().zip(&trace.hidden_states[i]) {
                *gj += w * hj as f64;
            }
        }
    }
    g
}

fn epoch(
    model: &TinyLmModel,
    prompts: &[PromptEntry],
    cfg: &AttackConfig,
) -> Result<Vec<GenerationTrace>, AttackError> {
    let cap = cfg.search_max_len.unwrap_or(model.config.max_len);
    // Per-prompt decoding is independent; results are collected back in
    // prompt order so sums stay bit-reproducible.
    prompts
        .par_iter()
        .map(|p| {
            generate_seeded(model, &p.tokens, cap, cfg.search_temperature, cfg.rng_seed)
                .map_err(AttackError::from)
        })
        .collect()
}

fn epoch_loss(traces: &[GenerationTrace], aggregation: Aggregation) -> f64 {
    traces.iter().map(|t| eos_loss(t, aggregation)).sum()
}

/// One gradient epoch over the search prompts: decode each prompt under the
/// search settings, then accumulate the closed-form row gradient.
pub fn eos_row_gradient(
    model: &TinyLmModel,
    prompts: &[PromptEntry],
    cfg: &AttackConfig,
) -> Result<Vec<f64>, AttackError> {
    if prompts.is_empty() {
        return Err(AttackError::NoSearchPrompts);
    }
    let traces = epoch(model, prompts, cfg)?;
    let g = accumulate_eos_row_gradient(&traces, cfg.aggregation, model.config.d_model);
    if norm_l2_f64(&g) == 0.0 {
        return Err(AttackError::ZeroGradient);
    }
    Ok(g)
}

/// Rescale the gradient so its l2 norm lies in `[low, up]`; direction is
/// always preserved.
pub fn scale_gradient(g: &[f64], low: f64, up: f64) -> Result<Vec<f64>, AttackError> {
    let norm = norm_l2_f64(g);
    if norm == 0.0 {
        return Err(AttackError::ZeroGradient);
    }
    let factor = if norm > up {
        up / norm
    } else if norm < low {
        low / norm
    } else {
        1.0
    };
    Ok(g.iter().map(|x| x * factor).collect())
}

/// Indices of the `n` largest-magnitude coordinates, in descending magnitude
/// order, ties toward the lower index.
pub fn select_weights(g: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..g.len()).collect();
    idx.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()).then_with(|| a.cmp(&b)));
    idx.truncate(n);
    idx
}

/// One descent step on the decoded row: the per-weight targets `w - g`.
pub fn target_row(current_row: &[f32], g: &[f64]) -> Vec<f64> {
    current_row
        .iter()
        .zip(g)
        .map(|(&w, &gj)| w as f64 - gj)
        .collect()
}

fn scaled_gradient(g: Vec<f64>, cfg: &AttackConfig) -> Result<Vec<f64>, AttackError> {
    if cfg.scaling {
        scale_gradient(&g, cfg.grad_low, cfg.grad_up)
    } else {
        Ok(g)
    }
}

/// Dispatch on `cfg.mode`.
pub fn run_attack(
    model: &mut TinyLmModel,
    prompts: &[PromptEntry],
    cfg: &AttackConfig,
) -> Result<AttackReport, AttackError> {
    match cfg.mode {
        SearchMode::OneShot => run_one_shot(model, prompts, cfg),
        SearchMode::Progressive => run_progressive(model, prompts, cfg),
    }
}

fn new_report(prompts: &[PromptEntry], cfg: &AttackConfig) -> AttackReport {
    AttackReport {
        config: cfg.clone(),
        search_prompt_ids: prompts.iter().map(|p| p.id.clone()).collect(),
        initial_loss: 0.0,
        round_losses: Vec::new(),
        flips: Vec::new(),
        skipped_dims: Vec::new(),
        total_bit_flips: 0,
        aborted: None,
    }
}

/// Apply the best single-bit flip for `dim` toward `target`, recording it.
/// Returns false if every candidate decodes non-finite (dim skipped).
fn flip_dim(
    model: &mut TinyLmModel,
    report: &mut AttackReport,
    round: usize,
    dim: usize,
    target: f64,
) -> Result<bool, AttackError> {
    let eos = model.config.eos_id as usize;
    let format = *model.output_embedding.format();
    let word = model.output_embedding.word(eos, dim);
    match select_bit(word, target, &format, &[]) {
        Ok((bit, flipped)) => {
            model.output_embedding.set_word(eos, dim, flipped);
            report.flips.push(FlipRecord {
                round,
                dim,
                bit,
                word_before: word,
                word_after: flipped,
                fp_before: decode(word, &format),
                fp_after: decode(flipped, &format),
                target_fp: target,
            });
            Ok(true)
        }
        Err(CodecError::NoFiniteCandidate) => {
            report.skipped_dims.push(SkippedDim {
                round,
                dim,
                reason: "no finite flip candidate".into(),
            });
            Ok(false)
        }
        Err(e) => Err(e.into()),
    }
}

/// Single-epoch search: one gradient, the top-`n_flips` dimensions, one flip
/// per dimension. A dimension with no finite candidate is skipped and the
/// next-ranked dimension takes its budget slot.
pub fn run_one_shot(
    model: &mut TinyLmModel,
    prompts: &[PromptEntry],
    cfg: &AttackConfig,
) -> Result<AttackReport, AttackError> {
    cfg.validate(model)?;
    if prompts.is_empty() {
        return Err(AttackError::NoSearchPrompts);
    }
    let mut report = new_report(prompts, cfg);
    let eos = model.config.eos_id as usize;

    let traces = epoch(model, prompts, cfg)?;
    report.initial_loss = epoch_loss(&traces, cfg.aggregation);
    let g = accumulate_eos_row_gradient(&traces, cfg.aggregation, model.config.d_model);
    if norm_l2_f64(&g) == 0.0 {
        return Err(AttackError::ZeroGradient);
    }
    let g = scaled_gradient(g, cfg)?;

    let ranked = select_weights(&g, g.len());
    let row = model.output_embedding.decode_row(eos);
    let targets = target_row(&row, &g);

    for &dim in &ranked {
        if report.flips.len() == cfg.n_flips {
            break;
        }
        flip_dim(model, &mut report, 1, dim, targets[dim])?;
    }

    let after = epoch(model, prompts, cfg)?;
    report
        .round_losses
        .push(epoch_loss(&after, cfg.aggregation));
    report.total_bit_flips = report.flips.len();
    Ok(report)
}

/// `n_flips` rounds of epoch + single best flip on the mutated model. The
/// same dimension may be chosen in several rounds (even re-flipping the same
/// bit); a zero gradient or a round with no finite candidate aborts the run
/// with the reason recorded.
pub fn run_progressive(
    model: &mut TinyLmModel,
    prompts: &[PromptEntry],
    cfg: &AttackConfig,
) -> Result<AttackReport, AttackError> {
    cfg.validate(model)?;
    if prompts.is_empty() {
        return Err(AttackError::NoSearchPrompts);
    }
    let mut report = new_report(prompts, cfg);
    let eos = model.config.eos_id as usize;

    for round in 1..=cfg.n_flips {
        let traces = epoch(model, prompts, cfg)?;
        let loss = epoch_loss(&traces, cfg.aggregation);
        if round == 1 {
            report.initial_loss = loss;
        } else {
            report.round_losses.push(loss);
        }

        let g = accumulate_eos_row_gradient(&traces, cfg.aggregation, model.config.d_model);
        if norm_l2_f64(&g) == 0.0 {
            report.aborted = Some(format!("zero gradient in round {round}"));
            break;
        }
        let g = scaled_gradient(g, cfg)?;
        let ranked = select_weights(&g, g.len());
        let row = model.output_embedding.decode_row(eos);

        let mut flipped = false;
        for &dim in &ranked {
            let target = row[dim] as f64 - g[dim];
            if flip_dim(model, &mut report, round, dim, target)? {
                flipped = true;
                break;
            }
        }
        if !flipped {
            report.aborted = Some(format!("no finite flip candidate in round {round}"));
            break;
        }
    }

    let after = epoch(model, prompts, cfg)?;
    report
        .round_losses
        .push(epoch_loss(&after, cfg.aggregation));
    report.total_bit_flips = report.flips.len();
    Ok(report)
}

/// Re-apply a report's flips to a fresh copy of the pre-attack model,
/// verifying each recorded before-word against the stored words.
pub fn apply_flips(model: &mut TinyLmModel, flips: &[FlipRecord]) -> Result<(), AttackError> {
    let eos = model.config.eos_id as usize;
    let format = *model.output_embedding.format();
    for (index, f) in flips.iter().enumerate() {
        let current = model.output_embedding.word(eos, f.dim);
        if current != f.word_before {
            return Err(AttackError::InconsistentFlip {
                index,
                dim: f.dim,
                expected: f.word_before,
                found: current,
            });
        }
        let flipped = flip_bit(current, f.bit, &format)?;
        if flipped != f.word_after {
            return Err(AttackError::InconsistentFlip {
                index,
                dim: f.dim,
                expected: f.word_after,
                found: flipped,
            });
        }
        model.output_embedding.set_word(eos, f.dim, flipped);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::FormatKind;
    use crate::fixture::fixture_builder;
    use crate::io::PromptCorpus;
    use crate::model::{
        forward_all, logits_from_hidden, replay, softmax_prob_f64, Termination, TinyLmConfig,
    };
    use proptest::prelude::*;

    fn cfg() -> TinyLmConfig {
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

    fn fixture(kind: FormatKind) -> (crate::model::TinyLmModel, Vec<PromptEntry>) {
        let (model, _) = fixture_builder(&cfg(), 21, (4, 16), kind).unwrap();
        let corpus = PromptCorpus::synthetic(77, 4, (4, 10), 64, &[2]);
        (model, corpus.entries)
    }

    fn synthetic_trace(p: f64, hidden: Vec<Vec<f32>>) -> GenerationTrace {
        let n = hidden.len();
        GenerationTrace {
            prompt_tokens: vec![1],
            generated_tokens: vec![3; n],
            eos_probs: vec![p; n],
            eos_logits: vec![0.0; n],
            hidden_states: hidden,
            terminated_by: Termination::MaxLen,
        }
    }

    #[test]
    fn loss_on_a_one_step_uniform_trace_is_one_over_v() {
        // 256 equal logits: p = 1/256 exactly in f64.
        let logits = vec![0.0f32; 256];
        let p = softmax_prob_f64(&logits, 7);
        let trace = synthetic_trace(p, vec![vec![0.0; 4]]);
        let loss = eos_loss(&trace, Aggregation::Full);
        assert!((loss - 1.0 / 256.0).abs() < 1e-15);
    }

    #[test]
    fn loss_aggregation_windows() {
        let mut trace = synthetic_trace(0.0, vec![vec![0.0]; 5]);
        trace.eos_probs = vec![0.1, 0.2, 0.3, 0.4, 0.5];
        assert!((eos_loss(&trace, Aggregation::Full) - 1.5).abs() < 1e-12);
        // N = 5: window is steps 4..=5 (1-based), i.e. the last two.
        assert!((eos_loss(&trace, Aggregation::LatterHalf) - 0.9).abs() < 1e-12);
        assert!((eos_loss(&trace, Aggregation::Last) - 0.5).abs() < 1e-12);

        trace.eos_probs.truncate(4);
        trace.generated_tokens.truncate(4);
        trace.hidden_states.truncate(4);
        assert!((eos_loss(&trace, Aggregation::LatterHalf) - 0.7).abs() < 1e-12);

        // Single-step trace: the latter-half window is empty.
        let one = synthetic_trace(0.25, vec![vec![0.0]]);
        assert_eq!(eos_loss(&one, Aggregation::LatterHalf), 0.0);
        assert_eq!(eos_loss(&one, Aggregation::Last), 0.25);
    }

    #[test]
    fn gradient_of_single_step_is_p_one_minus_p_h() {
        let mut h = vec![0.0f32; 8];
        h[5] = 1.0;
        let trace = synthetic_trace(0.5, vec![h]);
        let g = accumulate_eos_row_gradient(&[trace], Aggregation::Full, 8);
        for (j, &gj) in g.iter().enumerate() {
            if j == 5 {
                assert!((gj - 0.25).abs() < 1e-12);
            } else {
                assert_eq!(gj, 0.0);
            }
        }
    }

    #[test]
    fn gradient_vanishes_as_probabilities_saturate() {
        let h = vec![vec![1.0f32; 8]; 3];
        let nearly_zero =
            accumulate_eos_row_gradient(&[synthetic_trace(1e-12, h.clone())], Aggregation::Full, 8);
        assert!(norm_l2_f64(&nearly_zero) < 1e-10);
        let nearly_one =
            accumulate_eos_row_gradient(&[synthetic_trace(1.0, h)], Aggregation::Full, 8);
        assert_eq!(norm_l2_f64(&nearly_one), 0.0);
    }

    #[test]
    fn scale_gradient_clamps_into_band() {
        let g = vec![6.0, 8.0]; // norm 10
        let s = scale_gradient(&g, 1e-3, 1.0).unwrap();
        assert!((norm_l2_f64(&s) - 1.0).abs() < 1e-12);
        assert!((s[0] / s[1] - 0.75).abs() < 1e-12);

        let g = vec![0.3, 0.4]; // norm 0.5, inside the band
        let s = scale_gradient(&g, 1e-3, 1.0).unwrap();
        assert_eq!(s, g);

        let g = vec![6e-7, 8e-7]; // norm 1e-6, below the floor
        let s = scale_gradient(&g, 1e-3, 1.0).unwrap();
        assert!((norm_l2_f64(&s) - 1e-3).abs() < 1e-15);

        assert_eq!(
            scale_gradient(&[0.0, 0.0], 1e-3, 1.0),
            Err(AttackError::ZeroGradient)
        );
    }

    #[test]
    fn select_weights_ranks_by_magnitude_with_index_ties() {
        assert_eq!(select_weights(&[0.1, -0.9, 0.5], 2), vec![1, 2]);
        assert_eq!(select_weights(&[0.5, -0.5, 0.5], 3), vec![0, 1, 2]);

        // Against a plain sort oracle on 512 seeded values.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(4);
        let g: Vec<f64> = (0..512).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = select_weights(&g, 32);
        let mut oracle: Vec<usize> = (0..g.len()).collect();
        oracle.sort_by(|&a, &b| g[b].abs().partial_cmp(&g[a].abs()).unwrap().then(a.cmp(&b)));
        assert_eq!(got, oracle[..32]);
    }

    #[test]
    fn target_row_is_current_minus_gradient() {
        let t = target_row(&[0.0, 1.0], &[0.25, -0.5]);
        assert_eq!(t, vec![-0.25, 1.5]);
        let mut g = vec![0.0; 4];
        g[2] = 1e-3;
        let t = target_row(&[0.5; 4], &g);
        assert!(t[0] == 0.5 && t[1] == 0.5 && t[3] == 0.5);
        assert!((t[2] - 0.499).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences_under_replay() {
        let (model, prompts) = fixture(FormatKind::Int8);
        let cfg_a = AttackConfig::one_shot(1);
        let g = eos_row_gradient(&model, &prompts, &cfg_a).unwrap();

        // Oracle: capture each search generation once, then differentiate the
        // replayed loss by recomputing every logit from the hidden states in
        // f64 with the EOS row perturbed one coordinate at a time.
        let eos = model.config.eos_id as usize;
        let wo = model.output_embedding.decode_all();
        let traces: Vec<GenerationTrace> = prompts
            .iter()
            .map(|p| {
                let t = crate::model::generate_seeded(
                    &model,
                    &p.tokens,
                    model.config.max_len,
                    0.0,
                    cfg_a.rng_seed,
                )
                .unwrap();
                replay(&model, &p.tokens, &t.generated_tokens).unwrap()
            })
            .collect();

        let loss_with = |coord: usize, delta: f64| -> f64 {
            let mut total = 0.0;
            for tr in &traces {
                for h in &tr.hidden_states {
                    let mut num = 0.0f64;
                    let mut den = 0.0f64;
                    let mut logits = Vec::with_capacity(model.config.vocab_size);
                    for k in 0..model.config.vocab_size {
                        let mut l = 0.0f64;
                        for (j, &hj) in h.iter().enumerate() {
                            let mut w = wo.at(k, j) as f64;
                            if k == eos && j == coord {
                                w += delta;
                            }
                            l += w * hj as f64;
                        }
                        logits.push(l);
                    }
                    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    for (k, &l) in logits.iter().enumerate() {
                        let e = (l - m).exp();
                        den += e;
                        if k == eos {
                            num = e;
                        }
                    }
                    total += num / den;
                }
            }
            total
        };

        let eps = 1e-3;
        for coord in [0usize, 3, 7, 13, 21, 30] {
            let fd = (loss_with(coord, eps) - loss_with(coord, -eps)) / (2.0 * eps);
            if fd.abs() < 1e-8 {
                continue;
            }
            let rel = ((g[coord] - fd) / fd).abs();
            assert!(
                rel <= 1e-2,
                "coord {coord}: analytic {} vs fd {fd}, rel {rel}",
                g[coord]
            );
        }
    }

    #[test]
    fn one_shot_with_budget_one_flips_the_top_gradient_dim() {
        let (model, prompts) = fixture(FormatKind::Int8);
        let cfg_a = AttackConfig::one_shot(1);
        let g = eos_row_gradient(&model, &prompts, &cfg_a).unwrap();
        let g = scale_gradient(&g, cfg_a.grad_low, cfg_a.grad_up).unwrap();
        let top = select_weights(&g, 1)[0];

        let mut attacked = model.clone();
        let report = run_one_shot(&mut attacked, &prompts, &cfg_a).unwrap();
        assert_eq!(report.flips.len(), 1);
        assert_eq!(report.total_bit_flips, 1);
        assert_eq!(report.flips[0].dim, top);
        assert_eq!(report.flips[0].round, 1);
    }

    #[test]
    fn one_shot_flips_distinct_dims_and_reduces_the_forced_loss() {
        let (model, prompts) = fixture(FormatKind::Int8);

        // Capture the pre-attack search generations so the descent step can
        // be judged with the sequences held fixed. (On fresh generations the
        // summed loss can legitimately grow: a successful attack lengthens
        // the trace, and each extra step contributes at least ~1/V.)
        let baseline: Vec<GenerationTrace> = prompts
            .iter()
            .map(|p| crate::model::generate(&model, &p.tokens, model.config.max_len, 0.0).unwrap())
            .collect();
        let forced_loss = |m: &crate::model::TinyLmModel| -> f64 {
            baseline
                .iter()
                .map(|t| {
                    let rep = replay(m, &t.prompt_tokens, &t.generated_tokens).unwrap();
                    eos_loss(&rep, Aggregation::Full)
                })
                .sum()
        };

        let mut attacked = model.clone();
        let report = run_one_shot(&mut attacked, &prompts, &AttackConfig::one_shot(3)).unwrap();
        assert_eq!(report.flips.len(), 3);
        let mut dims: Vec<usize> = report.flips.iter().map(|f| f.dim).collect();
        dims.dedup();
        assert_eq!(dims.len(), 3, "one-shot flips at most one bit per dim");
        assert!(report
            .flips
            .iter()
            .all(|f| f.fp_after.is_finite() && f.word_after != f.word_before));

        let before = forced_loss(&model);
        let after = forced_loss(&attacked);
        assert!(
            after < before,
            "teacher-forced loss should drop: {before} -> {after}"
        );
        // The realized-trace losses live in the report either way.
        assert_eq!(report.round_losses.len(), 1);
    }

    #[test]
    fn attack_touches_only_the_eos_row_and_flips_replay_exactly() {
        let (model, prompts) = fixture(FormatKind::Fp16);
        let mut attacked = model.clone();
        let report = run_attack(&mut attacked, &prompts, &AttackConfig::one_shot(4)).unwrap();

        let eos = model.config.eos_id as usize;
        for r in 0..model.config.vocab_size {
            if r == eos {
                continue;
            }
            assert_eq!(
                model.output_embedding.row_words(r),
                attacked.output_embedding.row_words(r),
                "row {r} must be untouched"
            );
        }

        // Fold of flip_bit over the records reproduces the attacked words.
        let mut fresh = model.clone();
        apply_flips(&mut fresh, &report.flips).unwrap();
        assert_eq!(
            fresh.output_embedding.words(),
            attacked.output_embedding.words()
        );

        // Tampered record is rejected.
        let mut bad = report.flips.clone();
        bad[0].word_before = BitWord::new(bad[0].word_before.bits() ^ 0x01);
        let mut fresh2 = model.clone();
        assert!(matches!(
            apply_flips(&mut fresh2, &bad),
            Err(AttackError::InconsistentFlip { .. })
        ));
    }

    #[test]
    fn progressive_first_round_matches_one_shot_and_runs_n_rounds() {
        let (model, prompts) = fixture(FormatKind::Fp16);

        let mut a = model.clone();
        let one = run_one_shot(&mut a, &prompts, &AttackConfig::one_shot(1)).unwrap();
        let mut b = model.clone();
        let prog = run_progressive(&mut b, &prompts, &AttackConfig::progressive(1)).unwrap();
        assert_eq!(one.flips, prog.flips);

        let mut c = model.clone();
        let five = run_progressive(&mut c, &prompts, &AttackConfig::progressive(5)).unwrap();
        assert_eq!(five.flips.len(), 5);
        assert_eq!(five.total_bit_flips, 5);
        assert!(five.aborted.is_none());
        let rounds: Vec<usize> = five.flips.iter().map(|f| f.round).collect();
        assert_eq!(rounds, vec![1, 2, 3, 4, 5]);
        for f in &five.flips {
            assert_eq!(
                flip_bit(f.word_before, f.bit, model.output_embedding.format()).unwrap(),
                f.word_after
            );
        }
        // Progressive measures the loss after every round plus the final one.
        assert_eq!(five.round_losses.len(), 5);
    }

    #[test]
    fn progressive_matches_or_beats_one_shot_on_the_seeded_fp16_fixture() {
        let (model, prompts) = fixture(FormatKind::Fp16);
        let n = 4;
        let mut a = model.clone();
        let one = run_one_shot(&mut a, &prompts, &AttackConfig::one_shot(n)).unwrap();
        let mut b = model.clone();
        let prog = run_progressive(&mut b, &prompts, &AttackConfig::progressive(n)).unwrap();
        // Seeded comparison, not a theorem: record both and check the
        // qualitative direction on this fixture.
        assert!(
            prog.final_loss() <= one.final_loss() + 1e-9,
            "progressive {} vs one-shot {}",
            prog.final_loss(),
            one.final_loss()
        );
    }

    #[test]
    fn config_validation() {
        let (model, prompts) = fixture(FormatKind::Int8);
        let mut c = AttackConfig::one_shot(0);
        assert!(matches!(
            c.validate(&model),
            Err(AttackError::InvalidConfig(_))
        ));
        c.n_flips = 1;
        c.grad_low = 2.0; // above grad_up
        assert!(c.validate(&model).is_err());
        c.grad_low = 1e-3;
        c.search_max_len = Some(10_000);
        assert!(c.validate(&model).is_err());
        c.search_max_len = None;
        assert!(c.validate(&model).is_ok());
        let mut m = model.clone();
        assert!(matches!(
            run_one_shot(&mut m, &prompts[..0], &AttackConfig::one_shot(1)),
            Err(AttackError::NoSearchPrompts)
        ));
    }

    #[test]
    fn stealthiness_under_forced_context_after_attack() {
        let (model, prompts) = fixture(FormatKind::Int8);
        let mut attacked = model.clone();
        run_one_shot(&mut attacked, &prompts, &AttackConfig::one_shot(3)).unwrap();

        let context = [5u32, 9, 14, 3, 8];
        let states = forward_all(&model, &context).unwrap();
        let eos = model.config.eos_id as usize;
        for h in &states {
            let before = logits_from_hidden(&model, h);
            let after = logits_from_hidden(&attacked, h);
            for k in 0..before.len() {
                if k != eos {
                    assert_eq!(before[k].to_bits(), after[k].to_bits());
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn selection_is_invariant_under_gradient_scaling(
            g in prop::collection::vec(-10.0f64..10.0, 8..40),
            low in 1e-4f64..1e-2,
            up in 0.5f64..50.0,
        ) {
            prop_assume!(norm_l2_f64(&g) > 0.0);
            let scaled = scale_gradient(&g, low, up).unwrap();
            prop_assert_eq!(select_weights(&g, 5), select_weights(&scaled, 5));
        }

        #[test]
        fn aggregation_window_is_always_within_bounds(n in 1usize..200) {
            for agg in [Aggregation::Full, Aggregation::LatterHalf, Aggregation::Last] {
                let w = aggregation_window(n, agg);
                prop_assert!(w.end <= n);
                prop_assert!(w.start <= w.end);
            }
        }
    }
}
