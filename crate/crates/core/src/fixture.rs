//! Deterministic synthetic models with controllable termination behavior.
//!
//! A freshly initialized random transformer has no reason to ever emit EOS,
//! so the builder manufactures one: it decodes seeded probe prompts with the
//! EOS output row zeroed, takes the mean unit-normalized hidden state `h_hat`
//! as the direction that characterizes "where generation lives", and installs
//! `alpha * h_hat` as the EOS row. The positional table carries a mild linear
//! drift along a random direction, so hidden states align with `h_hat` more
//! strongly at later steps and the EOS logit crosses the competition after a
//! controllable number of tokens. `alpha` is found by bisection until the
//! median greedy generation length over the probes lands in the requested
//! band.
//!
//! The bisection never regenerates: with the scale frozen, the non-EOS rows
//! (and therefore the token path and hidden states) are independent of the
//! candidate row, so lengths can be predicted exactly from the recorded probe
//! states and re-checked with one real decoding pass at the end.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{encode, CodecError, FormatKind, NumericFormat, QuantizedTensor};
use crate::io::PromptCorpus;
use crate::mat::{dot, Mat};
use crate::model::{
    argmax_lowest, derive_rng, forward, generate, ModelError, TinyLmConfig, TinyLmModel, Token,
    TransformerLayer,
};

/// Positions reserved beyond `max_len` for the prompt itself.
pub const PROMPT_HEADROOM: usize = 64;
/// Probe prompts used for calibration.
const PROBE_COUNT: usize = 8;
const PROBE_LEN_RANGE: (usize, usize) = (4, 12);
const MAX_BISECT_ITERS: usize = 64;

const TOKEN_EMB_STD: f64 = 1.0;
const POS_EMB_STD: f64 = 0.5;
/// Strength of the linear positional drift that makes termination pressure
/// grow with step index.
const POS_RAMP: f64 = 1.5;
const WO_ROW_STD: f64 = 0.05;
/// Two non-EOS entries are pinned to +/- this value so the int8 scale (and
/// the attained decoded range) is exactly known.
const WO_PIN: f32 = 1.0;

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("invalid baseline length range: {0}")]
    InvalidRange(String),
    #[error("calibration failed after {iterations} iterations: {detail}")]
    CalibrationFailed { iterations: usize, detail: String },
}

/// What the calibration run measured; embedded in fixture reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub seed: u64,
    pub format: FormatKind,
    pub scale: Option<f32>,
    pub alpha: f64,
    pub bisection_iterations: usize,
    pub probe_prompt_ids: Vec<String>,
    pub probe_lengths: Vec<usize>,
    pub median_len: usize,
    pub target_range: (usize, usize),
}

fn normal(rng: &mut ChaCha12Rng, std: f64) -> f32 {
    let z: f64 = rng.sample(StandardNormal);
    (z * std) as f32
}

fn normal_mat(seed: u64, tag: &str, rows: usize, cols: usize, std: f64) -> Mat {
    let mut rng = derive_rng(seed, tag, &[]);
    let data = (0..rows * cols).map(|_| normal(&mut rng, std)).collect();
    Mat::from_vec(rows, cols, data)
}

/// Seeded random model with the EOS output row zeroed: structurally complete
/// and runnable, but with no preference for terminating. `fixture_builder`
/// turns this into a calibrated fixture.
pub fn random_model(
    config: &TinyLmConfig,
    seed: u64,
    kind: FormatKind,
) -> Result<TinyLmModel, FixtureError> {
    config.validate()?;
    let d = config.d_model;
    let v = config.vocab_size;
    let n_positions = config.max_len + PROMPT_HEADROOM;
    let proj_std = 1.0 / (d as f64).sqrt();
    let down_std = 1.0 / (config.d_ff as f64).sqrt();

    // Positional embeddings: noise plus a linear drift along one random unit
    // direction, so late positions share a component the EOS row can target.
    let mut pos_embedding = normal_mat(seed, "pos_embedding", n_positions, d, POS_EMB_STD);
    let mut drift_rng = derive_rng(seed, "pos_drift", &[]);
    let mut drift: Vec<f64> = (0..d)
        .map(|_| drift_rng.sample::<f64, _>(StandardNormal))
        .collect();
    let dn = drift.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in drift.iter_mut() {
        *x /= dn;
    }
    for t in 0..n_positions {
        let frac = t as f64 / (n_positions - 1).max(1) as f64;
        for (v, dj) in pos_embedding.row_mut(t).iter_mut().zip(&drift) {
            *v += (frac * POS_RAMP * dj) as f32;
        }
    }

    let mut layers = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        let tag = |name: &str| format!("layers.{i}.{name}");
        layers.push(TransformerLayer {
            ln1_gain: vec![1.0; d],
            ln1_bias: vec![0.0; d],
            wq: normal_mat(seed, &tag("wq"), d, d, proj_std),
            wk: normal_mat(seed, &tag("wk"), d, d, proj_std),
            wv: normal_mat(seed, &tag("wv"), d, d, proj_std),
            wo: normal_mat(seed, &tag("wo"), d, d, proj_std),
            ln2_gain: vec![1.0; d],
            ln2_bias: vec![0.0; d],
            w_up: normal_mat(seed, &tag("w_up"), config.d_ff, d, proj_std),
            b_up: vec![0.0; config.d_ff],
            w_down: normal_mat(seed, &tag("w_down"), d, config.d_ff, down_std),
            b_down: vec![0.0; d],
        });
    }

    // Output embedding: random rows, a zeroed EOS row, and one +pin/-pin
    // entry in two non-EOS rows. The pins dominate every random entry, so
    // for int8 the per-tensor scale is exactly WO_PIN and the attained
    // decoded range is exactly [-WO_PIN, WO_PIN].
    let mut wo_float = normal_mat(seed, "output_embedding", v, d, WO_ROW_STD);
    let eos = config.eos_id as usize;
    for c in 0..d {
        wo_float.set(eos, c, 0.0);
    }
    wo_float.set((eos + 1) % v, 0, WO_PIN);
    wo_float.set((eos + 2) % v, 0, -WO_PIN);

    let model = TinyLmModel {
        config: config.clone(),
        token_embedding: normal_mat(seed, "token_embedding", v, d, TOKEN_EMB_STD),
        pos_embedding,
        layers,
        final_gain: vec![1.0; d],
        final_bias: vec![0.0; d],
        output_embedding: QuantizedTensor::from_f32(&wo_float, kind)?,
    };
    model.validate()?;
    Ok(model)
}

/// Per-step records of one probe decoding with the EOS row zeroed.
struct ProbeTrace {
    hidden: Vec<Vec<f32>>,
    max_other: Vec<f32>,
    argmax_other: Vec<usize>,
}

fn probe_run(model: &TinyLmModel, prompt: &[Token]) -> Result<ProbeTrace, FixtureError> {
    let eos = model.config.eos_id as usize;
    let mut tokens = prompt.to_vec();
    let mut trace = ProbeTrace {
        hidden: Vec::with_capacity(model.config.max_len),
        max_other: Vec::with_capacity(model.config.max_len),
        argmax_other: Vec::with_capacity(model.config.max_len),
    };
    for _ in 0..model.config.max_len {
        let (hidden, logits) = forward(model, &tokens)?;
        let (mut m, mut am) = (f32::NEG_INFINITY, 0);
        for (k, &l) in logits.iter().enumerate() {
            if k != eos && l > m {
                m = l;
                am = k;
            }
        }
        trace.hidden.push(hidden);
        trace.max_other.push(m);
        trace.argmax_other.push(am);
        let next = argmax_lowest(&logits) as Token;
        tokens.push(next);
        if next == model.config.eos_id {
            break;
        }
    }
    Ok(trace)
}

/// Greedy length the probe would realize if the decoded EOS row were `row`.
/// Exact: uses the same dot kernel and tie rule as the real forward pass.
fn predicted_len(probe: &ProbeTrace, row: &[f32], eos_id: usize, max_len: usize) -> usize {
    for (i, h) in probe.hidden.iter().enumerate() {
        let l = dot(row, h);
        if l > probe.max_other[i] || (l == probe.max_other[i] && eos_id < probe.argmax_other[i]) {
            return i + 1;
        }
    }
    max_len
}

fn lower_median(mut lengths: Vec<usize>) -> usize {
    lengths.sort_unstable();
    lengths[(lengths.len() - 1) / 2]
}

fn encode_row(h_hat: &[f32], alpha: f64, format: &NumericFormat) -> Vec<crate::codec::BitWord> {
    h_hat
        .iter()
        .map(|&c| encode((c as f64 * alpha) as f32, format))
        .collect()
}

fn probe_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1)
}

/// Build a calibrated fixture: a seeded random model whose median greedy
/// generation length over seeded probe prompts lies in `range = (lo, hi)`.
///
/// Deterministic in `(config, seed, range, kind)`. Fails with
/// `CalibrationFailed` if bisection cannot place the median within
/// `MAX_BISECT_ITERS` iterations.
pub fn fixture_builder(
    config: &TinyLmConfig,
    seed: u64,
    range: (usize, usize),
    kind: FormatKind,
) -> Result<(TinyLmModel, ProbeReport), FixtureError> {
    let (lo, hi) = range;
    if lo < 2 || hi > config.max_len / 2 || lo > hi {
        return Err(FixtureError::InvalidRange(format!(
            "(lo, hi) = ({lo}, {hi}) must satisfy 2 <= lo <= hi <= max_len/2 = {}",
            config.max_len / 2
        )));
    }
    if config.vocab_size < 8 {
        return Err(FixtureError::InvalidRange(
            "fixtures need a vocabulary of at least 8".into(),
        ));
    }

    let mut model = random_model(config, seed, kind)?;
    let eos = config.eos_id as usize;
    let format = *model.output_embedding.format();

    let probes_corpus = PromptCorpus::synthetic(
        probe_seed(seed),
        PROBE_COUNT,
        PROBE_LEN_RANGE,
        config.vocab_size,
        &[config.eos_id],
    );
    let probes: Vec<ProbeTrace> = probes_corpus
        .entries
        .par_iter()
        .map(|e| probe_run(&model, &e.tokens))
        .collect::<Result<_, _>>()?;

    // Mean unit-normalized hidden state over every step of every probe.
    let d = config.d_model;
    let mut acc = vec![0.0f64; d];
    for p in &probes {
        for h in &p.hidden {
            let n = (h.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>()).sqrt();
            for (a, &x) in acc.iter_mut().zip(h) {
                *a += x as f64 / n;
            }
        }
    }
    let an = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
    let h_hat: Vec<f32> = acc.iter().map(|x| (x / an) as f32).collect();

    let h_hat_max = h_hat.iter().fold(0.0f32, |m, &x| m.max(x.abs())) as f64;
    let alpha_cap = match format {
        // Keep the encoded row inside the frozen scale so quantizing it can
        // never move the per-tensor maximum.
        NumericFormat::Int8 { scale } => 0.98 * scale as f64 / h_hat_max,
        NumericFormat::Fp16 => 2048.0 / h_hat_max,
    };

    let median_at = |alpha: f64| -> usize {
        let row: Vec<f32> = encode_row(&h_hat, alpha, &format)
            .iter()
            .map(|&w| crate::codec::decode(w, &format))
            .collect();
        lower_median(
            probes
                .iter()
                .map(|p| predicted_len(p, &row, eos, config.max_len))
                .collect(),
        )
    };

    let mut iterations = 0;
    let mut alpha = alpha_cap;
    let cap_median = median_at(alpha_cap);
    if cap_median > hi {
        return Err(FixtureError::CalibrationFailed {
            iterations,
            detail: format!(
                "median length {cap_median} at the maximum row magnitude still exceeds {hi}"
            ),
        });
    }
    if cap_median < lo {
        let (mut a_long, mut a_short) = (0.0f64, alpha_cap);
        loop {
            iterations += 1;
            if iterations > MAX_BISECT_ITERS {
                return Err(FixtureError::CalibrationFailed {
                    iterations,
                    detail: format!(
                        "bisection did not land in [{lo}, {hi}]; last median {}",
                        median_at(alpha)
                    ),
                });
            }
            alpha = 0.5 * (a_long + a_short);
            let m = median_at(alpha);
            if m > hi {
                a_long = alpha;
            } else if m < lo {
                a_short = alpha;
            } else {
                break;
            }
        }
    }

    let words = encode_row(&h_hat, alpha, &format);
    for (c, &w) in words.iter().enumerate() {
        model.output_embedding.set_word(eos, c, w);
    }

    // Re-measure with real decoding; the surrogate is exact, so this is a
    // verification pass rather than a search step.
    let measured: Vec<usize> = probes_corpus
        .entries
        .par_iter()
        .map(|e| generate(&model, &e.tokens, config.max_len, 0.0).map(|t| t.steps()))
        .collect::<Result<_, _>>()?;
    let median_len = lower_median(measured.clone());
    if median_len < lo || median_len > hi {
        return Err(FixtureError::CalibrationFailed {
            iterations,
            detail: format!("re-measured median {median_len} outside [{lo}, {hi}]"),
        });
    }

    let report = ProbeReport {
        seed,
        format: kind,
        scale: match format {
            NumericFormat::Int8 { scale } => Some(scale),
            NumericFormat::Fp16 => None,
        },
        alpha,
        bisection_iterations: iterations,
        probe_prompt_ids: probes_corpus.entries.iter().map(|e| e.id.clone()).collect(),
        probe_lengths: measured,
        median_len,
        target_range: range,
    };
    Ok((model, report))
}
