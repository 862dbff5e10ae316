//! Attack efficacy measurement, cosine interpretation traces, and the
//! weight-reconstruction defense.
//!
//! Lengths count generated tokens only (the prompt is excluded; an emitted
//! EOS counts as the step that produced it). A prompt "reaches max" when its
//! generation hit the length cap without emitting EOS. `MaxRate` is the
//! fraction of evaluated prompts that reached max.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{decode, encode, QuantizedTensor};
use crate::io::PromptEntry;
use crate::mat::dot;
use crate::model::{generate, ModelError, Termination, TinyLmModel};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cosine of an exactly zero vector is undefined")]
    ZeroVector,
    #[error("models differ outside the EOS row: {0}")]
    MismatchedModels(String),
    #[error("no prompts to evaluate")]
    EmptyPrompts,
    #[error("per-prompt results do not join: {0}")]
    MismatchedIds(String),
    #[error("invalid reference bounds [{0}, {1}]")]
    InvalidBounds(f32, f32),
    #[error("prompt {id}: {source}")]
    Generation { id: String, source: ModelError },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Outcome of one evaluated prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptOutcome {
    pub id: String,
    pub len: usize,
    pub reached_max: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptFailure {
    pub id: String,
    pub error: String,
}

/// Aggregate of one model over one prompt set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEval {
    pub avg_len: f64,
    pub max_rate: f64,
    pub per_prompt: Vec<PromptOutcome>,
    /// Prompts that failed to generate; only populated on partial runs.
    pub failures: Vec<PromptFailure>,
    pub partial: bool,
}

/// Decode every prompt and aggregate lengths and the reached-max rate.
///
/// With `allow_partial` a failing prompt is recorded and excluded from the
/// averages; otherwise the first failure (in prompt order) is returned.
pub fn evaluate(
    model: &TinyLmModel,
    prompts: &[PromptEntry],
    max_len: usize,
    temperature: f64,
    allow_partial: bool,
) -> Result<ModelEval, EvalError> {
    if prompts.is_empty() {
        return Err(EvalError::EmptyPrompts);
    }
    type PromptResult = (String, Result<(usize, bool), ModelError>);
    let results: Vec<PromptResult> = prompts
        .par_iter()
        .map(|p| {
            let r = generate(model, &p.tokens, max_len, temperature)
                .map(|t| (t.steps(), t.terminated_by == Termination::MaxLen));
            (p.id.clone(), r)
        })
        .collect();

    let mut per_prompt = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (id, r) in results {
        match r {
            Ok((len, hit_cap)) => per_prompt.push(PromptOutcome {
                id,
                len,
                reached_max: hit_cap && len == max_len,
            }),
            Err(source) if allow_partial => failures.push(PromptFailure {
                id,
                error: source.to_string(),
            }),
            Err(source) => return Err(EvalError::Generation { id, source }),
        }
    }
    if per_prompt.is_empty() {
        return Err(EvalError::EmptyPrompts);
    }
    let n = per_prompt.len() as f64;
    Ok(ModelEval {
        avg_len: per_prompt.iter().map(|o| o.len as f64).sum::<f64>() / n,
        max_rate: per_prompt.iter().filter(|o| o.reached_max).count() as f64 / n,
        per_prompt,
        partial: !failures.is_empty(),
        failures,
    })
}

/// Joined per-prompt row of a before/after evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub id: String,
    pub len_ori: usize,
    pub len_attack: usize,
    pub reached_max: bool,
}

/// The headline metric set for one evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub avg_len_ori: f64,
    pub avg_len_attack: f64,
    pub max_rate_ori: f64,
    /// Fraction of prompts the attacked model drives to the length cap.
    pub max_rate: f64,
    pub n_bit_flips: usize,
    pub per_prompt: Vec<MetricsRow>,
}

/// Join an original and an attacked evaluation over the same prompt ids.
pub fn metrics(
    original: &ModelEval,
    attacked: &ModelEval,
    n_bit_flips: usize,
) -> Result<Metrics, EvalError> {
    if original.per_prompt.len() != attacked.per_prompt.len() {
        return Err(EvalError::MismatchedIds(format!(
            "{} vs {} prompts",
            original.per_prompt.len(),
            attacked.per_prompt.len()
        )));
    }
    let mut per_prompt = Vec::with_capacity(original.per_prompt.len());
    for (o, a) in original.per_prompt.iter().zip(&attacked.per_prompt) {
        if o.id != a.id {
            return Err(EvalError::MismatchedIds(format!("{} vs {}", o.id, a.id)));
        }
        per_prompt.push(MetricsRow {
            id: o.id.clone(),
            len_ori: o.len,
            len_attack: a.len,
            reached_max: a.reached_max,
        });
    }
    Ok(Metrics {
        avg_len_ori: original.avg_len,
        avg_len_attack: attacked.avg_len,
        max_rate_ori: original.max_rate,
        max_rate: attacked.max_rate,
        n_bit_flips,
        per_prompt,
    })
}

/// Flat CSV: one row per prompt (`id,len_ori,len_attack,reached_max`).
pub fn write_metrics_csv(m: &Metrics, path: &Path) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "len_ori", "len_attack", "reached_max"])?;
    for row in &m.per_prompt {
        w.write_record([
            row.id.as_str(),
            &row.len_ori.to_string(),
            &row.len_attack.to_string(),
            &row.reached_max.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-step cosine between a model's decoded EOS row and its own hidden
/// states, for the before/after pair of models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineTrace {
    pub prompt_id: String,
    pub before: Vec<f64>,
    pub after: Vec<f64>,
}

/// Cosine of `row` against each hidden state, in f64.
pub fn cosine_series(row: &[f32], hidden: &[Vec<f32>]) -> Result<Vec<f64>, EvalError> {
    let rn = (row.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>()).sqrt();
    if rn == 0.0 {
        return Err(EvalError::ZeroVector);
    }
    hidden
        .iter()
        .map(|h| {
            let hn = (h.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>()).sqrt();
            if hn == 0.0 {
                return Err(EvalError::ZeroVector);
            }
            let d = dot(row, h) as f64;
            Ok(d / (rn * hn))
        })
        .collect()
}

/// Greedy-decode `prompt` under both models and record the per-step cosine
/// between each model's own EOS row and its own hidden states.
///
/// The models must agree everywhere outside the EOS row.
pub fn cosine_trace(
    before: &TinyLmModel,
    after: &TinyLmModel,
    prompt: &PromptEntry,
    max_len: usize,
) -> Result<CosineTrace, EvalError> {
    verify_same_but_eos_row(before, after)?;
    let run = |model: &TinyLmModel| -> Result<Vec<f64>, EvalError> {
        let trace = generate(model, &prompt.tokens, max_len, 0.0).map_err(|source| {
            EvalError::Generation {
                id: prompt.id.clone(),
                source,
            }
        })?;
        cosine_series(&model.eos_row(), &trace.hidden_states)
    };
    Ok(CosineTrace {
        prompt_id: prompt.id.clone(),
        before: run(before)?,
        after: run(after)?,
    })
}

fn verify_same_but_eos_row(a: &TinyLmModel, b: &TinyLmModel) -> Result<(), EvalError> {
    if a.config != b.config {
        return Err(EvalError::MismatchedModels("configs differ".into()));
    }
    if a.token_embedding != b.token_embedding
        || a.pos_embedding != b.pos_embedding
        || a.layers != b.layers
        || a.final_gain != b.final_gain
        || a.final_bias != b.final_bias
    {
        return Err(EvalError::MismatchedModels(
            "internal tensors differ".into(),
        ));
    }
    if a.output_embedding.format() != b.output_embedding.format() {
        return Err(EvalError::MismatchedModels("formats differ".into()));
    }
    let eos = a.config.eos_id as usize;
    for r in 0..a.config.vocab_size {
        if r != eos && a.output_embedding.row_words(r) != b.output_embedding.row_words(r) {
            return Err(EvalError::MismatchedModels(format!(
                "output row {r} differs"
            )));
        }
    }
    Ok(())
}

/// Cosine CSV: `step,cos_before,cos_after`, blank cell where one series is
/// shorter.
pub fn write_cosine_csv(trace: &CosineTrace, path: &Path) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "cos_before", "cos_after"])?;
    let n = trace.before.len().max(trace.after.len());
    for i in 0..n {
        let b = trace
            .before
            .get(i)
            .map(|v| v.to_string())
            .unwrap_or_default();
        let a = trace
            .after
            .get(i)
            .map(|v| v.to_string())
            .unwrap_or_default();
        w.write_record([&(i + 1).to_string(), &b, &a])?;
    }
    w.flush()?;
    Ok(())
}

/// Weight-reconstruction defense: clamp every decoded output-embedding value
/// into `[reference_min, reference_max]` and re-encode in the tensor's own
/// format. Other tensors are untouched.
///
/// The bounds are meant to be the attained decoded min/max of the pre-attack
/// model (then they are format-representable and the clamp is idempotent at
/// the byte level). A NaN word (possible only after hostile edits outside
/// the attack path) is treated as zero before clamping.
pub fn defense_weight_reconstruction(
    model: &TinyLmModel,
    reference_min: f32,
    reference_max: f32,
) -> Result<TinyLmModel, EvalError> {
    if !(reference_min.is_finite() && reference_max.is_finite() && reference_min <= reference_max) {
        return Err(EvalError::InvalidBounds(reference_min, reference_max));
    }
    let mut defended = model.clone();
    let format = *model.output_embedding.format();
    let tensor = &model.output_embedding;
    let mut words = Vec::with_capacity(tensor.rows() * tensor.cols());
    for &w in tensor.words() {
        let v = decode(w, &format);
        let v = if v.is_nan() { 0.0 } else { v };
        let clamped = v.clamp(reference_min, reference_max);
        words.push(encode(clamped, &format));
    }
    defended.output_embedding =
        QuantizedTensor::from_words(tensor.rows(), tensor.cols(), words, format)
            .expect("shape preserved");
    Ok(defended)
}

/// Attained decoded bounds of a reference model's output embedding, the
/// canonical inputs to [`defense_weight_reconstruction`].
pub fn reference_bounds(model: &TinyLmModel) -> (f32, f32) {
    model
        .output_embedding
        .decoded_bounds()
        .expect("reference model has finite words")
}
