//! JSON config files for the subcommands. All fields optional; command-line
//! flags override file values, defaults fill the rest. Unknown keys are
//! rejected.

use std::path::Path;

use eosflip::attack::{Aggregation, AttackConfig, SearchMode};
use eosflip::codec::FormatKind;
use eosflip::model::TinyLmConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub fn load_config<T: Default + for<'de> Deserialize<'de>>(
    path: Option<&Path>,
) -> Result<T, CliError> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))
        }
    }
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFileConfig {
    pub vocab_size: Option<usize>,
    pub d_model: Option<usize>,
    pub n_layers: Option<usize>,
    pub n_heads: Option<usize>,
    pub d_ff: Option<usize>,
    pub eos_id: Option<u32>,
    pub max_len: Option<usize>,
    pub rng_seed: Option<u64>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureFileConfig {
    pub seed: Option<u64>,
    pub format: Option<FormatKind>,
    pub baseline_len_range: Option<(usize, usize)>,
    #[serde(default)]
    pub model: Option<ModelFileConfig>,
}

/// Fully resolved fixture parameters, echoed into the probe report.
#[derive(Serialize)]
pub struct ResolvedFixture {
    pub seed: u64,
    pub format: FormatKind,
    pub baseline_len_range: (usize, usize),
    pub model: TinyLmConfig,
}

pub fn resolve_fixture(
    file: FixtureFileConfig,
    seed: Option<u64>,
    format: Option<FormatKind>,
    max_len: Option<usize>,
    len_range: Option<(usize, usize)>,
) -> ResolvedFixture {
    let seed = seed.or(file.seed).unwrap_or(42);
    let format = format.or(file.format).unwrap_or(FormatKind::Int8);
    let baseline_len_range = len_range.or(file.baseline_len_range).unwrap_or((8, 32));
    let m = file.model.unwrap_or_default();
    let model = TinyLmConfig {
        vocab_size: m.vocab_size.unwrap_or(256),
        d_model: m.d_model.unwrap_or(64),
        n_layers: m.n_layers.unwrap_or(2),
        n_heads: m.n_heads.unwrap_or(4),
        d_ff: m.d_ff.unwrap_or(256),
        eos_id: m.eos_id.unwrap_or(2),
        max_len: max_len.or(m.max_len).unwrap_or(128),
        rng_seed: m.rng_seed.unwrap_or(seed),
    };
    ResolvedFixture {
        seed,
        format,
        baseline_len_range,
        model,
    }
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackFileConfig {
    pub mode: Option<SearchMode>,
    pub n_flips: Option<usize>,
    pub aggregation: Option<Aggregation>,
    pub grad_low: Option<f64>,
    pub grad_up: Option<f64>,
    pub scaling: Option<bool>,
    pub search_max_len: Option<usize>,
    pub search_temperature: Option<f64>,
    pub rng_seed: Option<u64>,
    pub n_search: Option<usize>,
}

pub struct ResolvedAttack {
    pub attack: AttackConfig,
    pub n_search: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn resolve_attack(
    file: AttackFileConfig,
    mode: Option<SearchMode>,
    n_flips: Option<usize>,
    aggregation: Option<Aggregation>,
    grad_low: Option<f64>,
    grad_up: Option<f64>,
    no_scaling: bool,
    search_max_len: Option<usize>,
    temperature: Option<f64>,
    seed: Option<u64>,
    n_search: Option<usize>,
) -> ResolvedAttack {
    let defaults = AttackConfig::one_shot(1);
    ResolvedAttack {
        attack: AttackConfig {
            mode: mode.or(file.mode).unwrap_or(SearchMode::OneShot),
            n_flips: n_flips.or(file.n_flips).unwrap_or(10),
            aggregation: aggregation.or(file.aggregation).unwrap_or_default(),
            grad_low: grad_low.or(file.grad_low).unwrap_or(defaults.grad_low),
            grad_up: grad_up.or(file.grad_up).unwrap_or(defaults.grad_up),
            scaling: if no_scaling {
                false
            } else {
                file.scaling.unwrap_or(true)
            },
            search_max_len: search_max_len.or(file.search_max_len),
            search_temperature: temperature.or(file.search_temperature).unwrap_or(0.0),
            rng_seed: seed.or(file.rng_seed).unwrap_or(0),
        },
        n_search: n_search.or(file.n_search).unwrap_or(4),
    }
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalFileConfig {
    pub n_search: Option<usize>,
    pub max_len: Option<usize>,
    pub temperature: Option<f64>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CosineFileConfig {
    pub prompt_id: Option<String>,
    pub max_len: Option<usize>,
}
