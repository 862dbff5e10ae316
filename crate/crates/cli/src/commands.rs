use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use eosflip::attack::{run_attack, Aggregation, AttackReport, SearchMode};
use eosflip::codec::FormatKind;
use eosflip::eval::{
    cosine_trace, defense_weight_reconstruction, evaluate, metrics, reference_bounds,
    write_cosine_csv, write_metrics_csv, Metrics,
};
use eosflip::fixture::{fixture_builder, ProbeReport};
use eosflip::io::{load_model, load_prompts, save_model, PromptEntry};
use eosflip::model::TinyLmModel;
use serde::Serialize;

use crate::config::{
    load_config, resolve_attack, resolve_fixture, AttackFileConfig, CosineFileConfig,
    EvalFileConfig, FixtureFileConfig, ResolvedFixture,
};
use crate::error::CliError;

#[derive(Clone, Copy, ValueEnum)]
pub enum ModeArg {
    OneShot,
    Progressive,
}

impl From<ModeArg> for SearchMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::OneShot => SearchMode::OneShot,
            ModeArg::Progressive => SearchMode::Progressive,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum AggregationArg {
    Full,
    LatterHalf,
    Last,
}

impl From<AggregationArg> for Aggregation {
    fn from(a: AggregationArg) -> Self {
        match a {
            AggregationArg::Full => Aggregation::Full,
            AggregationArg::LatterHalf => Aggregation::LatterHalf,
            AggregationArg::Last => Aggregation::Last,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Int8,
    Fp16,
}

impl From<FormatArg> for FormatKind {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Int8 => FormatKind::Int8,
            FormatArg::Fp16 => FormatKind::Fp16,
        }
    }
}

fn parse_len_range(s: &str) -> Result<(usize, usize), String> {
    let (lo, hi) = s
        .split_once(',')
        .ok_or_else(|| "expected LO,HI".to_string())?;
    Ok((
        lo.trim().parse().map_err(|e| format!("{e}"))?,
        hi.trim().parse().map_err(|e| format!("{e}"))?,
    ))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Other(format!("serializing report: {e}")))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Write a model and read it back, so exit 0 implies the file on disk is
/// complete and passes its own checksum.
fn write_model_verified(model: &TinyLmModel, path: &Path) -> Result<(), CliError> {
    save_model(model, path)?;
    let back = load_model(path)?;
    if &back != model {
        return Err(CliError::Other(format!(
            "verification failed after writing {}",
            path.display()
        )));
    }
    Ok(())
}

fn load_prompts_for(model: &TinyLmModel, path: &Path) -> Result<Vec<PromptEntry>, CliError> {
    let corpus = load_prompts(path)?;
    corpus.validate_vocab(model.config.vocab_size)?;
    Ok(corpus.entries)
}

#[derive(Args)]
pub struct FixtureArgs {
    /// Output model file.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON probe report (defaults to OUT with a .report.json suffix).
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// JSON config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Baseline greedy length band as LO,HI (median over probe prompts).
    #[arg(long, value_parser = parse_len_range)]
    pub len_range: Option<(usize, usize)>,
}

#[derive(Serialize)]
struct FixtureReportFile {
    resolved: ResolvedFixture,
    probe: ProbeReport,
}

pub fn cmd_fixture(args: FixtureArgs) -> Result<(), CliError> {
    let file: FixtureFileConfig = load_config(args.config.as_deref())?;
    let resolved = resolve_fixture(
        file,
        args.seed,
        args.format.map(Into::into),
        args.max_len,
        args.len_range,
    );
    resolved.model.validate()?;

    let (model, probe) = fixture_builder(
        &resolved.model,
        resolved.seed,
        resolved.baseline_len_range,
        resolved.format,
    )?;
    write_model_verified(&model, &args.out)?;

    let report_path = args
        .report
        .clone()
        .unwrap_or_else(|| args.out.with_extension("report.json"));
    write_json(&FixtureReportFile { resolved, probe }, &report_path)?;
    println!("wrote {} and {}", args.out.display(), report_path.display());
    Ok(())
}

#[derive(Args)]
pub struct AttackArgs {
    /// Input model file (will not be modified).
    #[arg(long)]
    pub model: PathBuf,
    /// JSONL prompt corpus; the first n-search entries guide the search.
    #[arg(long)]
    pub prompts: PathBuf,
    /// Output path for the attacked model.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON attack report (defaults to OUT with a .report.json suffix).
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub n_flips: Option<usize>,
    #[arg(long)]
    pub n_search: Option<usize>,
    #[arg(long, value_enum)]
    pub aggregation: Option<AggregationArg>,
    #[arg(long)]
    pub grad_low: Option<f64>,
    #[arg(long)]
    pub grad_up: Option<f64>,
    /// Rank raw gradients without norm rescaling.
    #[arg(long)]
    pub no_scaling: bool,
    /// Decode-length cap during the search (defaults to the model's max_len).
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Search decoding temperature (0 = greedy).
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Seed for search-time sampled decoding.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Serialize)]
struct AttackReportFile {
    n_search: usize,
    report: AttackReport,
}

pub fn cmd_attack(args: AttackArgs) -> Result<(), CliError> {
    let file: AttackFileConfig = load_config(args.config.as_deref())?;
    let resolved = resolve_attack(
        file,
        args.mode.map(Into::into),
        args.n_flips,
        args.aggregation.map(Into::into),
        args.grad_low,
        args.grad_up,
        args.no_scaling,
        args.max_len,
        args.temperature,
        args.seed,
        args.n_search,
    );

    let mut model = load_model(&args.model)?;
    resolved.attack.validate(&model)?;
    let prompts = load_prompts_for(&model, &args.prompts)?;
    if resolved.n_search == 0 || resolved.n_search > prompts.len() {
        return Err(CliError::Validation(format!(
            "n_search {} outside 1..={}",
            resolved.n_search,
            prompts.len()
        )));
    }
    let search = &prompts[..resolved.n_search];

    let report = run_attack(&mut model, search, &resolved.attack)?;
    write_model_verified(&model, &args.out)?;

    let report_path = args
        .report
        .clone()
        .unwrap_or_else(|| args.out.with_extension("report.json"));
    write_json(
        &AttackReportFile {
            n_search: resolved.n_search,
            report,
        },
        &report_path,
    )?;
    println!("wrote {} and {}", args.out.display(), report_path.display());
    Ok(())
}

#[derive(Args)]
pub struct EvalArgs {
    /// Original (pre-attack) model.
    #[arg(long)]
    pub model: PathBuf,
    /// Attacked model.
    #[arg(long)]
    pub attacked: PathBuf,
    /// JSONL prompt corpus; the first n-search entries are excluded.
    #[arg(long)]
    pub prompts: PathBuf,
    /// Metrics JSON output.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional per-prompt CSV output.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n_search: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Attack report to copy the bit-flip count from.
    #[arg(long)]
    pub attack_report: Option<PathBuf>,
}

#[derive(Serialize)]
struct ResolvedEval {
    n_search: usize,
    max_len: usize,
    temperature: f64,
    n_bit_flips: usize,
}

#[derive(Serialize)]
struct EvalReportFile {
    resolved: ResolvedEval,
    metrics: Metrics,
}

pub fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let file: EvalFileConfig = load_config(args.config.as_deref())?;
    let original = load_model(&args.model)?;
    let attacked = load_model(&args.attacked)?;
    if original.config != attacked.config {
        return Err(CliError::Validation(
            "original and attacked models have different configurations".into(),
        ));
    }

    let n_search = args.n_search.or(file.n_search).unwrap_or(4);
    let max_len = args
        .max_len
        .or(file.max_len)
        .unwrap_or(original.config.max_len);
    let temperature = args.temperature.or(file.temperature).unwrap_or(0.0);
    let n_bit_flips = match &args.attack_report {
        None => 0,
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            let parsed: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            parsed["report"]["total_bit_flips"]
                .as_u64()
                .ok_or_else(|| {
                    CliError::Data(format!("{}: missing report.total_bit_flips", p.display()))
                })? as usize
        }
    };

    let corpus = load_prompts(&args.prompts)?;
    corpus.validate_vocab(original.config.vocab_size)?;
    let (_, eval_prompts) = corpus.split(n_search)?;

    let eval_ori = evaluate(&original, eval_prompts, max_len, temperature, false)?;
    let eval_att = evaluate(&attacked, eval_prompts, max_len, temperature, false)?;
    let m = metrics(&eval_ori, &eval_att, n_bit_flips)?;

    if let Some(csv_path) = &args.csv {
        write_metrics_csv(&m, csv_path)?;
    }
    write_json(
        &EvalReportFile {
            resolved: ResolvedEval {
                n_search,
                max_len,
                temperature,
                n_bit_flips,
            },
            metrics: m,
        },
        &args.out,
    )?;
    println!("wrote {}", args.out.display());
    Ok(())
}

#[derive(Args)]
pub struct DefendArgs {
    /// Model to defend (typically attacked).
    #[arg(long)]
    pub model: PathBuf,
    /// Reference model supplying the clamp bounds.
    #[arg(long)]
    pub reference: PathBuf,
    /// Output path for the defended model.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_defend(args: DefendArgs) -> Result<(), CliError> {
    let model = load_model(&args.model)?;
    let reference = load_model(&args.reference)?;
    if model.config != reference.config {
        return Err(CliError::Validation(
            "model and reference have different configurations".into(),
        ));
    }
    let (lo, hi) = reference_bounds(&reference);
    let defended = defense_weight_reconstruction(&model, lo, hi)?;
    write_model_verified(&defended, &args.out)?;
    println!("wrote {} (bounds [{lo}, {hi}])", args.out.display());
    Ok(())
}

#[derive(Args)]
pub struct CosineArgs {
    /// Original (pre-attack) model.
    #[arg(long)]
    pub model: PathBuf,
    /// Attacked model (sharing everything but the EOS row).
    #[arg(long)]
    pub attacked: PathBuf,
    /// JSONL prompt corpus.
    #[arg(long)]
    pub prompts: PathBuf,
    /// CSV output: step, cos_before, cos_after.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Prompt id to trace (defaults to the first corpus entry).
    #[arg(long)]
    pub prompt_id: Option<String>,
    #[arg(long)]
    pub max_len: Option<usize>,
}

pub fn cmd_cosine(args: CosineArgs) -> Result<(), CliError> {
    let file: CosineFileConfig = load_config(args.config.as_deref())?;
    let before = load_model(&args.model)?;
    let after = load_model(&args.attacked)?;
    let corpus = load_prompts(&args.prompts)?;
    corpus.validate_vocab(before.config.vocab_size)?;

    let prompt_id = args.prompt_id.or(file.prompt_id);
    let entry = match &prompt_id {
        None => &corpus.entries[0],
        Some(id) => corpus
            .entries
            .iter()
            .find(|e| &e.id == id)
            .ok_or_else(|| CliError::Validation(format!("prompt id {id:?} not in corpus")))?,
    };
    let max_len = args
        .max_len
        .or(file.max_len)
        .unwrap_or(before.config.max_len);

    let trace = cosine_trace(&before, &after, entry, max_len)?;
    write_cosine_csv(&trace, &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}
