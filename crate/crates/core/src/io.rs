//! Serialization: the model file format and JSONL prompt corpora.
//!
//! A model file is `EOSFLIP\x01` magic, a little-endian u64 manifest length,
//! a JSON manifest (config, tensor table with dtype tags and offsets, payload
//! checksum), then the raw payload. Internal tensors are stored as
//! little-endian `f32`; the output embedding is stored as its raw words, one
//! byte per int8 word or two little-endian bytes per fp16 word, so a load
//! after save is bit-exact even for flipped words.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::{BitWord, CodecError, NumericFormat, QuantizedTensor};
use crate::mat::Mat;
use crate::model::{ModelError, TinyLmConfig, TinyLmModel, Token, TransformerLayer};

const MAGIC: &[u8; 8] = b"EOSFLIP\x01";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("manifest JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported model file version {0}")]
    UnsupportedVersion(u32),
    #[error("payload checksum does not match the manifest")]
    ChecksumMismatch,
    #[error("tensor {tensor}: manifest shape {expected_rows}x{expected_cols} does not match payload of {got} bytes")]
    ShapeMismatch {
        tensor: String,
        expected_rows: usize,
        expected_cols: usize,
        got: usize,
    },
    #[error("unknown tensor format tag {0:?}")]
    UnknownFormatTag(String),
    #[error("tensor {0} missing from manifest")]
    MissingTensor(String),
    #[error("tensor {tensor} extends past the payload")]
    PayloadOutOfBounds { tensor: String },
    #[error("int8 tensor {0} is missing its scale")]
    MissingScale(String),
    #[error("line {line}: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("duplicate prompt id {id:?} at line {line}")]
    DuplicateId { id: String, line: usize },
    #[error("prompt corpus is empty")]
    EmptyCorpus,
    #[error("cannot split {total} prompts at n_search = {n_search}")]
    InvalidSplit { n_search: usize, total: usize },
    #[error("prompt {id:?}: token {token} outside vocabulary of {vocab}")]
    TokenOutOfVocab {
        id: String,
        token: Token,
        vocab: usize,
    },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    dtype: String,
    rows: usize,
    cols: usize,
    offset: usize,
    byte_len: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    scale: Option<f32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    config: TinyLmConfig,
    n_positions: usize,
    tensors: Vec<TensorEntry>,
    payload_len: usize,
    payload_sha256: String,
}

struct PayloadWriter {
    buf: Vec<u8>,
    tensors: Vec<TensorEntry>,
}

impl PayloadWriter {
    fn new() -> Self {
        PayloadWriter {
            buf: Vec::new(),
            tensors: Vec::new(),
        }
    }

    fn push_f32(&mut self, name: &str, rows: usize, cols: usize, data: &[f32]) {
        let offset = self.buf.len();
        for v in data {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        self.tensors.push(TensorEntry {
            name: name.to_string(),
            dtype: "f32".to_string(),
            rows,
            cols,
            offset,
            byte_len: data.len() * 4,
            scale: None,
        });
    }

    fn push_mat(&mut self, name: &str, m: &Mat) {
        self.push_f32(name, m.rows(), m.cols(), m.data());
    }

    fn push_vec(&mut self, name: &str, v: &[f32]) {
        self.push_f32(name, 1, v.len(), v);
    }

    fn push_words(&mut self, name: &str, t: &QuantizedTensor) {
        let offset = self.buf.len();
        let (dtype, scale) = match t.format() {
            NumericFormat::Int8 { scale } => ("int8", Some(*scale)),
            NumericFormat::Fp16 => ("fp16", None),
        };
        for w in t.words() {
            match t.format() {
                NumericFormat::Int8 { .. } => self.buf.push(w.low_byte()),
                NumericFormat::Fp16 => self.buf.extend_from_slice(&w.bits().to_le_bytes()),
            }
        }
        self.tensors.push(TensorEntry {
            name: name.to_string(),
            dtype: dtype.to_string(),
            rows: t.rows(),
            cols: t.cols(),
            offset,
            byte_len: self.buf.len() - offset,
            scale,
        });
    }
}

fn layer_tensor_names(i: usize) -> Vec<String> {
    [
        "ln1_gain", "ln1_bias", "wq", "wk", "wv", "wo", "ln2_gain", "ln2_bias", "w_up", "b_up",
        "w_down", "b_down",
    ]
    .iter()
    .map(|n| format!("layers.{i}.{n}"))
    .collect()
}

/// Serialize a model to `path`. The byte stream is a pure function of the
/// model contents, so identical models produce identical files.
pub fn save_model(model: &TinyLmModel, path: &Path) -> Result<(), IoError> {
    model.validate()?;
    let mut w = PayloadWriter::new();
    w.push_mat("token_embedding", &model.token_embedding);
    w.push_mat("pos_embedding", &model.pos_embedding);
    for (i, l) in model.layers.iter().enumerate() {
        let names = layer_tensor_names(i);
        w.push_vec(&names[0], &l.ln1_gain);
        w.push_vec(&names[1], &l.ln1_bias);
        w.push_mat(&names[2], &l.wq);
        w.push_mat(&names[3], &l.wk);
        w.push_mat(&names[4], &l.wv);
        w.push_mat(&names[5], &l.wo);
        w.push_vec(&names[6], &l.ln2_gain);
        w.push_vec(&names[7], &l.ln2_bias);
        w.push_mat(&names[8], &l.w_up);
        w.push_vec(&names[9], &l.b_up);
        w.push_mat(&names[10], &l.w_down);
        w.push_vec(&names[11], &l.b_down);
    }
    w.push_vec("final_gain", &model.final_gain);
    w.push_vec("final_bias", &model.final_bias);
    w.push_words("output_embedding", &model.output_embedding);

    let manifest = Manifest {
        version: FORMAT_VERSION,
        config: model.config.clone(),
        n_positions: model.n_positions(),
        tensors: w.tensors,
        payload_len: w.buf.len(),
        payload_sha256: hex_digest(&w.buf),
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;

    let mut out = Vec::with_capacity(16 + manifest_bytes.len() + w.buf.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    out.extend_from_slice(&w.buf);
    fs::write(path, out)?;
    Ok(())
}

fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

struct PayloadReader<'a> {
    payload: &'a [u8],
    tensors: &'a [TensorEntry],
}

impl<'a> PayloadReader<'a> {
    fn entry(&self, name: &str) -> Result<&'a TensorEntry, IoError> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| IoError::MissingTensor(name.to_string()))
    }

    fn bytes(&self, e: &TensorEntry) -> Result<&'a [u8], IoError> {
        e.offset
            .checked_add(e.byte_len)
            .filter(|&end| end <= self.payload.len())
            .map(|end| &self.payload[e.offset..end])
            .ok_or_else(|| IoError::PayloadOutOfBounds {
                tensor: e.name.clone(),
            })
    }

    fn f32_tensor(&self, name: &str, rows: usize, cols: usize) -> Result<Vec<f32>, IoError> {
        let e = self.entry(name)?;
        if e.dtype != "f32" {
            return Err(IoError::UnknownFormatTag(e.dtype.clone()));
        }
        let bytes = self.bytes(e)?;
        if e.rows != rows || e.cols != cols || e.byte_len != rows * cols * 4 {
            return Err(IoError::ShapeMismatch {
                tensor: name.to_string(),
                expected_rows: rows,
                expected_cols: cols,
                got: e.byte_len,
            });
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn mat(&self, name: &str, rows: usize, cols: usize) -> Result<Mat, IoError> {
        Ok(Mat::from_vec(
            rows,
            cols,
            self.f32_tensor(name, rows, cols)?,
        ))
    }

    fn vec(&self, name: &str, len: usize) -> Result<Vec<f32>, IoError> {
        self.f32_tensor(name, 1, len)
    }

    fn words(&self, name: &str, rows: usize, cols: usize) -> Result<QuantizedTensor, IoError> {
        let e = self.entry(name)?;
        let bytes = self.bytes(e)?;
        if e.rows != rows || e.cols != cols {
            return Err(IoError::ShapeMismatch {
                tensor: name.to_string(),
                expected_rows: rows,
                expected_cols: cols,
                got: e.byte_len,
            });
        }
        let (format, words) = match e.dtype.as_str() {
            "int8" => {
                let scale = e
                    .scale
                    .ok_or_else(|| IoError::MissingScale(e.name.clone()))?;
                if e.byte_len != rows * cols {
                    return Err(IoError::ShapeMismatch {
                        tensor: name.to_string(),
                        expected_rows: rows,
                        expected_cols: cols,
                        got: e.byte_len,
                    });
                }
                let words = bytes.iter().map(|&b| BitWord::new(b as u16)).collect();
                (NumericFormat::int8(scale)?, words)
            }
            "fp16" => {
                if e.byte_len != rows * cols * 2 {
                    return Err(IoError::ShapeMismatch {
                        tensor: name.to_string(),
                        expected_rows: rows,
                        expected_cols: cols,
                        got: e.byte_len,
                    });
                }
                let words = bytes
                    .chunks_exact(2)
                    .map(|c| BitWord::new(u16::from_le_bytes([c[0], c[1]])))
                    .collect();
                (NumericFormat::Fp16, words)
            }
            other => return Err(IoError::UnknownFormatTag(other.to_string())),
        };
        Ok(QuantizedTensor::from_words(rows, cols, words, format)?)
    }
}

/// Load a model saved by [`save_model`], verifying the payload checksum and
/// every declared shape. Bit-exact inverse of `save_model`.
pub fn load_model(path: &Path) -> Result<TinyLmModel, IoError> {
    let data = fs::read(path)?;
    if data.len() < 16 || &data[..8] != MAGIC {
        return Err(IoError::BadMagic);
    }
    let mlen = u64::from_le_bytes(data[8..16].try_into().unwrap()) as usize;
    if 16 + mlen > data.len() {
        return Err(IoError::BadMagic);
    }
    let manifest: Manifest = serde_json::from_slice(&data[16..16 + mlen])?;
    if manifest.version != FORMAT_VERSION {
        return Err(IoError::UnsupportedVersion(manifest.version));
    }
    let payload = &data[16 + mlen..];
    if payload.len() != manifest.payload_len || hex_digest(payload) != manifest.payload_sha256 {
        return Err(IoError::ChecksumMismatch);
    }

    let cfg = manifest.config.clone();
    cfg.validate()?;
    let r = PayloadReader {
        payload,
        tensors: &manifest.tensors,
    };
    let d = cfg.d_model;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        let names = layer_tensor_names(i);
        layers.push(TransformerLayer {
            ln1_gain: r.vec(&names[0], d)?,
            ln1_bias: r.vec(&names[1], d)?,
            wq: r.mat(&names[2], d, d)?,
            wk: r.mat(&names[3], d, d)?,
            wv: r.mat(&names[4], d, d)?,
            wo: r.mat(&names[5], d, d)?,
            ln2_gain: r.vec(&names[6], d)?,
            ln2_bias: r.vec(&names[7], d)?,
            w_up: r.mat(&names[8], cfg.d_ff, d)?,
            b_up: r.vec(&names[9], cfg.d_ff)?,
            w_down: r.mat(&names[10], d, cfg.d_ff)?,
            b_down: r.vec(&names[11], d)?,
        });
    }
    let model = TinyLmModel {
        token_embedding: r.mat("token_embedding", cfg.vocab_size, d)?,
        pos_embedding: r.mat("pos_embedding", manifest.n_positions, d)?,
        layers,
        final_gain: r.vec("final_gain", d)?,
        final_bias: r.vec("final_bias", d)?,
        output_embedding: r.words("output_embedding", cfg.vocab_size, d)?,
        config: cfg,
    };
    model.validate()?;
    Ok(model)
}

/// One pre-tokenized prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptEntry {
    pub id: String,
    pub tokens: Vec<Token>,
}

/// An ordered prompt corpus; JSONL on disk, one `{"id", "tokens"}` object per
/// line.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptCorpus {
    pub entries: Vec<PromptEntry>,
}

impl PromptCorpus {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// First `n_search` entries are the search prompts, the rest (at least
    /// one) the evaluation prompts, order preserved.
    pub fn split(&self, n_search: usize) -> Result<(&[PromptEntry], &[PromptEntry]), IoError> {
        if n_search == 0 || n_search >= self.entries.len() {
            return Err(IoError::InvalidSplit {
                n_search,
                total: self.entries.len(),
            });
        }
        Ok(self.entries.split_at(n_search))
    }

    pub fn validate_vocab(&self, vocab: usize) -> Result<(), IoError> {
        for e in &self.entries {
            if let Some(&t) = e.tokens.iter().find(|&&t| t as usize >= vocab) {
                return Err(IoError::TokenOutOfVocab {
                    id: e.id.clone(),
                    token: t,
                    vocab,
                });
            }
        }
        Ok(())
    }

    /// Deterministic synthetic corpus: `count` prompts of seeded random
    /// tokens with lengths drawn uniformly from `len_range`, skipping the
    /// token ids in `exclude` (typically the EOS id).
    pub fn synthetic(
        seed: u64,
        count: usize,
        len_range: (usize, usize),
        vocab: usize,
        exclude: &[Token],
    ) -> Self {
        use rand::Rng;
        assert!(len_range.0 >= 1 && len_range.0 <= len_range.1);
        assert!(vocab > exclude.len());
        let mut rng = crate::model::derive_rng(seed, "prompts", &[]);
        let mut entries = Vec::with_capacity(count);
        for i in 0..count {
            let len = rng.random_range(len_range.0..=len_range.1);
            let mut tokens = Vec::with_capacity(len);
            while tokens.len() < len {
                let t = rng.random_range(0..vocab as Token);
                if !exclude.contains(&t) {
                    tokens.push(t);
                }
            }
            entries.push(PromptEntry {
                id: format!("prompt-{i:04}"),
                tokens,
            });
        }
        PromptCorpus { entries }
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }
}

/// Parse a JSONL prompt corpus. Blank lines are skipped; anything else that
/// fails to parse reports its 1-based line number.
pub fn load_prompts(path: &Path) -> Result<PromptCorpus, IoError> {
    let text = fs::read_to_string(path)?;
    let mut entries: Vec<PromptEntry> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: PromptEntry =
            serde_json::from_str(line).map_err(|e| IoError::MalformedLine {
                line: idx + 1,
                message: e.to_string(),
            })?;
        if entry.tokens.is_empty() {
            return Err(IoError::MalformedLine {
                line: idx + 1,
                message: format!("prompt {:?} has no tokens", entry.id),
            });
        }
        if !seen.insert(entry.id.clone()) {
            return Err(IoError::DuplicateId {
                id: entry.id,
                line: idx + 1,
            });
        }
        entries.push(entry);
    }
    if entries.is_empty() {
        return Err(IoError::EmptyCorpus);
    }
    Ok(PromptCorpus { entries })
}
