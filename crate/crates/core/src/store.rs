//! Checkpoint container and JSONL search histories.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "SNFG" | version: u32 | metadata length: u64 | metadata JSON | payload
//! ```
//!
//! Tensor offsets in the metadata are relative to the start of the payload.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use half::f16;
use ndarray::{Array1, Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::archspace::{ArchPhenotype, ModelDims, SearchSpaceSpec};
use crate::elastic_net::SupernetWeights;
use crate::error::{NasError, Result};
use crate::linas::{EvalRecord, SearchHistory};
use crate::quant::{QuantizedLayer, QuantizedSubnet, QuantizedTensor};

pub const MAGIC: &[u8; 4] = b"SNFG";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F16,
    I8,
}

impl DType {
    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 => 2,
            DType::I8 => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    /// Full-precision (or FP16 export of) supernet or extracted subnet weights.
    Dense,
    /// INT8 decoder linears with FP32 per-channel scales.
    Quantized,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub kind: CheckpointKind,
    pub dims: ModelDims,
    pub space: Option<SearchSpaceSpec>,
    /// `fp32`, `fp16` or `int8`.
    pub precision: String,
    pub seed: u64,
    /// Stored MLP width of every layer.
    pub inter_sizes: Vec<usize>,
    pub tensors: Vec<TensorEntry>,
}

/// A parsed, validated checkpoint file.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: Metadata,
    pub payload: Vec<u8>,
}

impl Checkpoint {
    fn entry(&self, name: &str) -> Result<&TensorEntry> {
        self.meta
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| NasError::Format(format!("missing tensor '{name}'")))
    }

    fn bytes_of(&self, e: &TensorEntry) -> &[u8] {
        &self.payload[e.offset as usize..(e.offset + e.length) as usize]
    }

    /// Any float tensor as f32, checked against `shape`.
    pub fn tensor_f32(&self, name: &str, shape: &[usize]) -> Result<ArrayD<f32>> {
        let e = self.entry(name)?;
        if e.shape != shape {
            return Err(NasError::Format(format!(
                "tensor '{name}' has shape {:?}, expected {shape:?}",
                e.shape
            )));
        }
        let b = self.bytes_of(e);
        let data: Vec<f32> = match e.dtype {
            DType::F32 => b
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            DType::F16 => b
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
            DType::I8 => {
                return Err(NasError::Format(format!("tensor '{name}' is int8, expected float")))
            }
        };
        ArrayD::from_shape_vec(IxDyn(shape), data).map_err(|e| NasError::Format(e.to_string()))
    }

    pub fn tensor_i8(&self, name: &str, shape: &[usize]) -> Result<ArrayD<i8>> {
        let e = self.entry(name)?;
        if e.dtype != DType::I8 || e.shape != shape {
            return Err(NasError::Format(format!(
                "tensor '{name}' is {:?}{:?}, expected i8{shape:?}",
                e.dtype, e.shape
            )));
        }
        let data = self.bytes_of(e).iter().map(|&b| b as i8).collect();
        ArrayD::from_shape_vec(IxDyn(shape), data).map_err(|e| NasError::Format(e.to_string()))
    }
}

/// Accumulates tensors into a payload.
struct Writer {
    entries: Vec<TensorEntry>,
    payload: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self {
            entries: Vec::new(),
            payload: Vec::new(),
        }
    }

    fn push(&mut self, name: String, dtype: DType, shape: &[usize], bytes: impl Iterator<Item = u8>) {
        let offset = self.payload.len() as u64;
        self.payload.extend(bytes);
        self.entries.push(TensorEntry {
            name,
            dtype,
            shape: shape.to_vec(),
            offset,
            length: self.payload.len() as u64 - offset,
        });
    }

    fn float<'a>(&mut self, name: String, shape: &[usize], data: impl Iterator<Item = &'a f32>, dtype: DType) {
        match dtype {
            DType::F16 => {
                self.push(name, dtype, shape, data.flat_map(|x| f16::from_f32(*x).to_le_bytes()))
            }
            _ => self.push(name, DType::F32, shape, data.flat_map(|x| x.to_le_bytes())),
        }
    }

    fn finish(self, mut meta: Metadata) -> Result<Vec<u8>> {
        meta.tensors = self.entries;
        let json = serde_json::to_vec(&meta)?;
        let mut out = Vec::with_capacity(HEADER_LEN + json.len() + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&self.payload);
        Ok(out)
    }
}

/// Serializes dense weights. `fp16` selects half-precision payloads for
/// deployment exports.
pub fn encode_dense(
    weights: &SupernetWeights<f32>,
    space: Option<&SearchSpaceSpec>,
    seed: u64,
    fp16: bool,
) -> Result<Vec<u8>> {
    let dtype = if fp16 { DType::F16 } else { DType::F32 };
    let mut w = Writer::new();
    for (name, t) in weights.tensors() {
        w.float(name, t.shape(), t.iter(), dtype);
    }
    w.finish(Metadata {
        kind: CheckpointKind::Dense,
        dims: weights.dims.clone(),
        space: space.cloned(),
        precision: if fp16 { "fp16" } else { "fp32" }.into(),
        seed,
        inter_sizes: weights.full_phenotype().active_inter_sizes,
        tensors: Vec::new(),
    })
}

pub fn encode_quantized(q: &QuantizedSubnet, space: Option<&SearchSpaceSpec>, seed: u64) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    let f32s = DType::F32;
    w.float("token_embedding".into(), q.token_embedding.shape(), q.token_embedding.iter(), f32s);
    w.float("position_embedding".into(), q.position_embedding.shape(), q.position_embedding.iter(), f32s);
    for (i, l) in q.layers.iter().enumerate() {
        w.float(format!("layers.{i}.attn_norm"), l.attn_norm.shape(), l.attn_norm.iter(), f32s);
        w.float(format!("layers.{i}.mlp_norm"), l.mlp_norm.shape(), l.mlp_norm.iter(), f32s);
        for (n, t) in l.linears() {
            w.push(
                format!("layers.{i}.{n}.values"),
                DType::I8,
                t.values.shape(),
                t.values.iter().map(|&v| v as u8),
            );
            w.float(format!("layers.{i}.{n}.scales"), t.scales.shape(), t.scales.iter(), f32s);
        }
    }
    w.float("final_norm".into(), q.final_norm.shape(), q.final_norm.iter(), f32s);
    w.float("head".into(), q.head.shape(), q.head.iter(), f32s);
    w.finish(Metadata {
        kind: CheckpointKind::Quantized,
        dims: q.dims.clone(),
        space: space.cloned(),
        precision: "int8".into(),
        seed,
        inter_sizes: q.phenotype.active_inter_sizes.clone(),
        tensors: Vec::new(),
    })
}

/// Parses and validates a checkpoint image.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < HEADER_LEN {
        return Err(NasError::Format(format!("file of {} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(NasError::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(NasError::UnsupportedVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let meta_end = (HEADER_LEN as u64)
        .checked_add(meta_len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| NasError::Format("metadata runs past end of file".into()))? as usize;
    let meta: Metadata = serde_json::from_slice(&bytes[HEADER_LEN..meta_end])?;
    let payload = &bytes[meta_end..];

    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(meta.tensors.len());
    for t in &meta.tensors {
        let count = t
            .shape
            .iter()
            .try_fold(1u64, |a, &d| a.checked_mul(d as u64))
            .ok_or(NasError::Overflow("tensor size"))?;
        if count.checked_mul(t.dtype.width() as u64) != Some(t.length) {
            return Err(NasError::Format(format!(
                "tensor '{}' length {} does not match shape {:?} x {}",
                t.name,
                t.length,
                t.shape,
                t.dtype.width()
            )));
        }
        let end = t
            .offset
            .checked_add(t.length)
            .filter(|&e| e <= payload.len() as u64)
            .ok_or_else(|| {
                NasError::Format(format!(
                    "tensor '{}' [{}, +{}) out of bounds of {}-byte payload",
                    t.name,
                    t.offset,
                    t.length,
                    payload.len()
                ))
            })?;
        spans.push((t.offset, end, &t.name));
    }
    spans.sort_unstable();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(NasError::Format(format!("tensors '{}' and '{}' overlap", w[0].2, w[1].2)));
        }
    }
    Ok(Checkpoint {
        meta: meta.clone(),
        payload: payload.to_vec(),
    })
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp: PathBuf = {
        let mut s = path.as_os_str().to_owned();
        s.push(".tmp");
        s.into()
    };
    fs::write(&tmp, bytes).map_err(|e| NasError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| NasError::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| NasError::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        NasError::Format(m) => NasError::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn save_checkpoint(
    weights: &SupernetWeights<f32>,
    space: Option<&SearchSpaceSpec>,
    seed: u64,
    path: &Path,
) -> Result<()> {
    write_atomic(path, &encode_dense(weights, space, seed, false)?)
}

pub fn save_checkpoint_fp16(
    weights: &SupernetWeights<f32>,
    space: Option<&SearchSpaceSpec>,
    seed: u64,
    path: &Path,
) -> Result<()> {
    write_atomic(path, &encode_dense(weights, space, seed, true)?)
}

pub fn save_quantized(q: &QuantizedSubnet, space: Option<&SearchSpaceSpec>, seed: u64, path: &Path) -> Result<()> {
    write_atomic(path, &encode_quantized(q, space, seed)?)
}

/// Rebuilds dense weights from a checkpoint.
pub fn dense_weights(c: &Checkpoint) -> Result<SupernetWeights<f32>> {
    if c.meta.kind != CheckpointKind::Dense {
        return Err(NasError::Format("checkpoint holds quantized weights".into()));
    }
    SupernetWeights::from_tensors(&c.meta.dims, &c.meta.inter_sizes, |name, shape| c.tensor_f32(name, shape))
}

pub fn quantized_subnet(c: &Checkpoint) -> Result<QuantizedSubnet> {
    if c.meta.kind != CheckpointKind::Quantized {
        return Err(NasError::Format("checkpoint holds dense weights".into()));
    }
    let dims = &c.meta.dims;
    let d = dims.hidden_dim;
    let f2 = |name: &str, shape: [usize; 2]| -> Result<Array2<f32>> {
        Ok(c.tensor_f32(name, &shape)?.into_dimensionality().expect("shape checked"))
    };
    let f1 = |name: &str| -> Result<Array1<f32>> {
        Ok(c.tensor_f32(name, &[d])?.into_dimensionality().expect("shape checked"))
    };
    let qt = |name: &str, rows: usize, cols: usize| -> Result<QuantizedTensor> {
        let values = c
            .tensor_i8(&format!("{name}.values"), &[rows, cols])?
            .into_dimensionality()
            .expect("shape checked");
        let scales: Array1<f32> = c
            .tensor_f32(&format!("{name}.scales"), &[cols])?
            .into_dimensionality()
            .expect("shape checked");
        if scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(NasError::Format(format!("{name}: non-positive scale")));
        }
        Ok(QuantizedTensor { values, scales })
    };
    let layers = c
        .meta
        .inter_sizes
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let p = |n: &str| format!("layers.{i}.{n}");
            Ok(QuantizedLayer {
                attn_norm: f1(&p("attn_norm"))?,
                wq: qt(&p("wq"), d, d)?,
                wk: qt(&p("wk"), d, d)?,
                wv: qt(&p("wv"), d, d)?,
                wo: qt(&p("wo"), d, d)?,
                mlp_norm: f1(&p("mlp_norm"))?,
                w_gate: qt(&p("w_gate"), d, s)?,
                w_up: qt(&p("w_up"), d, s)?,
                w_down: qt(&p("w_down"), s, d)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(QuantizedSubnet {
        dims: dims.clone(),
        phenotype: ArchPhenotype {
            active_inter_sizes: c.meta.inter_sizes.clone(),
        },
        token_embedding: f2("token_embedding", [dims.vocab_size, d])?,
        position_embedding: f2("position_embedding", [dims.max_seq_len, d])?,
        layers,
        final_norm: f1("final_norm")?,
        head: f2("head", [d, dims.vocab_size])?,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<(Metadata, SupernetWeights<f32>)> {
    let c = read_checkpoint(path)?;
    let w = dense_weights(&c)?;
    Ok((c.meta, w))
}

pub fn load_quantized(path: &Path) -> Result<(Metadata, QuantizedSubnet)> {
    let c = read_checkpoint(path)?;
    let q = quantized_subnet(&c)?;
    Ok((c.meta, q))
}

/// Appends one record as a single JSON line with one write call.
pub fn append_history(record: &EvalRecord, path: &Path) -> Result<()> {
    let mut line = serde_json::to_vec(record)?;
    line.push(b'\n');
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| NasError::io(path, e))?;
    f.write_all(&line).map_err(|e| NasError::io(path, e))
}

/// Writes a whole history, replacing any existing file.
pub fn write_history(history: &SearchHistory, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for r in &history.records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

/// Loads a JSONL history. A final line without a newline that fails to
/// parse is treated as an interrupted append and dropped with a warning.
pub fn load_history(path: &Path) -> Result<SearchHistory> {
    let f = File::open(path).map_err(|e| NasError::io(path, e))?;
    let mut reader = BufReader::new(f);
    let mut records = Vec::new();
    let mut buf = String::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf).map_err(|e| NasError::io(path, e))?;
        if n == 0 {
            break;
        }
        line_no += 1;
        let complete = buf.ends_with('\n');
        let text = buf.trim_end_matches(['\n', '\r']);
        if text.trim().is_empty() && complete {
            continue;
        }
        match serde_json::from_str::<EvalRecord>(text) {
            Ok(r) => records.push(r),
            Err(_) if !complete => {
                log::warn!("{}: dropping partial trailing line {line_no}", path.display());
            }
            Err(e) => {
                return Err(NasError::HistoryLine {
                    line: line_no,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(SearchHistory {
        id: path.display().to_string(),
        records,
    })
}
