//! Checkpoint container and per-head weight access.
//!
//! Checkpoints live in a flat `HWS1` container:
//!
//! ```text
//! "HWS1" | header length (u64 LE) | JSON header (UTF-8) | payload (LE values)
//! ```
//!
//! The header lists every tensor (sorted by name) with its dtype, shape,
//! byte offset into the payload and byte length. Offsets are contiguous, so a
//! store has exactly one serialized form; the loader rejects any header that
//! is not in that canonical form, which makes `save(load(f)) == f` hold for
//! every file the loader accepts.
//!
//! Fused attention projections are laid out so that `x · W` projects a row
//! vector. Head `h` owns the contiguous column block `[h·d, (h+1)·d)` of
//! `wq`/`wk`/`wv` and the matching row block of `wo`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"HWS1";
pub const HEAD_LAYOUT: &str = "contiguous";

/// Attention projections of one layer, in q, k, v, o order.
pub const ATTN_PROJECTIONS: [&str; 4] = ["wq", "wk", "wv", "wo"];
/// FFN projections of one layer.
pub const FFN_PROJECTIONS: [&str; 3] = ["gate", "up", "down"];
pub const EMBED_NAME: &str = "embed.tok";
pub const HEAD_OUT_NAME: &str = "head.out";

pub fn attn_name(layer: usize, proj: &str) -> String {
    format!("layer.{layer}.attn.{proj}")
}

pub fn ffn_name(layer: usize, proj: &str) -> String {
    format!("layer.{layer}.ffn.{proj}")
}

/// Whether `name` belongs to the canonical naming scheme.
pub fn is_canonical_name(name: &str) -> bool {
    if name == EMBED_NAME || name == HEAD_OUT_NAME {
        return true;
    }
    let mut parts = name.split('.');
    let (Some("layer"), Some(idx), Some(block), Some(proj), None) = (
        parts.next(),
        parts.next(),
        parts.next(),
        parts.next(),
        parts.next(),
    ) else {
        return false;
    };
    let index_ok = !idx.is_empty()
        && idx.bytes().all(|b| b.is_ascii_digit())
        && (idx == "0" || !idx.starts_with('0'));
    index_ok
        && match block {
            "attn" => ATTN_PROJECTIONS.contains(&proj),
            "ffn" => FFN_PROJECTIONS.contains(&proj),
            _ => false,
        }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }
}

/// A dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} vs {} values",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_matrix(m: &Array2<f64>) -> Self {
        let shape = vec![m.nrows(), m.ncols()];
        let data = m.iter().copied().collect();
        Self {
            shape,
            data: TensorData::F64(data),
        }
    }

    pub fn zeros_like_f64(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: TensorData::F64(vec![0.0; self.data.len()]),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut TensorData {
        &mut self.data
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_f64_slice(&self) -> Option<&[f64]> {
        match &self.data {
            TensorData::F64(v) => Some(v),
            TensorData::F32(_) => None,
        }
    }

    pub fn as_f64_slice_mut(&mut self) -> Option<&mut [f64]> {
        match &mut self.data {
            TensorData::F64(v) => Some(v),
            TensorData::F32(_) => None,
        }
    }

    /// Two-dimensional copy of the values, widened to f64.
    pub fn to_matrix(&self) -> Option<Array2<f64>> {
        let [rows, cols] = self.shape[..] else {
            return None;
        };
        Array2::from_shape_vec((rows, cols), self.data.to_f64_vec()).ok()
    }
}

/// Coordinates of one attention head, ordered by layer then head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadRef {
    pub layer: usize,
    pub head: usize,
}

impl HeadRef {
    pub fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }

    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if self.layer >= cfg.num_layers || self.head >= cfg.heads_per_layer {
            return Err(Error::HeadOutOfRange(
                *self,
                cfg.num_layers,
                cfg.heads_per_layer,
            ));
        }
        Ok(())
    }

    /// All heads of a model in lexicographic order.
    pub fn all(cfg: &ModelConfig) -> impl Iterator<Item = HeadRef> + '_ {
        (0..cfg.num_layers)
            .flat_map(move |l| (0..cfg.heads_per_layer).map(move |h| HeadRef::new(l, h)))
    }
}

impl fmt::Display for HeadRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.layer, self.head)
    }
}

/// The weights owned by a single head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSlices {
    /// D × d_q
    pub wq: Array2<f64>,
    /// D × d_k
    pub wk: Array2<f64>,
    /// D × d_v
    pub wv: Array2<f64>,
    /// d_v × D
    pub wo: Array2<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    head_layout: String,
    config: Option<ModelConfig>,
    tensors: Vec<HeaderEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderEntry {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

/// Named dense tensors of one checkpoint, plus the config they were built for.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorStore {
    config: Option<ModelConfig>,
    tensors: BTreeMap<String, Tensor>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Accept tensor names outside the canonical scheme.
    pub allow_extra: bool,
}

impl TensorStore {
    pub fn new(config: Option<ModelConfig>) -> Self {
        Self {
            config,
            tensors: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> Option<&ModelConfig> {
        self.config.as_ref()
    }

    pub fn set_config(&mut self, config: Option<ModelConfig>) {
        self.config = config;
    }

    /// The embedded config, or `InvalidConfig` when the file carries none.
    pub fn require_config(&self) -> Result<ModelConfig> {
        self.config
            .ok_or_else(|| Error::InvalidConfig("checkpoint header carries no config".into()))
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// A 2-D tensor widened to f64, checked against the expected shape.
    pub fn matrix(&self, name: &str, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let t = self.get(name)?;
        if t.shape() != [rows, cols] {
            return Err(Error::ShapeMismatch(name.to_string()));
        }
        Ok(t.to_matrix().expect("2-D shape checked above"))
    }

    /// A zero-filled f64 store with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), t.zeros_like_f64()))
                .collect(),
        }
    }

    /// Checks that every engine tensor named by `cfg` exists with the right shape.
    pub fn validate_against(&self, cfg: &ModelConfig) -> Result<()> {
        for (name, shape) in expected_shapes(cfg) {
            if let Some(t) = self.tensors.get(&name) {
                if t.shape() != shape.as_slice() {
                    return Err(Error::ShapeMismatch(name));
                }
            }
        }
        for name in self.tensors.keys() {
            if let Some(layer) = layer_of(name) {
                if layer >= cfg.num_layers {
                    return Err(Error::ShapeMismatch(name.clone()));
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let nbytes = (t.len() * t.dtype().size()) as u64;
            entries.push(HeaderEntry {
                name: name.clone(),
                dtype: t.dtype(),
                shape: t.shape().to_vec(),
                offset,
                nbytes,
            });
            offset += nbytes;
        }
        let header = serde_json::to_vec(&Header {
            head_layout: HEAD_LAYOUT.to_string(),
            config: self.config,
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(12 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            match t.data() {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], opts: LoadOptions) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::MagicMismatch);
        }
        let len_bytes: [u8; 8] = bytes
            .get(4..12)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| Error::BadHeader("missing header length".into()))?;
        let header_len = usize::try_from(u64::from_le_bytes(len_bytes))
            .map_err(|_| Error::BadHeader("header length overflows".into()))?;
        let header_bytes = bytes
            .get(12..12usize.saturating_add(header_len))
            .ok_or_else(|| Error::BadHeader("header extends past end of file".into()))?;
        let header: Header = serde_json::from_slice(header_bytes)
            .map_err(|e| Error::BadHeader(e.to_string()))?;
        if header.head_layout != HEAD_LAYOUT {
            return Err(Error::BadHeader(format!(
                "unsupported head_layout `{}`",
                header.head_layout
            )));
        }
        if serde_json::to_vec(&header)? != header_bytes {
            return Err(Error::BadHeader("header is not in canonical form".into()));
        }
        if let Some(cfg) = &header.config {
            cfg.validate()?;
        }

        let payload = &bytes[12 + header_len..];
        let mut store = TensorStore::new(header.config);
        let mut expected_offset = 0u64;
        let mut prev_name: Option<&str> = None;
        for entry in &header.tensors {
            let name = entry.name.as_str();
            if prev_name.is_some_and(|p| p >= name) {
                return Err(Error::BadHeader("tensors are not sorted by unique name".into()));
            }
            prev_name = Some(name);
            if !opts.allow_extra && !is_canonical_name(name) {
                return Err(Error::UnknownTensor(name.to_string()));
            }
            let count = entry.shape.iter().product::<usize>();
            if (count * entry.dtype.size()) as u64 != entry.nbytes {
                return Err(Error::ShapeMismatch(name.to_string()));
            }
            if entry.offset != expected_offset {
                return Err(Error::BadHeader(format!("tensor `{name}` is not contiguous")));
            }
            let start = entry.offset as usize;
            let end = start + entry.nbytes as usize;
            let raw = payload
                .get(start..end)
                .ok_or_else(|| Error::TruncatedData(name.to_string()))?;
            let data = match entry.dtype {
                Dtype::F32 => TensorData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                Dtype::F64 => TensorData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
            };
            store.insert(name, Tensor::new(entry.shape.clone(), data)?);
            expected_offset += entry.nbytes;
        }
        if payload.len() as u64 != expected_offset {
            return Err(Error::BadHeader(format!(
                "{} trailing payload bytes",
                payload.len() as u64 - expected_offset
            )));
        }
        if let Some(cfg) = &store.config {
            store.validate_against(cfg)?;
        }
        Ok(store)
    }
}

pub fn load_store(path: impl AsRef<Path>) -> Result<TensorStore> {
    load_store_with(path, LoadOptions::default())
}

pub fn load_store_with(path: impl AsRef<Path>, opts: LoadOptions) -> Result<TensorStore> {
    let bytes = fs::read(path)?;
    TensorStore::from_bytes(&bytes, opts)
}

pub fn save_store(store: &TensorStore, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, store.to_bytes()?)?;
    Ok(())
}

fn layer_of(name: &str) -> Option<usize> {
    name.strip_prefix("layer.")?.split('.').next()?.parse().ok()
}

/// Names and shapes of every tensor the engine expects for `cfg`.
pub fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.embed_dim;
    let h = cfg.heads_per_layer;
    let mut out = vec![
        (EMBED_NAME.to_string(), vec![cfg.vocab_size, d]),
        (HEAD_OUT_NAME.to_string(), vec![d, cfg.vocab_size]),
    ];
    for l in 0..cfg.num_layers {
        out.push((attn_name(l, "wq"), vec![d, h * cfg.head_dim_q]));
        out.push((attn_name(l, "wk"), vec![d, h * cfg.head_dim_k]));
        out.push((attn_name(l, "wv"), vec![d, h * cfg.head_dim_v]));
        out.push((attn_name(l, "wo"), vec![h * cfg.head_dim_v, d]));
        out.push((ffn_name(l, "gate"), vec![d, cfg.ffn_dim]));
        out.push((ffn_name(l, "up"), vec![d, cfg.ffn_dim]));
        out.push((ffn_name(l, "down"), vec![cfg.ffn_dim, d]));
    }
    out
}

fn column_block(m: ArrayView2<'_, f64>, start: usize, width: usize) -> Array2<f64> {
    m.slice(ndarray::s![.., start..start + width]).to_owned()
}

fn fused(store: &TensorStore, cfg: &ModelConfig, layer: usize, proj: &str) -> Result<Array2<f64>> {
    let d = cfg.embed_dim;
    let h = cfg.heads_per_layer;
    let name = attn_name(layer, proj);
    match proj {
        "wq" => store.matrix(&name, d, h * cfg.head_dim_q),
        "wk" => store.matrix(&name, d, h * cfg.head_dim_k),
        "wv" => store.matrix(&name, d, h * cfg.head_dim_v),
        "wo" => store.matrix(&name, h * cfg.head_dim_v, d),
        _ => Err(Error::UnknownTensor(name)),
    }
}

/// Extracts the q/k/v column blocks and the output-projection row block owned by `head`.
pub fn head_slices(store: &TensorStore, cfg: &ModelConfig, head: HeadRef) -> Result<HeadSlices> {
    head.check(cfg)?;
    let (l, h) = (head.layer, head.head);
    let wq = fused(store, cfg, l, "wq")?;
    let wk = fused(store, cfg, l, "wk")?;
    let wv = fused(store, cfg, l, "wv")?;
    let wo = fused(store, cfg, l, "wo")?;
    let dv = cfg.head_dim_v;
    Ok(HeadSlices {
        wq: column_block(wq.view(), h * cfg.head_dim_q, cfg.head_dim_q),
        wk: column_block(wk.view(), h * cfg.head_dim_k, cfg.head_dim_k),
        wv: column_block(wv.view(), h * dv, dv),
        wo: wo.slice(ndarray::s![h * dv..(h + 1) * dv, ..]).to_owned(),
    })
}

/// Overwrites every slice owned by `dst` with the values owned by `src`, in place.
pub(crate) fn copy_head(store: &mut TensorStore, cfg: &ModelConfig, src: HeadRef, dst: HeadRef) -> Result<()> {
    src.check(cfg)?;
    dst.check(cfg)?;
    let widths = [cfg.head_dim_q, cfg.head_dim_k, cfg.head_dim_v];
    for (proj, width) in ["wq", "wk", "wv"].into_iter().zip(widths) {
        copy_between(store, &attn_name(src.layer, proj), &attn_name(dst.layer, proj), |s, d| {
            let cols = d.shape()[1];
            let (so, dof) = (src.head * width, dst.head * width);
            for r in 0..d.shape()[0] {
                copy_range(s, d, r * cols + so, r * cols + dof, width);
            }
        })?;
    }
    let dv = cfg.head_dim_v;
    copy_between(store, &attn_name(src.layer, "wo"), &attn_name(dst.layer, "wo"), |s, d| {
        let cols = d.shape()[1];
        copy_range(s, d, src.head * dv * cols, dst.head * dv * cols, dv * cols);
    })
}

/// Overwrites the whole FFN block of layer `dst` with the one of layer `src`.
pub(crate) fn copy_ffn(store: &mut TensorStore, src: usize, dst: usize) -> Result<()> {
    for proj in FFN_PROJECTIONS {
        copy_between(store, &ffn_name(src, proj), &ffn_name(dst, proj), |s, d| {
            copy_range(s, d, 0, 0, d.len());
        })?;
    }
    Ok(())
}

fn copy_range(src: &Tensor, dst: &mut Tensor, from: usize, to: usize, n: usize) {
    match (&src.data, &mut dst.data) {
        (TensorData::F32(s), TensorData::F32(d)) => d[to..to + n].copy_from_slice(&s[from..from + n]),
        (TensorData::F64(s), TensorData::F64(d)) => d[to..to + n].copy_from_slice(&s[from..from + n]),
        _ => unreachable!("dtypes checked by copy_between"),
    }
}

fn copy_between(
    store: &mut TensorStore,
    src: &str,
    dst: &str,
    f: impl FnOnce(&Tensor, &mut Tensor),
) -> Result<()> {
    let s = store.get(src)?;
    let d = store.get(dst)?;
    if s.shape() != d.shape() {
        return Err(Error::ShapeMismatch(dst.to_string()));
    }
    if s.dtype() != d.dtype() {
        return Err(Error::DtypeMismatch(dst.to_string(), d.dtype().name(), s.dtype().name()));
    }
    if src == dst {
        // Same fused tensor: move blocks within it.
        let mut t = store.get(dst)?.clone();
        let snapshot = t.clone();
        f(&snapshot, &mut t);
        *store.get_mut(dst)? = t;
        return Ok(());
    }
    let snapshot = s.clone();
    f(&snapshot, store.get_mut(dst)?);
    Ok(())
}
