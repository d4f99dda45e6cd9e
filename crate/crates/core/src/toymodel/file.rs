//! Model file (`.nblm`) layout, little-endian:
//!
//! ```text
//! magic "NBLM" | version u16 (1) | reserved u16 (0)
//! header length u32 | header JSON (config + per-layer kind)
//! tensor count u32
//! per tensor: name length u16 | name (UTF-8) | rank u8 | dims u64 × rank
//!             | values f64 × prod(dims), row-major
//! ```
//!
//! Tensor names: `tok_emb [V,d]`, `pos_emb [L,d]`, `final_norm [d]`,
//! `unembed [d,V]` and per layer `layers.{k}.attn_norm`, `.wq`, `.wk`, `.wv`,
//! `.wo`, `.mlp_norm`, `.w_up`, `.w_down`. A linearized layer additionally
//! carries `layers.{k}.linear.weight [d,d]` (out × in) and
//! `layers.{k}.linear.bias [d]`; its attention weights are kept.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{Attention, Block, LayerKind, ToyConfig, ToyTransformer};
use crate::error::{NblError, Result};
use crate::lmmse::LinearMap;

pub const MODEL_MAGIC: [u8; 4] = *b"NBLM";
const MODEL_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ToyConfig,
    layers: Vec<LayerEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LayerEntry {
    Attention,
    Linearized { source_layer: usize, fit_nmse: f64 },
}

struct Tensor {
    dims: Vec<usize>,
    values: Vec<f64>,
}

fn matrix_tensor(m: &DMatrix<f64>) -> Tensor {
    // nalgebra is column-major; the file is row-major.
    let values = m.transpose().as_slice().to_vec();
    Tensor {
        dims: vec![m.nrows(), m.ncols()],
        values,
    }
}

fn vector_tensor(v: &DVector<f64>) -> Tensor {
    Tensor {
        dims: vec![v.len()],
        values: v.as_slice().to_vec(),
    }
}

pub fn write_model<W: Write>(model: &ToyTransformer, mut sink: W) -> Result<()> {
    let header = Header {
        config: model.config,
        layers: model
            .blocks
            .iter()
            .map(|b| match &b.kind {
                LayerKind::Attention => LayerEntry::Attention,
                LayerKind::Linearized(map) => LayerEntry::Linearized {
                    source_layer: map.source_layer,
                    fit_nmse: map.fit_nmse,
                },
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut tensors: Vec<(String, Tensor)> = vec![
        ("tok_emb".into(), matrix_tensor(&model.tok_emb)),
        ("pos_emb".into(), matrix_tensor(&model.pos_emb)),
    ];
    for (k, b) in model.blocks.iter().enumerate() {
        let p = |s: &str| format!("layers.{k}.{s}");
        tensors.push((p("attn_norm"), vector_tensor(&b.attn_norm)));
        tensors.push((p("wq"), matrix_tensor(&b.attn.wq)));
        tensors.push((p("wk"), matrix_tensor(&b.attn.wk)));
        tensors.push((p("wv"), matrix_tensor(&b.attn.wv)));
        tensors.push((p("wo"), matrix_tensor(&b.attn.wo)));
        tensors.push((p("mlp_norm"), vector_tensor(&b.mlp_norm)));
        tensors.push((p("w_up"), matrix_tensor(&b.w_up)));
        tensors.push((p("w_down"), matrix_tensor(&b.w_down)));
        if let LayerKind::Linearized(map) = &b.kind {
            tensors.push((p("linear.weight"), matrix_tensor(&map.weight)));
            tensors.push((p("linear.bias"), vector_tensor(&map.bias)));
        }
    }
    tensors.push(("final_norm".into(), vector_tensor(&model.final_norm)));
    tensors.push(("unembed".into(), matrix_tensor(&model.unembed)));

    let mut buf = Vec::new();
    buf.extend_from_slice(&MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    buf.extend_from_slice(&0u16.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_json);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.dims.len() as u8);
        for &d in &t.dims {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &t.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    sink.write_all(&buf)?;
    sink.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(NblError::Truncated {
                expected: (self.pos + n) as u64,
                actual: self.bytes.len() as u64,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_model<R: Read>(mut source: R) -> Result<ToyTransformer> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4)?.try_into().unwrap();
    if magic != MODEL_MAGIC {
        return Err(NblError::BadMagic(magic));
    }
    let version = cur.u16()?;
    if version != MODEL_VERSION {
        return Err(NblError::UnsupportedVersion(version));
    }
    cur.u16()?;
    let header_len = cur.u32()? as usize;
    let header: Header = serde_json::from_slice(cur.take(header_len)?)?;
    header.config.validate()?;
    if header.layers.len() != header.config.layers {
        return Err(NblError::InvalidHeader(format!(
            "{} layer entries for a {}-layer config",
            header.layers.len(),
            header.config.layers
        )));
    }

    let count = cur.u32()? as usize;
    let mut tensors: HashMap<String, Tensor> = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| NblError::InvalidHeader("tensor name is not UTF-8".into()))?;
        let rank = cur.u8()? as usize;
        let dims = (0..rank)
            .map(|_| cur.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| NblError::InvalidHeader(format!("tensor {name} is too large")))?;
        let raw = cur.take(n.checked_mul(8).ok_or_else(|| NblError::InvalidHeader("tensor too large".into()))?)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(NblError::InvalidHeader(format!("tensor {name} has non-finite values")));
        }
        tensors.insert(name, Tensor { dims, values });
    }
    if cur.pos != bytes.len() {
        return Err(NblError::InvalidHeader("trailing bytes after tensors".into()));
    }

    let cfg = header.config;
    let d = cfg.d_model;
    let t = &mut tensors;
    let tok_emb = take_matrix(t, "tok_emb", cfg.vocab, d)?;
    let pos_emb = take_matrix(t, "pos_emb", cfg.max_len, d)?;
    let unembed = take_matrix(t, "unembed", d, cfg.vocab)?;
    let final_norm = take_vector(t, "final_norm", d)?;
    let mut blocks = Vec::with_capacity(cfg.layers);
    for (k, entry) in header.layers.iter().enumerate() {
        let p = |s: &str| format!("layers.{k}.{s}");
        let kind = match entry {
            LayerEntry::Attention => LayerKind::Attention,
            LayerEntry::Linearized { source_layer, fit_nmse } => LayerKind::Linearized(LinearMap {
                weight: take_matrix(t, &p("linear.weight"), d, d)?,
                bias: take_vector(t, &p("linear.bias"), d)?,
                source_layer: *source_layer,
                fit_nmse: *fit_nmse,
            }),
        };
        blocks.push(Block {
            attn_norm: take_vector(t, &p("attn_norm"), d)?,
            attn: Attention {
                wq: take_matrix(t, &p("wq"), d, d)?,
                wk: take_matrix(t, &p("wk"), d, cfg.kv_dim())?,
                wv: take_matrix(t, &p("wv"), d, cfg.kv_dim())?,
                wo: take_matrix(t, &p("wo"), d, d)?,
            },
            mlp_norm: take_vector(t, &p("mlp_norm"), d)?,
            w_up: take_matrix(t, &p("w_up"), d, cfg.d_ff)?,
            w_down: take_matrix(t, &p("w_down"), cfg.d_ff, d)?,
            kind,
        });
    }
    if let Some(extra) = tensors.keys().min() {
        return Err(NblError::InvalidHeader(format!("unexpected tensor {extra}")));
    }
    Ok(ToyTransformer {
        config: cfg,
        tok_emb,
        pos_emb,
        blocks,
        final_norm,
        unembed,
    })
}

fn take(tensors: &mut HashMap<String, Tensor>, name: &str, dims: &[usize]) -> Result<Vec<f64>> {
    let t = tensors
        .remove(name)
        .ok_or_else(|| NblError::InvalidHeader(format!("missing tensor {name}")))?;
    if t.dims != dims {
        return Err(NblError::DimensionMismatch(format!(
            "tensor {name} has shape {:?}, expected {dims:?}",
            t.dims
        )));
    }
    Ok(t.values)
}

fn take_matrix(tensors: &mut HashMap<String, Tensor>, name: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let values = take(tensors, name, &[rows, cols])?;
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

fn take_vector(tensors: &mut HashMap<String, Tensor>, name: &str, len: usize) -> Result<DVector<f64>> {
    Ok(DVector::from_vec(take(tensors, name, &[len])?))
}

pub fn save_model_file(model: &ToyTransformer, path: &Path) -> Result<()> {
    write_model(model, BufWriter::new(File::create(path)?))
}

pub fn load_model_file(path: &Path) -> Result<ToyTransformer> {
    let file = File::open(path)
        .map_err(|e| NblError::MissingInput(format!("{}: {e}", path.display())))?;
    read_model(BufReader::new(file))
}
