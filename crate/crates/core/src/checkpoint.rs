//! Archive of named `f64` arrays behind a TOML metadata header.
//!
//! Layout: the line `dhvae-ckpt-1`, a line `header <n>`, `n` bytes of TOML,
//! then for every array listed in the header's `arrays` table its values as
//! little-endian `f64`, in listing order.

use std::fs;
use std::path::Path;

use dhvae_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ModelParams;

pub const CHECKPOINT_FORMAT: &str = "dhvae-ckpt-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    seed: u64,
    iteration: u64,
    #[serde(default)]
    meta: toml::Table,
    arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub iteration: u64,
    /// Free-form metadata such as the serialized configuration.
    pub meta: toml::Table,
    pub arrays: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new(seed: u64, iteration: u64) -> Self {
        Checkpoint { seed, iteration, meta: toml::Table::new(), arrays: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) {
        self.arrays.push((name.into(), shape.to_vec(), data));
    }

    /// Adds every array of `params` under `prefix/`.
    pub fn push_params(&mut self, prefix: &str, params: &ModelParams) {
        for (name, t) in params.iter() {
            self.push(format!("{prefix}/{name}"), t.shape(), t.to_vec());
        }
    }

    pub fn array(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.arrays.iter().find(|(n, _, _)| n == name).map(|(_, s, d)| (s.as_slice(), d.as_slice()))
    }

    /// Arrays stored under `prefix/`, as trainable parameters.
    pub fn params(&self, prefix: &str) -> ModelParams {
        let mut p = ModelParams::new();
        let lead = format!("{prefix}/");
        for (name, shape, data) in &self.arrays {
            if let Some(rest) = name.strip_prefix(&lead) {
                p.insert(rest, Tensor::param(data.clone(), shape));
            }
        }
        p
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format: CHECKPOINT_FORMAT.into(),
            seed: self.seed,
            iteration: self.iteration,
            meta: self.meta.clone(),
            arrays: self.arrays.iter().map(|(n, s, _)| ArrayEntry { name: n.clone(), shape: s.clone() }).collect(),
        };
        for (n, s, d) in &self.arrays {
            if s.iter().product::<usize>() != d.len() {
                return Err(Error::Shape(format!("array {n}: shape {s:?} does not hold {} values", d.len())));
            }
        }
        let text = toml::to_string(&header).map_err(|e| Error::Config(format!("checkpoint header: {e}")))?;
        let mut out = format!("{CHECKPOINT_FORMAT}\nheader {}\n", text.len()).into_bytes();
        out.extend_from_slice(text.as_bytes());
        for (_, _, d) in &self.arrays {
            for v in d {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let line = |start: usize| -> Result<(&str, usize)> {
            let rel = bytes[start.min(bytes.len())..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::format(start as u64, "unterminated line"))?;
            let s = std::str::from_utf8(&bytes[start..start + rel]).map_err(|_| Error::format(start as u64, "line is not UTF-8"))?;
            Ok((s, start + rel + 1))
        };
        let (magic, pos) = line(0)?;
        if magic != CHECKPOINT_FORMAT {
            return Err(Error::format(0, format!("unsupported checkpoint format {magic:?}")));
        }
        let (hl, pos2) = line(pos)?;
        let n: usize = hl
            .strip_prefix("header ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(pos as u64, format!("bad header length line {hl:?}")))?;
        let end = pos2
            .checked_add(n)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::format(pos2 as u64, "truncated header"))?;
        let text = std::str::from_utf8(&bytes[pos2..end]).map_err(|_| Error::format(pos2 as u64, "header is not UTF-8"))?;
        let header: Header = toml::from_str(text).map_err(|e| Error::format(pos2 as u64, format!("header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::format(pos2 as u64, format!("header format {:?}", header.format)));
        }
        let mut at = end;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for e in header.arrays {
            let len = e.shape.iter().product::<usize>();
            let stop = at
                .checked_add(len * 8)
                .filter(|&s| s <= bytes.len())
                .ok_or_else(|| Error::format(at as u64, format!("truncated array {}", e.name)))?;
            let data = bytes[at..stop].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            arrays.push((e.name, e.shape, data));
            at = stop;
        }
        if at != bytes.len() {
            return Err(Error::format(at as u64, "trailing bytes"));
        }
        Ok(Checkpoint { seed: header.seed, iteration: header.iteration, meta: header.meta, arrays })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        // Write-then-rename so an interrupted save never clobbers a good file.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
