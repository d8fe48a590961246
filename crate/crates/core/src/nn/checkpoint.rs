//! Parameter checkpoints: a little-endian `f64` blob plus a JSON sidecar.
//!
//! `<stem>.bin` is the 8-byte magic `LGDCKPT1` followed by every entry's
//! values as IEEE-754 little-endian doubles, entries back to back in sidecar
//! order. `<stem>.json` lists each entry's name, element offset, length and
//! shape; MLP entries also carry their layer widths and activations.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

use super::mlp::{Activation, Mlp};

pub const MAGIC: &[u8; 8] = b"LGDCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryMeta {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activations: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format: String,
    pub version: u32,
    pub byte_order: String,
    pub dtype: String,
    pub header_bytes: usize,
    pub entries: Vec<EntryMeta>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(EntryMeta, Vec<f64>)>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    fn next_offset(&self) -> usize {
        self.entries.last().map_or(0, |(m, _)| m.offset + m.len)
    }

    pub fn push_tensor(&mut self, name: &str, shape: &[usize], values: &[f64]) -> Result<()> {
        ensure!(
            shape.iter().product::<usize>() == values.len(),
            Dimension,
            "entry {name}: shape {shape:?} does not hold {} values",
            values.len()
        );
        let meta = EntryMeta {
            name: name.to_string(),
            offset: self.next_offset(),
            len: values.len(),
            shape: shape.to_vec(),
            dims: None,
            activations: None,
        };
        self.entries.push((meta, values.to_vec()));
        Ok(())
    }

    pub fn push_mlp(&mut self, name: &str, mlp: &Mlp) {
        let meta = EntryMeta {
            name: name.to_string(),
            offset: self.next_offset(),
            len: mlp.num_params(),
            shape: vec![mlp.num_params()],
            dims: Some(mlp.dims().to_vec()),
            activations: Some(mlp.activations().iter().map(|a| a.code().to_string()).collect()),
        };
        self.entries.push((meta, mlp.params().to_vec()));
    }

    fn entry(&self, name: &str) -> Result<&(EntryMeta, Vec<f64>)> {
        self.entries
            .iter()
            .find(|(m, _)| m.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no entry {name:?}")))
    }

    pub fn tensor(&self, name: &str) -> Result<(&[usize], &[f64])> {
        let (m, v) = self.entry(name)?;
        Ok((&m.shape, v))
    }

    pub fn mlp(&self, name: &str) -> Result<Mlp> {
        let (m, v) = self.entry(name)?;
        let dims = m
            .dims
            .clone()
            .ok_or_else(|| Error::Format(format!("entry {name:?} is not an MLP")))?;
        let acts = m
            .activations
            .as_ref()
            .ok_or_else(|| Error::Format(format!("entry {name:?} has no activations")))?
            .iter()
            .map(|s| Activation::from_code(s))
            .collect::<Result<Vec<_>>>()?;
        Mlp::from_parts(dims, acts, v.clone())
    }

    pub fn sidecar(&self) -> Sidecar {
        Sidecar {
            format: "lgd-checkpoint".into(),
            version: 1,
            byte_order: "little-endian".into(),
            dtype: "f64".into(),
            header_bytes: MAGIC.len(),
            entries: self.entries.iter().map(|(m, _)| m.clone()).collect(),
            meta: self.meta.clone(),
        }
    }

    pub fn to_blob(&self) -> Vec<u8> {
        let mut blob = MAGIC.to_vec();
        for (_, values) in &self.entries {
            for v in values {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        blob
    }

    pub fn from_parts(sidecar: &Sidecar, blob: &[u8]) -> Result<Self> {
        ensure!(
            sidecar.format == "lgd-checkpoint" && sidecar.version == 1,
            Format,
            "unsupported checkpoint format {} v{}",
            sidecar.format,
            sidecar.version
        );
        ensure!(blob.starts_with(MAGIC), Format, "bad checkpoint magic");
        let body = &blob[MAGIC.len()..];
        ensure!(body.len() % 8 == 0, Format, "blob length is not a multiple of 8");
        let values: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut entries = Vec::new();
        for m in &sidecar.entries {
            ensure!(
                m.offset + m.len <= values.len(),
                Format,
                "entry {} runs past the end of the blob",
                m.name
            );
            entries.push((m.clone(), values[m.offset..m.offset + m.len].to_vec()));
        }
        Ok(Self {
            entries,
            meta: sidecar.meta.clone(),
        })
    }

    pub fn paths(stem: &Path) -> (PathBuf, PathBuf) {
        (stem.with_extension("bin"), stem.with_extension("json"))
    }

    /// Writes `<stem>.bin` and `<stem>.json`; returns both paths.
    pub fn save(&self, stem: &Path) -> Result<(PathBuf, PathBuf)> {
        let (bin, json) = Self::paths(stem);
        fs::write(&bin, self.to_blob())?;
        fs::write(&json, serde_json::to_string_pretty(&self.sidecar())? + "\n")?;
        Ok((bin, json))
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (bin, json) = Self::paths(stem);
        let sidecar: Sidecar = serde_json::from_slice(&fs::read(json)?)?;
        Self::from_parts(&sidecar, &fs::read(bin)?)
    }
}
