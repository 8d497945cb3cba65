//! Binary container shared by encoder checkpoints and classifier models.
//!
//! ```text
//! "GEOCLRCK"  u8 version
//! u32 config_len, config (UTF-8 JSON)
//! u32 block_count
//! per block: u32 name_len, name, u32 rank, u64 dims[rank], f64 values
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::encoder::{head_specs, param_specs, EncoderConfig, Parameters};
use super::optim::{OptimizerSettings, OptimizerState};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"GEOCLRCK";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub config: serde_json::Value,
    pub blocks: Vec<(String, Tensor)>,
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        let cfg = serde_json::to_vec(&self.config).expect("json value serializes");
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for (name, t) in &self.blocks {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(Error::corrupt(path, "bad magic header"));
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(Error::corrupt(path, format!("unsupported version {version}")));
        }
        let cfg_len = r.u32()? as usize;
        let config = serde_json::from_slice(r.take(cfg_len)?)
            .map_err(|e| Error::corrupt(path, format!("config block: {e}")))?;
        let count = r.u32()? as usize;
        let mut blocks = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::corrupt(path, "block name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::corrupt(path, "block size overflows"))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::corrupt(path, "block size overflows"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            blocks.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::corrupt(path, "trailing bytes after last block"));
        }
        Ok(Container { config, blocks })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Container::from_bytes(&bytes, path)
    }

    pub fn kind(&self) -> Option<&str> {
        self.config.get("kind").and_then(|k| k.as_str())
    }

    /// Blocks whose names start with `prefix`, with the prefix stripped.
    pub fn blocks_with_prefix(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.blocks
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    pub fn block(&self, name: &str) -> Option<&Tensor> {
        self.blocks.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::corrupt(self.path, "unexpected end of file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Encoder parameters plus everything needed to reuse them.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedEncoder {
    pub config: EncoderConfig,
    pub params: Parameters,
    pub optimizer: Option<OptimizerState>,
    /// Resolved training settings, kept for provenance.
    pub provenance: serde_json::Value,
    /// Non-empty when a classification head (`head.w`, `head.b`) is attached.
    pub class_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct EncoderHeader {
    kind: String,
    encoder: EncoderConfig,
    optimizer: Option<OptimizerSettings>,
    optimizer_step: u64,
    class_names: Vec<String>,
    provenance: serde_json::Value,
}

pub const ENCODER_KIND: &str = "encoder";

impl TrainedEncoder {
    pub fn has_head(&self) -> bool {
        !self.class_names.is_empty()
    }

    pub fn to_container(&self) -> Container {
        let header = EncoderHeader {
            kind: ENCODER_KIND.into(),
            encoder: self.config.clone(),
            optimizer: self.optimizer.as_ref().map(|o| o.settings),
            optimizer_step: self.optimizer.as_ref().map_or(0, |o| o.step),
            class_names: self.class_names.clone(),
            provenance: self.provenance.clone(),
        };
        let mut blocks: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|(n, t)| (format!("param/{n}"), t.clone()))
            .collect();
        if let Some(opt) = &self.optimizer {
            for (prefix, map) in [("opt.m/", &opt.first), ("opt.v/", &opt.second)] {
                for (n, v) in map {
                    blocks.push((
                        format!("{prefix}{n}"),
                        Tensor::new(vec![v.len()], v.clone()).expect("flat"),
                    ));
                }
            }
        }
        Container {
            config: serde_json::to_value(header).expect("header serializes"),
            blocks,
        }
    }

    pub fn from_container(c: &Container, path: &Path) -> Result<Self> {
        if c.kind() != Some(ENCODER_KIND) {
            return Err(Error::corrupt(path, format!("expected an encoder checkpoint, found {:?}", c.kind())));
        }
        let header: EncoderHeader = serde_json::from_value(c.config.clone())
            .map_err(|e| Error::corrupt(path, format!("encoder header: {e}")))?;
        header.encoder.validate()?;
        let mut params = Parameters::new();
        for (n, t) in c.blocks_with_prefix("param/") {
            params.insert(&n, t);
        }
        let mut specs = param_specs(&header.encoder);
        if !header.class_names.is_empty() {
            specs.extend(head_specs(header.encoder.latent_dim, header.class_names.len()));
        }
        params.check_against(&specs)?;
        if params.len() != specs.len() {
            return Err(Error::corrupt(path, "unexpected parameter blocks"));
        }
        let optimizer = header.optimizer.map(|settings| {
            let flat = |prefix| {
                c.blocks_with_prefix(prefix)
                    .into_iter()
                    .map(|(n, t)| (n, t.into_data()))
                    .collect()
            };
            OptimizerState {
                settings,
                step: header.optimizer_step,
                first: flat("opt.m/"),
                second: flat("opt.v/"),
            }
        });
        Ok(TrainedEncoder {
            config: header.encoder,
            params,
            optimizer,
            provenance: header.provenance,
            class_names: header.class_names,
        })
    }
}

pub fn save_checkpoint(encoder: &TrainedEncoder, path: impl AsRef<Path>) -> Result<()> {
    encoder.to_container().write(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainedEncoder> {
    let path = path.as_ref();
    TrainedEncoder::from_container(&Container::read(path)?, path)
}
