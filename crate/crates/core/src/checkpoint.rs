//! Checkpoint files: `FDCK` magic, u32 LE format version, u64 LE header
//! length, a JSON header, then the stored parameters as f64 LE.
//!
//! A base checkpoint stores every parameter. A finetuned checkpoint stores
//! only the finetuned groups and refers to its base by path and content
//! hash; loading it verifies that the base's frozen parts are unchanged.

use std::fs;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{DenoiserArch, DenoiserModel, ParamGroup};

pub const MAGIC: &[u8; 4] = b"FDCK";
pub const FORMAT_VERSION: u32 = 1;

const ALL_GROUPS: [ParamGroup; 5] = [
    ParamGroup::Encoder,
    ParamGroup::NullEmbedding,
    ParamGroup::Prefix,
    ParamGroup::Denoiser,
    ParamGroup::Adapter,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseRef {
    pub path: PathBuf,
    /// Hash of every base parameter.
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub arch: DenoiserArch,
    pub tokens: Vec<Vec<f64>>,
    pub stored_groups: Vec<ParamGroup>,
    pub stored_ranges: Vec<Range<usize>>,
    pub total_params: usize,
    pub base: Option<BaseRef>,
    /// Hash of the parameter groups that were not stored.
    pub frozen_hash: String,
    pub config: RunConfig,
    pub iteration: usize,
    pub metrics: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub values: Vec<f64>,
}

fn frozen_groups(stored: &[ParamGroup]) -> Vec<ParamGroup> {
    ALL_GROUPS
        .iter()
        .copied()
        .filter(|g| !stored.contains(g))
        .collect()
}

impl Checkpoint {
    /// Captures `groups` of `model`; an empty `groups` with no base stores
    /// everything.
    pub fn capture(
        model: &DenoiserModel,
        groups: &[ParamGroup],
        base: Option<(&Path, &DenoiserModel)>,
        config: &RunConfig,
        iteration: usize,
        metrics: serde_json::Value,
    ) -> Self {
        let stored_groups: Vec<ParamGroup> = if base.is_none() {
            ALL_GROUPS.to_vec()
        } else {
            groups.to_vec()
        };
        let stored_ranges: Vec<Range<usize>> = model
            .segments()
            .iter()
            .filter(|s| stored_groups.contains(&s.group))
            .map(|s| s.range.clone())
            .collect();
        let values = stored_ranges
            .iter()
            .flat_map(|r| model.params()[r.clone()].iter().copied())
            .collect();
        let frozen_hash = match base {
            Some((_, b)) => b.content_hash(&frozen_groups(&stored_groups)),
            None => model.content_hash(&frozen_groups(&stored_groups)),
        };
        let header = CheckpointHeader {
            arch: model.arch().clone(),
            tokens: model.tokens().to_vec(),
            stored_groups,
            stored_ranges,
            total_params: model.params().len(),
            base: base.map(|(p, b)| BaseRef {
                path: p.to_path_buf(),
                hash: b.content_hash(&ALL_GROUPS),
            }),
            frozen_hash,
            config: config.clone(),
            iteration,
            metrics,
        };
        Self { header, values }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&self.header)?;
        let mut f = fs::File::create(path)?;
        f.write_all(MAGIC)?;
        f.write_all(&FORMAT_VERSION.to_le_bytes())?;
        f.write_all(&(header.len() as u64).to_le_bytes())?;
        f.write_all(&header)?;
        let mut blob = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&blob)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint(format!(
                "{} is not a checkpoint",
                path.display()
            )));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() < hlen || (body.len() - hlen) % 8 != 0 {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&body[..hlen])?;
        let values: Vec<f64> = body[hlen..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let expected: usize = header.stored_ranges.iter().map(|r| r.len()).sum();
        if values.len() != expected {
            return Err(Error::Checkpoint(format!(
                "expected {expected} stored values, found {}",
                values.len()
            )));
        }
        Ok(Self { header, values })
    }

    /// Rebuilds the model, loading the referenced base when needed.
    pub fn model(&self) -> Result<DenoiserModel> {
        let h = &self.header;
        let mut params = match &h.base {
            None => vec![0.0; h.total_params],
            Some(b) => {
                let base = Checkpoint::read(&b.path)?.model()?;
                if base.content_hash(&ALL_GROUPS) != b.hash {
                    return Err(Error::Checkpoint(format!(
                        "base {} changed since this checkpoint was written",
                        b.path.display()
                    )));
                }
                if base.content_hash(&frozen_groups(&h.stored_groups)) != h.frozen_hash {
                    return Err(Error::Checkpoint(
                        "frozen parameters do not match the recorded hash".into(),
                    ));
                }
                let mut p = base.params().to_vec();
                p.resize(h.total_params, 0.0);
                p
            }
        };
        if params.len() != h.total_params {
            return Err(Error::Checkpoint("parameter count mismatch".into()));
        }
        let mut it = self.values.iter();
        for r in &h.stored_ranges {
            if r.end > params.len() {
                return Err(Error::Checkpoint(
                    "stored range outside the parameter vector".into(),
                ));
            }
            for p in &mut params[r.clone()] {
                *p = *it.next().unwrap();
            }
        }
        DenoiserModel::from_parts(h.arch.clone(), h.tokens.clone(), params)
    }
}
