//! Checkpoint file: `"MMCK"`, u32 version, u64 descriptor length, the JSON
//! descriptor (architecture, training config, permutation set), then every
//! parameter in registration order as little-endian f64.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{ArchConfig, MultimodalNet};
use crate::objective::TrainConfig;
use crate::pretext::PermutationSet;
use crate::seeded;

const MAGIC: &[u8; 4] = b"MMCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub net: MultimodalNet,
    pub perm_set: PermutationSet,
}

#[derive(Serialize, Deserialize)]
struct Descriptor {
    arch: ArchConfig,
    config: TrainConfig,
    perm_set: PermutationSet,
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Format {
        path: Default::default(),
        reason: reason.into(),
    }
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(bad("truncated checkpoint"));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let descriptor = serde_json::to_vec(&Descriptor {
            arch: self.net.arch.clone(),
            config: self.config.clone(),
            perm_set: self.perm_set.clone(),
        })?;
        let mut out = Vec::with_capacity(16 + descriptor.len() + 8 * self.net.params.scalar_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(descriptor.len() as u64).to_le_bytes());
        out.extend_from_slice(&descriptor);
        for (_, p) in self.net.params.iter() {
            for v in p.value.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        if take(&mut bytes, 4)? != MAGIC {
            return Err(bad("bad magic bytes"));
        }
        let version = u32::from_le_bytes(take(&mut bytes, 4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(take(&mut bytes, 8)?.try_into().expect("8 bytes")) as usize;
        let d: Descriptor = serde_json::from_slice(take(&mut bytes, len)?)?;
        // Registration order depends only on the architecture, so a fresh
        // net has the same parameter layout; its random values are overwritten.
        let mut net = MultimodalNet::new(d.arch, &mut seeded(0))?;
        let ids: Vec<_> = net.params.ids().collect();
        for id in ids {
            for v in net.params.value_mut(id).as_mut_slice() {
                *v = f64::from_le_bytes(take(&mut bytes, 8)?.try_into().expect("8 bytes"));
            }
        }
        if !bytes.is_empty() {
            return Err(bad(format!("{} trailing bytes", bytes.len())));
        }
        Ok(Self {
            config: d.config,
            net,
            perm_set: d.perm_set,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { reason, .. } => Error::Format {
                path: path.to_path_buf(),
                reason,
            },
            Error::Serde(inner) => Error::Format {
                path: path.to_path_buf(),
                reason: inner.to_string(),
            },
            other => other,
        })
    }
}
