//! Binary embedding files plus a JSON manifest tying them together.
//!
//! Embedding file: `"MMEB"`, u32 version, u64 rows, u64 dim, then row-major
//! little-endian f64 values. Label and domain files: `"MMLB"`, u32 version,
//! u64 count, then little-endian i32 values (`-1` marks an unknown label).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetMeta, Label, MultimodalSample, UNKNOWN_LABEL};
use crate::error::{Error, Result};

const EMBEDDING_MAGIC: &[u8; 4] = b"MMEB";
const LABEL_MAGIC: &[u8; 4] = b"MMLB";
const VERSION: u32 = 1;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityEntry {
    pub name: String,
    pub dim: usize,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub modalities: Vec<ModalityEntry>,
    pub labels_file: String,
    pub domains_file: String,
    pub classes: Vec<String>,
    pub unknown_label: i32,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn encode_embeddings(rows: usize, dim: usize, values: impl Iterator<Item = f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + rows * dim * 8);
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(dim as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn encode_ints(values: &[i32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + values.len() * 4);
    out.extend_from_slice(LABEL_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format_err(self.path, "unexpected end of file"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let found = self.take(4)?;
        if found != magic {
            return Err(format_err(
                self.path,
                format!(
                    "bad magic bytes {:?}, expected {:?}",
                    String::from_utf8_lossy(found),
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        let version = u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(format_err(self.path, format!("unsupported version {version}")));
        }
        Ok(())
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(format_err(
                self.path,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

/// Reads an embedding file into `(rows, dim, values)`.
pub fn read_embeddings(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = read_file(path)?;
    let mut r = Reader {
        path,
        bytes: &bytes,
        pos: 0,
    };
    r.header(EMBEDDING_MAGIC)?;
    let rows = r.u64()? as usize;
    let dim = r.u64()? as usize;
    let count = rows
        .checked_mul(dim)
        .ok_or_else(|| format_err(path, "row count overflow"))?;
    let body = r.take(count.checked_mul(8).ok_or_else(|| format_err(path, "size overflow"))?)?;
    r.finish()?;
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((rows, dim, values))
}

/// Reads a label or domain file.
pub fn read_ints(path: &Path) -> Result<Vec<i32>> {
    let bytes = read_file(path)?;
    let mut r = Reader {
        path,
        bytes: &bytes,
        pos: 0,
    };
    r.header(LABEL_MAGIC)?;
    let n = r.u64()? as usize;
    let body = r.take(n.checked_mul(4).ok_or_else(|| format_err(path, "size overflow"))?)?;
    r.finish()?;
    Ok(body
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

/// Writes `dataset` under `dir` (created if missing) and returns the manifest.
pub fn write_manifest(dataset: &Dataset, dir: &Path) -> Result<Manifest> {
    dataset.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut modalities = Vec::new();
    for (k, (name, &dim)) in dataset
        .meta
        .modality_names
        .iter()
        .zip(&dataset.meta.modality_dims)
        .enumerate()
    {
        let file = format!("modality_{k}.mmeb");
        let values = dataset.samples.iter().flat_map(|s| s.features[k].iter().copied());
        write_file(&dir.join(&file), &encode_embeddings(dataset.len(), dim, values))?;
        modalities.push(ModalityEntry {
            name: name.clone(),
            dim,
            file,
        });
    }
    let labels: Vec<i32> = dataset.samples.iter().map(|s| s.label.to_i32()).collect();
    let domains: Vec<i32> = dataset.samples.iter().map(|s| s.domain as i32).collect();
    write_file(&dir.join("labels.mmlb"), &encode_ints(&labels))?;
    write_file(&dir.join("domains.mmlb"), &encode_ints(&domains))?;
    let manifest = Manifest {
        modalities,
        labels_file: "labels.mmlb".into(),
        domains_file: "domains.mmlb".into(),
        classes: dataset.meta.class_names.clone(),
        unknown_label: UNKNOWN_LABEL,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    write_file(&path, json.as_bytes())?;
    Ok(manifest)
}

/// Reads a manifest (or a directory containing `manifest.json`) back into a
/// dataset. Paths inside the manifest resolve relative to its directory.
pub fn read_manifest(path: &Path) -> Result<Dataset> {
    let path: PathBuf = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let base = path.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| format_err(&path, e.to_string()))?;
    if manifest.modalities.is_empty() {
        return Err(format_err(&path, "manifest lists no modalities"));
    }

    let labels_path = base.join(&manifest.labels_file);
    let labels = read_ints(&labels_path)?;
    let domains_path = base.join(&manifest.domains_file);
    let domains = read_ints(&domains_path)?;
    let n = labels.len();
    if domains.len() != n {
        return Err(format_err(
            &domains_path,
            format!("{} rows but labels file has {n}", domains.len()),
        ));
    }

    let mut features: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(manifest.modalities.len()); n];
    for m in &manifest.modalities {
        let file = base.join(&m.file);
        let (rows, dim, values) = read_embeddings(&file)?;
        if rows != n {
            return Err(format_err(&file, format!("{rows} rows but labels file has {n}")));
        }
        if dim != m.dim {
            return Err(format_err(&file, format!("dim {dim} but manifest says {}", m.dim)));
        }
        if dim == 0 {
            return Err(format_err(&file, "zero-width modality"));
        }
        for (slot, row) in features.iter_mut().zip(values.chunks_exact(dim)) {
            slot.push(row.to_vec());
        }
    }

    let mut samples = Vec::with_capacity(n);
    for ((feat, &label), &domain) in features.into_iter().zip(&labels).zip(&domains) {
        let label = if label == manifest.unknown_label {
            Label::Unknown
        } else {
            Label::from_i32(label).map_err(|e| format_err(&labels_path, e.to_string()))?
        };
        let domain = u32::try_from(domain)
            .map_err(|_| format_err(&domains_path, format!("negative domain id {domain}")))?;
        samples.push(MultimodalSample {
            features: feat,
            label,
            domain,
        });
    }
    let meta = DatasetMeta {
        class_names: manifest.classes.clone(),
        modality_names: manifest.modalities.iter().map(|m| m.name.clone()).collect(),
        modality_dims: manifest.modalities.iter().map(|m| m.dim).collect(),
    };
    Dataset::new(samples, meta)
}
