//! Multimodal datasets: the synthetic domain-shift benchmark, the binary
//! embedding file format, and stratified splitting.

mod io;
mod split;
mod synth;

pub use io::{read_manifest, write_manifest, Manifest, ModalityEntry};
pub use split::split;
pub use synth::{generate_benchmark, Benchmark, SyntheticConfig, SyntheticWorld};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Integer code of [`Label::Unknown`] in label files.
pub const UNKNOWN_LABEL: i32 = -1;

/// Class label of a sample: a known class index or the open-class marker.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Known(usize),
    Unknown,
}

impl Label {
    pub fn to_i32(self) -> i32 {
        match self {
            Label::Known(c) => c as i32,
            Label::Unknown => UNKNOWN_LABEL,
        }
    }

    pub fn from_i32(v: i32) -> Result<Self> {
        match v {
            UNKNOWN_LABEL => Ok(Label::Unknown),
            c if c >= 0 => Ok(Label::Known(c as usize)),
            other => Err(Error::validation("label", format!("{other} is neither a class index nor -1"))),
        }
    }

    pub fn known(self) -> Option<usize> {
        match self {
            Label::Known(c) => Some(c),
            Label::Unknown => None,
        }
    }

    pub fn is_unknown(self) -> bool {
        self == Label::Unknown
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultimodalSample {
    /// One feature vector per modality, in modality order.
    pub features: Vec<Vec<f64>>,
    pub label: Label,
    pub domain: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    /// Names of the known classes; `Label::Known(c)` names `class_names[c]`.
    pub class_names: Vec<String>,
    pub modality_names: Vec<String>,
    pub modality_dims: Vec<usize>,
}

impl DatasetMeta {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn num_modalities(&self) -> usize {
        self.modality_dims.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<MultimodalSample>,
    pub meta: DatasetMeta,
}

impl Dataset {
    /// Builds a dataset and checks every sample against the metadata.
    pub fn new(samples: Vec<MultimodalSample>, meta: DatasetMeta) -> Result<Self> {
        let ds = Self { samples, meta };
        ds.validate()?;
        Ok(ds)
    }

    /// Like [`Dataset::new`] but allows zero samples. Used for filtered views.
    pub fn new_allow_empty(samples: Vec<MultimodalSample>, meta: DatasetMeta) -> Result<Self> {
        let ds = Self { samples, meta };
        ds.validate_samples()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::validation("dataset", "must contain at least one sample"));
        }
        self.validate_samples()
    }

    fn validate_samples(&self) -> Result<()> {
        if self.meta.modality_names.len() != self.meta.modality_dims.len() {
            return Err(Error::validation(
                "modality_names",
                "one name per modality dimension is required",
            ));
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.features.len() != self.meta.num_modalities() {
                return Err(Error::validation(
                    format!("samples[{i}].features"),
                    format!("{} modalities, expected {}", s.features.len(), self.meta.num_modalities()),
                ));
            }
            for (k, (f, &d)) in s.features.iter().zip(&self.meta.modality_dims).enumerate() {
                if f.len() != d {
                    return Err(Error::validation(
                        format!("samples[{i}].features[{k}]"),
                        format!("dimension {} but modality dim is {d}", f.len()),
                    ));
                }
            }
            if let Label::Known(c) = s.label {
                if c >= self.meta.num_classes() {
                    return Err(Error::validation(
                        format!("samples[{i}].label"),
                        format!("class {c} outside the {} known classes", self.meta.num_classes()),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_modalities(&self) -> usize {
        self.meta.num_modalities()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn has_unknown(&self) -> bool {
        self.samples.iter().any(|s| s.label.is_unknown())
    }

    /// A new dataset containing the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            meta: self.meta.clone(),
        }
    }

    /// Maps every label through `map`, dropping samples mapped to `None`,
    /// and replaces the known-class names.
    pub fn relabel(
        &self,
        class_names: Vec<String>,
        map: impl Fn(Label) -> Option<Label>,
    ) -> Result<Dataset> {
        let samples = self
            .samples
            .iter()
            .filter_map(|s| {
                map(s.label).map(|label| MultimodalSample {
                    label,
                    ..s.clone()
                })
            })
            .collect();
        let meta = DatasetMeta {
            class_names,
            ..self.meta.clone()
        };
        Dataset::new(samples, meta)
    }

    /// Pools several datasets with identical metadata.
    pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::validation("datasets", "nothing to concatenate"))?;
        let mut samples = Vec::new();
        for p in parts {
            if p.meta != first.meta {
                return Err(Error::validation("datasets", "metadata differs between parts"));
            }
            samples.extend(p.samples.iter().cloned());
        }
        Dataset::new(samples, first.meta.clone())
    }

    /// Per-modality feature matrices for the samples at `indices`.
    pub fn modality_matrices(&self, indices: &[usize]) -> Vec<Matrix> {
        (0..self.num_modalities())
            .map(|k| {
                let d = self.meta.modality_dims[k];
                let mut data = Vec::with_capacity(indices.len() * d);
                for &i in indices {
                    data.extend_from_slice(&self.samples[i].features[k]);
                }
                Matrix::from_vec(indices.len(), d, data).expect("validated dims")
            })
            .collect()
    }

    /// Per-modality matrices for every sample.
    pub fn all_matrices(&self) -> Vec<Matrix> {
        let all: Vec<usize> = (0..self.len()).collect();
        self.modality_matrices(&all)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> DatasetMeta {
        DatasetMeta {
            class_names: vec!["a".into(), "b".into()],
            modality_names: vec!["m0".into(), "m1".into()],
            modality_dims: vec![2, 1],
        }
    }

    #[test]
    fn label_codes_round_trip() {
        assert_eq!(Label::from_i32(-1).unwrap(), Label::Unknown);
        assert_eq!(Label::from_i32(4).unwrap(), Label::Known(4));
        assert_eq!(Label::Known(3).to_i32(), 3);
        assert!(Label::from_i32(-2).is_err());
    }

    #[test]
    fn rejects_empty_and_mismatched() {
        assert!(Dataset::new(vec![], meta()).is_err());
        let bad = MultimodalSample {
            features: vec![vec![0.0, 1.0], vec![0.0, 2.0]],
            label: Label::Known(0),
            domain: 0,
        };
        let err = Dataset::new(vec![bad], meta()).unwrap_err();
        assert!(err.to_string().contains("samples[0].features[1]"));
    }

    #[test]
    fn modality_matrices_follow_index_order() {
        let s = |v: f64| MultimodalSample {
            features: vec![vec![v, v], vec![-v]],
            label: Label::Known(0),
            domain: 0,
        };
        let ds = Dataset::new(vec![s(1.0), s(2.0), s(3.0)], meta()).unwrap();
        let m = ds.modality_matrices(&[2, 0]);
        assert_eq!(m[0].as_slice(), &[3.0, 3.0, 1.0, 1.0]);
        assert_eq!(m[1].as_slice(), &[-3.0, -1.0]);
    }
}
