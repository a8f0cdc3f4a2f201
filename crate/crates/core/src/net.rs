//! The multimodal network: per-modality encoders feeding a joint classifier,
//! per-modality classifiers, cross-modal translators and the jigsaw head.
//!
//! Modalities are indexed from 0. Joint inputs are always concatenated in
//! ascending modality order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Activation, Graph, Mlp, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EncoderKind {
    /// Pass-through; the embedding is the input feature vector.
    Identity,
    /// `hidden_layers` ReLU layers of width `e_k`, then an affine map to `e_k`.
    Mlp { hidden_layers: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input_dims: Vec<usize>,
    pub embed_dims: Vec<usize>,
    pub num_classes: usize,
    /// Number of jigsaw permutation classes.
    pub num_permutations: usize,
    pub encoder: EncoderKind,
    /// Hidden width of both translator hidden layers; `None` means `2·e_i`.
    pub translator_hidden: Option<usize>,
    pub jigsaw_hidden: usize,
}

impl ArchConfig {
    pub fn num_modalities(&self) -> usize {
        self.input_dims.len()
    }

    pub fn joint_dim(&self) -> usize {
        self.embed_dims.iter().sum()
    }

    fn translator_width(&self, i: usize) -> usize {
        self.translator_hidden.unwrap_or(2 * self.embed_dims[i])
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.input_dims.len();
        if m < 1 {
            return Err(Error::validation("input_dims", "at least one modality is required"));
        }
        if self.embed_dims.len() != m {
            return Err(Error::validation(
                "embed_dims",
                format!("{} entries for {m} modalities", self.embed_dims.len()),
            ));
        }
        if self.embed_dims.contains(&0) || self.input_dims.contains(&0) {
            return Err(Error::validation("embed_dims", "dimensions must be positive"));
        }
        if self.encoder == EncoderKind::Identity && self.input_dims != self.embed_dims {
            return Err(Error::validation(
                "encoder",
                "identity encoders need embed_dims equal to input_dims",
            ));
        }
        if self.num_classes < 1 || self.num_permutations < 1 {
            return Err(Error::validation("num_classes", "heads need at least one output"));
        }
        Ok(())
    }

    /// Closed-form parameter count of the architecture.
    pub fn parameter_count(&self) -> usize {
        let affine = |i: usize, o: usize| i * o + o;
        let m = self.num_modalities();
        let c = self.num_classes;
        let mut total = 0;
        for k in 0..m {
            let (d, e) = (self.input_dims[k], self.embed_dims[k]);
            total += match self.encoder {
                EncoderKind::Identity => 0,
                EncoderKind::Mlp { hidden_layers } => {
                    if hidden_layers == 0 {
                        affine(d, e)
                    } else {
                        affine(d, e) + hidden_layers * affine(e, e)
                    }
                }
            };
            total += affine(e, c);
        }
        total += affine(self.joint_dim(), c);
        total += affine(self.joint_dim(), self.jigsaw_hidden)
            + affine(self.jigsaw_hidden, self.num_permutations);
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    let h = self.translator_width(i);
                    total += affine(self.embed_dims[i], h) + affine(h, h) + affine(h, self.embed_dims[j]);
                }
            }
        }
        total
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Translator {
    pub from: usize,
    pub to: usize,
    pub mlp: Mlp,
}

/// Encoders, classifier heads and translators sharing one [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultimodalNet {
    pub arch: ArchConfig,
    pub params: ParamStore,
    encoders: Vec<Option<Mlp>>,
    joint_head: Mlp,
    modality_heads: Vec<Mlp>,
    jigsaw_head: Mlp,
    translators: Vec<Translator>,
}

/// Forward results of a gradient-free pass.
#[derive(Clone, Debug)]
pub struct Outputs {
    pub embeddings: Vec<Matrix>,
    pub joint_logits: Matrix,
    pub joint_probs: Matrix,
}

impl MultimodalNet {
    pub fn new<R: Rng + ?Sized>(arch: ArchConfig, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut params = ParamStore::new();
        let m = arch.num_modalities();
        let mut encoders = Vec::with_capacity(m);
        for k in 0..m {
            let (d, e) = (arch.input_dims[k], arch.embed_dims[k]);
            let enc = match arch.encoder {
                EncoderKind::Identity => None,
                EncoderKind::Mlp { hidden_layers } => {
                    let mut dims = vec![d];
                    dims.extend(std::iter::repeat_n(e, hidden_layers + 1));
                    let group = format!("encoder-{k}");
                    Some(Mlp::new(&mut params, &group, &group, &dims, Activation::Relu, rng)?)
                }
            };
            encoders.push(enc);
        }
        let c = arch.num_classes;
        let joint_head = Mlp::new(
            &mut params,
            "head-joint",
            "head-joint",
            &[arch.joint_dim(), c],
            Activation::Relu,
            rng,
        )?;
        let modality_heads = (0..m)
            .map(|k| {
                let group = format!("head-{k}");
                Mlp::new(&mut params, &group, &group, &[arch.embed_dims[k], c], Activation::Relu, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let jigsaw_head = Mlp::new(
            &mut params,
            "jigsaw-head",
            "jigsaw-head",
            &[arch.joint_dim(), arch.jigsaw_hidden, arch.num_permutations],
            Activation::Relu,
            rng,
        )?;
        let mut translators = Vec::with_capacity(m * m.saturating_sub(1));
        for i in 0..m {
            for j in 0..m {
                if i == j {
                    continue;
                }
                let h = arch.translator_width(i);
                let group = format!("translator-{i}-{j}");
                let mlp = Mlp::new(
                    &mut params,
                    &group,
                    &group,
                    &[arch.embed_dims[i], h, h, arch.embed_dims[j]],
                    Activation::Relu,
                    rng,
                )?;
                translators.push(Translator { from: i, to: j, mlp });
            }
        }
        Ok(Self {
            arch,
            params,
            encoders,
            joint_head,
            modality_heads,
            jigsaw_head,
            translators,
        })
    }

    pub fn num_modalities(&self) -> usize {
        self.arch.num_modalities()
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn encoder(&self, k: usize) -> Option<&Mlp> {
        self.encoders[k].as_ref()
    }

    pub fn joint_head(&self) -> &Mlp {
        &self.joint_head
    }

    pub fn modality_head(&self, k: usize) -> &Mlp {
        &self.modality_heads[k]
    }

    pub fn jigsaw_head(&self) -> &Mlp {
        &self.jigsaw_head
    }

    pub fn translators(&self) -> &[Translator] {
        &self.translators
    }

    pub fn translator(&self, from: usize, to: usize) -> Result<&Translator> {
        if from == to {
            return Err(Error::validation(
                "translator",
                format!("source and target modality are both {from}"),
            ));
        }
        self.translators
            .iter()
            .find(|t| t.from == from && t.to == to)
            .ok_or_else(|| Error::Index {
                op: "translator",
                index: from.max(to) as i64,
                bound: self.num_modalities(),
            })
    }

    /// Embeds every modality: `inputs[k]` is the `n × d_k` feature batch.
    pub fn encode_all(&self, g: &mut Graph, inputs: &[Var]) -> Result<Vec<Var>> {
        if inputs.len() != self.num_modalities() {
            return Err(Error::validation(
                "inputs",
                format!("{} modalities given, network has {}", inputs.len(), self.num_modalities()),
            ));
        }
        let rows = g.shape(inputs[0]).0;
        inputs
            .iter()
            .enumerate()
            .map(|(k, &x)| {
                let (r, d) = g.shape(x);
                if d != self.arch.input_dims[k] || r != rows {
                    return Err(Error::validation(
                        format!("modality {k}"),
                        format!("batch is {r}×{d}, expected {rows}×{}", self.arch.input_dims[k]),
                    ));
                }
                match &self.encoders[k] {
                    Some(mlp) => mlp.forward(g, &self.params, x),
                    None => Ok(x),
                }
            })
            .collect()
    }

    /// Joint-head logits on `[E^0 ‖ … ‖ E^{M-1}]`.
    pub fn joint_logits(&self, g: &mut Graph, embeddings: &[Var]) -> Result<Var> {
        if embeddings.len() != self.num_modalities() {
            return Err(Error::validation(
                "embeddings",
                format!("{} of {} modalities present", embeddings.len(), self.num_modalities()),
            ));
        }
        let joint = g.hcat(embeddings)?;
        self.joint_head.forward(g, &self.params, joint)
    }

    /// `ŷ⁰ = softmax(h([E^0 ‖ … ‖ E^{M-1}]))`.
    pub fn predict_joint(&self, g: &mut Graph, embeddings: &[Var]) -> Result<Var> {
        let logits = self.joint_logits(g, embeddings)?;
        Ok(g.softmax(logits))
    }

    pub fn modality_logits(&self, g: &mut Graph, k: usize, embedding: Var) -> Result<Var> {
        let head = self.modality_heads.get(k).ok_or(Error::Index {
            op: "predict_modality",
            index: k as i64,
            bound: self.num_modalities(),
        })?;
        head.forward(g, &self.params, embedding)
    }

    /// `ŷᵏ = softmax(h_k(Eᵏ))`.
    pub fn predict_modality(&self, g: &mut Graph, k: usize, embedding: Var) -> Result<Var> {
        let logits = self.modality_logits(g, k, embedding)?;
        Ok(g.softmax(logits))
    }

    /// Maps modality `from`'s embedding into modality `to`'s space.
    pub fn translate(&self, g: &mut Graph, from: usize, to: usize, embedding: Var) -> Result<Var> {
        let t = self.translator(from, to)?;
        t.mlp.forward(g, &self.params, embedding)
    }

    pub fn jigsaw_logits(&self, g: &mut Graph, recomposed: Var) -> Result<Var> {
        self.jigsaw_head.forward(g, &self.params, recomposed)
    }

    /// Gradient-free forward pass over raw per-modality feature matrices.
    pub fn infer(&self, inputs: &[Matrix]) -> Result<Outputs> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
        let emb = self.encode_all(&mut g, &vars)?;
        let logits = self.joint_logits(&mut g, &emb)?;
        let joint_logits = g.value(logits).clone();
        Ok(Outputs {
            embeddings: emb.iter().map(|&e| g.value(e).clone()).collect(),
            joint_probs: softmax_rows(&joint_logits),
            joint_logits,
        })
    }

    /// Rebuilds internal indices after deserialization.
    pub fn restore(&mut self) -> Result<()> {
        self.params.reindex()?;
        self.arch.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded;

    pub(crate) fn small_arch() -> ArchConfig {
        ArchConfig {
            input_dims: vec![5, 3, 4],
            embed_dims: vec![4, 6, 2],
            num_classes: 3,
            num_permutations: 5,
            encoder: EncoderKind::Mlp { hidden_layers: 1 },
            translator_hidden: None,
            jigsaw_hidden: 7,
        }
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let arch = small_arch();
        let net = MultimodalNet::new(arch.clone(), &mut seeded(0)).unwrap();
        // encoders: d→e→e; heads: e→C; joint Σe→C; jigsaw Σe→7→5; translators e_i→2e_i→2e_i→e_j
        let enc = (5 * 4 + 4) + (4 * 4 + 4) + (3 * 6 + 6) + (6 * 6 + 6) + (4 * 2 + 2) + (2 * 2 + 2);
        let heads = (4 * 3 + 3) + (6 * 3 + 3) + (2 * 3 + 3);
        let joint = 12 * 3 + 3;
        let jig = (12 * 7 + 7) + (7 * 5 + 5);
        let tr = |ei: usize, ej: usize| {
            let h = 2 * ei;
            ei * h + h + h * h + h + h * ej + ej
        };
        let trans = tr(4, 6) + tr(4, 2) + tr(6, 4) + tr(6, 2) + tr(2, 4) + tr(2, 6);
        let expected = enc + heads + joint + jig + trans;
        assert_eq!(net.params.scalar_count(), expected);
        assert_eq!(arch.parameter_count(), expected);
        assert_eq!(net.translators().len(), 6);
    }

    #[test]
    fn groups_cover_every_component() {
        let net = MultimodalNet::new(small_arch(), &mut seeded(0)).unwrap();
        let groups = net.params.groups();
        for g in ["encoder-0", "encoder-2", "head-joint", "head-1", "jigsaw-head", "translator-2-1"] {
            assert!(groups.iter().any(|x| x == g), "{g} missing");
        }
    }

    #[test]
    fn translate_same_modality_is_an_error() {
        let net = MultimodalNet::new(small_arch(), &mut seeded(0)).unwrap();
        let mut g = Graph::new();
        let e = g.constant(Matrix::zeros(2, 4));
        assert!(net.translate(&mut g, 0, 0, e).is_err());
        assert!(net.predict_modality(&mut g, 3, e).is_err());
    }

    #[test]
    fn encode_all_reports_the_bad_modality() {
        let net = MultimodalNet::new(small_arch(), &mut seeded(0)).unwrap();
        let mut g = Graph::new();
        let xs = [
            g.constant(Matrix::zeros(2, 5)),
            g.constant(Matrix::zeros(2, 9)),
            g.constant(Matrix::zeros(2, 4)),
        ];
        let err = net.encode_all(&mut g, &xs).unwrap_err();
        assert!(err.to_string().contains("modality 1"), "{err}");
    }
}
