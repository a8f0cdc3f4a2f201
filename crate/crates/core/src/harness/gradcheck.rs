use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, ParamStore};
use crate::error::{Error, Result};
use crate::net::{ArchConfig, EncoderKind, MultimodalNet};
use crate::objective::{total_loss_dg, total_loss_dg_frozen, Batch, Toggles, TrainConfig};
use crate::pretext::build_permutation_set;
use crate::tensor::Matrix;
use crate::{child_seed, seeded};

pub const GRAD_CHECK_STEP: f64 = 1e-4;
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;
pub const MAX_GRAD_CHECK_PARAMS: usize = 5000;
/// Denominator floor for relative errors, so entries whose true gradient
/// is zero are judged by absolute error instead.
const REL_FLOOR: f64 = 1e-6;

/// A network small enough to check every parameter by finite differences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckConfig {
    pub input_dims: Vec<usize>,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub jigsaw_parts: usize,
    pub jigsaw_permutations: usize,
    pub batch_size: usize,
    pub encoder_hidden_layers: usize,
    pub jigsaw_hidden: usize,
    pub mask_ratio: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub temperature: f64,
    pub toggles: Toggles,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            input_dims: vec![6, 5],
            embed_dim: 8,
            num_classes: 3,
            jigsaw_parts: 2,
            jigsaw_permutations: 4,
            batch_size: 4,
            encoder_hidden_layers: 1,
            jigsaw_hidden: 8,
            mask_ratio: t.mask_ratio,
            alpha1: t.alpha1,
            alpha2: t.alpha2,
            alpha3: t.alpha3,
            temperature: t.temperature,
            toggles: Toggles::all_on(),
            seed: 0,
        }
    }
}

impl GradCheckConfig {
    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            input_dims: self.input_dims.clone(),
            embed_dims: vec![self.embed_dim; self.input_dims.len()],
            num_classes: self.num_classes,
            num_permutations: self.jigsaw_permutations,
            encoder: EncoderKind::Mlp {
                hidden_layers: self.encoder_hidden_layers,
            },
            translator_hidden: None,
            jigsaw_hidden: self.jigsaw_hidden,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            alpha1: self.alpha1,
            alpha2: self.alpha2,
            alpha3: self.alpha3,
            mask_ratio: self.mask_ratio,
            jigsaw_parts: self.jigsaw_parts,
            jigsaw_permutations: self.jigsaw_permutations,
            temperature: self.temperature,
            batch_size: self.batch_size,
            toggles: self.toggles,
            embed_dim: self.embed_dim,
            encoder_hidden_layers: self.encoder_hidden_layers,
            jigsaw_hidden: self.jigsaw_hidden,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

/// Worst disagreement within one parameter group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub group: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub entries: usize,
    /// Entries whose ±step stencil flipped a ReLU and were not compared.
    pub kink_skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
    pub max_rel_error: f64,
    pub parameters: usize,
    pub loss: f64,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// Checks analytic gradients of the full domain-generalization objective
/// against central finite differences on every parameter.
pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    grad_check_with(cfg, |_, _| {})
}

/// [`grad_check`] with a hook that may tamper with the analytic gradients
/// before comparison.
pub fn grad_check_with(
    cfg: &GradCheckConfig,
    corrupt: impl FnOnce(&mut Gradients, &ParamStore),
) -> Result<GradCheckReport> {
    let train = cfg.train_config();
    train.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::validation("batch_size", "must be positive"));
    }
    let arch = cfg.arch();
    arch.validate()?;
    let count = arch.parameter_count();
    if count >= MAX_GRAD_CHECK_PARAMS {
        return Err(Error::validation(
            "micro-config",
            format!("{count} parameters; finite differences need fewer than {MAX_GRAD_CHECK_PARAMS}"),
        ));
    }
    let mut net = MultimodalNet::new(arch, &mut seeded(child_seed(cfg.seed, 1)))?;
    let perm_set = build_permutation_set(
        cfg.input_dims.len(),
        cfg.jigsaw_parts,
        cfg.jigsaw_permutations,
        &mut seeded(child_seed(cfg.seed, 2)),
    )?;
    let mut data_rng = seeded(child_seed(cfg.seed, 3));
    let inputs = cfg
        .input_dims
        .iter()
        .map(|&d| {
            let data = (0..cfg.batch_size * d).map(|_| data_rng.random_range(-1.0..1.0)).collect();
            Matrix::from_vec(cfg.batch_size, d, data)
        })
        .collect::<Result<Vec<_>>>()?;
    let labels = (0..cfg.batch_size).map(|_| data_rng.random_range(0..cfg.num_classes)).collect();
    let batch = Batch {
        inputs,
        labels: Some(labels),
    };
    let loss_seed = child_seed(cfg.seed, 4);

    let mut g = Graph::new();
    let (loss, parts) = total_loss_dg(&mut g, &net, &batch, &train, &perm_set, &mut seeded(loss_seed))?;
    let mut grads = g.backward(loss, &net.params)?;
    corrupt(&mut grads, &net.params);

    // Head weights are constants of the backward pass, so the perturbed
    // objective keeps them pinned at their unperturbed values.
    let weights = parts.weights.clone();
    let base_pattern = g.relu_pattern();
    let eval = |net: &MultimodalNet| -> Result<(f64, bool)> {
        let mut g = Graph::new();
        let (v, _) =
            total_loss_dg_frozen(&mut g, net, &batch, &train, &perm_set, &weights, &mut seeded(loss_seed))?;
        Ok((g.value(v).item(), g.relu_pattern() == base_pattern))
    };

    let mut groups: BTreeMap<String, GroupError> = BTreeMap::new();
    let ids: Vec<_> = net.params.ids().collect();
    for id in ids {
        let group = net.params.get(id).group.clone();
        let analytic = grads
            .get(id)
            .cloned()
            .ok_or_else(|| Error::MissingGradient(net.params.get(id).name.clone()))?;
        let n = analytic.as_slice().len();
        let entry = groups.entry(group.clone()).or_insert(GroupError {
            group,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            entries: 0,
            kink_skipped: 0,
        });
        for i in 0..n {
            let orig = net.params.value(id).as_slice()[i];
            net.params.value_mut(id).as_mut_slice()[i] = orig + GRAD_CHECK_STEP;
            let (plus, smooth_plus) = eval(&net)?;
            net.params.value_mut(id).as_mut_slice()[i] = orig - GRAD_CHECK_STEP;
            let (minus, smooth_minus) = eval(&net)?;
            net.params.value_mut(id).as_mut_slice()[i] = orig;
            if !(smooth_plus && smooth_minus) {
                // The stencil straddles a ReLU kink; the difference quotient
                // does not estimate the derivative there.
                entry.kink_skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * GRAD_CHECK_STEP);
            let a = analytic.as_slice()[i];
            let abs = (a - numeric).abs();
            if !abs.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient in {}", net.params.get(id).name)));
            }
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            entry.max_abs_error = entry.max_abs_error.max(abs);
            entry.max_rel_error = entry.max_rel_error.max(rel);
            entry.entries += 1;
        }
    }
    let groups: Vec<GroupError> = groups.into_values().collect();
    let max_rel_error = groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        groups,
        max_rel_error,
        parameters: count,
        loss: parts.total,
    })
}
