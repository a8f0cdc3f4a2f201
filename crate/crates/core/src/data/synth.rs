//! Latent-factor generator for multimodal domain-shift benchmarks.
//!
//! Every sample draws a latent `z = μ_c + ε` around its class mean. Domain
//! `d` moves the latent through an affine map `A_d z + σ_dom·b_d` with
//! `A_d = I + σ_dom·R_d`, and modality `k` observes `W_k (A_d z + σ_dom·b_d) + η`.
//! All modalities share `z`, so each one carries information about the others.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetMeta, Label, MultimodalSample};
use crate::error::{Error, Result};
use crate::tensor::Matrix;
use crate::{child_seed, seeded};

/// Variance of the per-sample latent perturbation around its class mean.
pub const LATENT_NOISE_VAR: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_sources: usize,
    pub latent_dim: usize,
    pub modality_dims: Vec<usize>,
    pub n_known: usize,
    pub n_unknown: usize,
    pub samples_per_class: usize,
    pub shift_magnitude: f64,
    pub noise_std: f64,
    /// Standard deviation of the class-mean draws.
    pub class_separation: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    /// The reference benchmark: two sources, three modalities, 7 known + 1 unknown.
    fn default() -> Self {
        Self {
            n_sources: 2,
            latent_dim: 16,
            modality_dims: vec![64, 32, 48],
            n_known: 7,
            n_unknown: 1,
            samples_per_class: 40,
            shift_magnitude: 0.5,
            noise_std: 0.1,
            class_separation: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn num_modalities(&self) -> usize {
        self.modality_dims.len()
    }

    pub fn total_classes(&self) -> usize {
        self.n_known + self.n_unknown
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |f: &str, r: &str| Err(Error::validation(f, r));
        if self.n_sources < 1 {
            return fail("n_sources", "at least one source domain is required");
        }
        if self.modality_dims.len() < 2 {
            return fail("modality_dims", "at least two modalities are required");
        }
        if self.modality_dims.contains(&0) {
            return fail("modality_dims", "every modality needs a positive dimension");
        }
        if self.latent_dim == 0 {
            return fail("latent_dim", "must be positive");
        }
        if self.n_known < 2 {
            return fail("n_known", "at least two known classes are required");
        }
        if self.samples_per_class == 0 {
            return fail("samples_per_class", "must be positive");
        }
        if !(self.shift_magnitude >= 0.0 && self.shift_magnitude.is_finite()) {
            return fail("shift_magnitude", "must be finite and ≥ 0");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail("noise_std", "must be finite and ≥ 0");
        }
        if !(self.class_separation > 0.0 && self.class_separation.is_finite()) {
            return fail("class_separation", "must be finite and > 0");
        }
        Ok(())
    }

    /// Known class `c` is generator class `c + n_unknown`; the first
    /// `n_unknown` generator classes are the open classes.
    pub fn label_of(&self, generator_class: usize) -> Label {
        if generator_class < self.n_unknown {
            Label::Unknown
        } else {
            Label::Known(generator_class - self.n_unknown)
        }
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            class_names: (self.n_unknown..self.total_classes())
                .map(|c| format!("class_{c}"))
                .collect(),
            modality_names: (0..self.num_modalities()).map(|k| format!("modality_{k}")).collect(),
            modality_dims: self.modality_dims.clone(),
        }
    }
}

/// Domain-specific affine map of the latent space.
#[derive(Clone, Debug)]
struct DomainMap {
    linear: Matrix,
    bias: Vec<f64>,
}

/// The fixed parameters of a generated benchmark: class means, modality
/// projections and per-domain shifts.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    cfg: SyntheticConfig,
    class_means: Vec<Vec<f64>>,
    projections: Vec<Matrix>,
    domains: Vec<DomainMap>,
}

const STREAM_MEANS: u64 = 1;
const STREAM_PROJECTIONS: u64 = 2;
const STREAM_DOMAIN_MAP: u64 = 1000;
const STREAM_DOMAIN_SAMPLES: u64 = 2000;

fn gaussian_matrix<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect::<Vec<f64>>();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

impl SyntheticWorld {
    pub fn new(cfg: &SyntheticConfig) -> Result<Self> {
        cfg.validate()?;
        let l = cfg.latent_dim;
        let mut rng = seeded(child_seed(cfg.seed, STREAM_MEANS));
        let class_means = (0..cfg.total_classes())
            .map(|_| {
                (0..l)
                    .map(|_| cfg.class_separation * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                    .collect::<Vec<f64>>()
            })
            .collect();

        let mut rng = seeded(child_seed(cfg.seed, STREAM_PROJECTIONS));
        let proj_std = (1.0 / l as f64).sqrt();
        let projections = cfg
            .modality_dims
            .iter()
            .map(|&d| gaussian_matrix(d, l, proj_std, &mut rng))
            .collect();

        let domains = (0..=cfg.n_sources)
            .map(|d| {
                let mut rng = seeded(child_seed(cfg.seed, STREAM_DOMAIN_MAP + d as u64));
                let noise = gaussian_matrix(l, l, proj_std, &mut rng);
                let mut linear = Matrix::identity(l);
                linear.add_scaled(&noise, cfg.shift_magnitude);
                let bias = (0..l)
                    .map(|_| {
                        let b: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
                        cfg.shift_magnitude * b
                    })
                    .collect();
                DomainMap { linear, bias }
            })
            .collect();

        Ok(Self {
            cfg: cfg.clone(),
            class_means,
            projections,
            domains,
        })
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.cfg
    }

    /// Domain ids `0..n_sources` are sources; `n_sources` is the target.
    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn class_mean(&self, generator_class: usize) -> &[f64] {
        &self.class_means[generator_class]
    }

    fn shift(&self, z: &[f64], domain: usize) -> Vec<f64> {
        let map = &self.domains[domain];
        (0..z.len())
            .map(|i| {
                map.bias[i]
                    + map
                        .linear
                        .row(i)
                        .iter()
                        .zip(z)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            })
            .collect()
    }

    /// Noise-free features of latent `z` observed in `domain`.
    pub fn observe(&self, z: &[f64], domain: usize) -> Vec<Vec<f64>> {
        let shifted = self.shift(z, domain);
        self.projections
            .iter()
            .map(|w| {
                w.iter_rows()
                    .map(|row| row.iter().zip(&shifted).map(|(a, b)| a * b).sum())
                    .collect()
            })
            .collect()
    }

    /// Population mean of modality `k` for a class in a domain.
    pub fn class_feature_mean(&self, generator_class: usize, domain: usize, k: usize) -> Vec<f64> {
        self.observe(&self.class_means[generator_class], domain).swap_remove(k)
    }

    /// Draws all samples of one domain. Unknown classes only appear when
    /// `domain` is the target.
    pub fn sample_domain(&self, domain: usize) -> Result<Dataset> {
        let cfg = &self.cfg;
        let is_target = domain == cfg.n_sources;
        let latent = Normal::new(0.0, LATENT_NOISE_VAR.sqrt()).expect("valid std");
        let mut samples = Vec::new();
        for class in 0..cfg.total_classes() {
            let label = cfg.label_of(class);
            if label.is_unknown() && !is_target {
                continue;
            }
            // One stream per (domain, class): a class draws the same samples
            // whichever other classes are kept or relabeled.
            let stream = STREAM_DOMAIN_SAMPLES + ((domain as u64) << 20) + class as u64;
            let mut rng = seeded(child_seed(cfg.seed, stream));
            for _ in 0..cfg.samples_per_class {
                let z: Vec<f64> = self.class_means[class]
                    .iter()
                    .map(|m| m + latent.sample(&mut rng))
                    .collect();
                let mut features = self.observe(&z, domain);
                for f in features.iter_mut().flatten() {
                    let eta: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
                    *f += cfg.noise_std * eta;
                }
                samples.push(MultimodalSample {
                    features,
                    label,
                    domain: domain as u32,
                });
            }
        }
        Dataset::new(samples, cfg.meta())
    }
}

/// Source datasets (known classes only) and the open-set target.
#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub sources: Vec<Dataset>,
    pub target: Dataset,
}

/// Generates the benchmark described by `cfg`. Deterministic in `cfg.seed`;
/// each domain draws from its own child stream.
pub fn generate_benchmark(cfg: &SyntheticConfig) -> Result<Benchmark> {
    let world = SyntheticWorld::new(cfg)?;
    let sources = (0..cfg.n_sources)
        .map(|d| world.sample_domain(d))
        .collect::<Result<Vec<_>>>()?;
    let target = world.sample_domain(cfg.n_sources)?;
    Ok(Benchmark { sources, target })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_names_the_field() {
        let cfg = SyntheticConfig {
            modality_dims: vec![8],
            ..Default::default()
        };
        let err = generate_benchmark(&cfg).unwrap_err();
        assert!(matches!(err, Error::Validation { ref field, .. } if field == "modality_dims"));
        let cfg = SyntheticConfig {
            n_known: 1,
            ..Default::default()
        };
        assert!(matches!(
            generate_benchmark(&cfg).unwrap_err(),
            Error::Validation { ref field, .. } if field == "n_known"
        ));
    }

    #[test]
    fn shift_free_features_match_across_domains() {
        let cfg = SyntheticConfig {
            shift_magnitude: 0.0,
            noise_std: 0.0,
            ..Default::default()
        };
        let world = SyntheticWorld::new(&cfg).unwrap();
        let z: Vec<f64> = (0..cfg.latent_dim).map(|i| i as f64 * 0.1 - 0.5).collect();
        let reference = world.observe(&z, 0);
        for d in 1..world.num_domains() {
            assert_eq!(world.observe(&z, d), reference);
        }
        for c in 0..cfg.total_classes() {
            for k in 0..cfg.num_modalities() {
                let m0 = world.class_feature_mean(c, 0, k);
                for d in 1..world.num_domains() {
                    let md = world.class_feature_mean(c, d, k);
                    assert!(m0.iter().zip(&md).all(|(a, b)| (a - b).abs() <= 1e-12));
                }
            }
        }
    }

    #[test]
    fn default_openness_marks_first_class_unknown() {
        let cfg = SyntheticConfig::default();
        assert_eq!((cfg.n_known, cfg.n_unknown), (7, 1));
        assert_eq!(cfg.label_of(0), Label::Unknown);
        assert_eq!(cfg.label_of(1), Label::Known(0));
        let bench = generate_benchmark(&cfg).unwrap();
        for s in &bench.sources {
            assert!(!s.has_unknown());
            assert_eq!(s.len(), 7 * cfg.samples_per_class);
        }
        let unknown = bench.target.samples.iter().filter(|s| s.label.is_unknown()).count();
        assert_eq!(unknown, cfg.samples_per_class);
        assert!(bench.target.samples.iter().all(|s| s.domain == 2));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SyntheticConfig {
            samples_per_class: 5,
            ..Default::default()
        };
        assert_eq!(generate_benchmark(&cfg).unwrap(), generate_benchmark(&cfg).unwrap());
        let other = SyntheticConfig { seed: 1, ..cfg.clone() };
        assert_ne!(generate_benchmark(&cfg).unwrap(), generate_benchmark(&other).unwrap());
    }
}
