//! Seeded synthetic categorical datasets for smoke tests, examples, and the
//! acceptance suite. Features are uniform categorical draws; the label is
//! sampled from a softmax over a random linear score of the one-hot features,
//! so features and label are genuinely correlated.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::dataset::{CategoricalDomain, Dataset};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub n: usize,
    pub n_features: usize,
    pub feature_cardinality: usize,
    pub n_classes: usize,
    /// Scale of the latent class-score weights; larger means more separable.
    pub weight_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            n_features: 5,
            feature_cardinality: 2,
            n_classes: 2,
            weight_scale: 1.0,
            seed: 0,
        }
    }
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller; one value per call is plenty here.
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Generate a dataset under the given configuration. Deterministic in the
/// seed; the label attribute is placed last and named `label`.
pub fn generate(cfg: &SyntheticConfig) -> Result<Dataset> {
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let d = cfg.feature_cardinality.max(2);
    let c = cfg.n_classes.max(2);

    // Latent weights: one score contribution per (class, feature, category).
    let mut weights = vec![0.0f64; c * cfg.n_features * d];
    for w in &mut weights {
        *w = cfg.weight_scale * standard_normal(&mut rng);
    }
    let weight = |class: usize, feature: usize, category: usize| {
        weights[(class * cfg.n_features + feature) * d + category]
    };

    let mut records = Vec::with_capacity(cfg.n);
    for _ in 0..cfg.n {
        let mut record: Vec<usize> = (0..cfg.n_features)
            .map(|_| rng.random_range(0..d))
            .collect();
        let scores: Vec<f64> = (0..c)
            .map(|class| {
                record
                    .iter()
                    .enumerate()
                    .map(|(f, &v)| weight(class, f, v))
                    .sum()
            })
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let u: f64 = rng.random::<f64>() * total;
        let mut cum = 0.0;
        let mut label = c - 1;
        for (k, e) in exps.iter().enumerate() {
            cum += e;
            if u < cum {
                label = k;
                break;
            }
        }
        record.push(label);
        records.push(record);
    }

    let mut attributes: Vec<CategoricalDomain> = (0..cfg.n_features)
        .map(|f| {
            CategoricalDomain::new(
                format!("f{f}"),
                (0..d).map(|v| v.to_string()).collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    attributes.push(CategoricalDomain::new(
        "label",
        (0..c).map(|v| v.to_string()).collect(),
    )?);
    Dataset::new(attributes, records, cfg.n_features)
}
