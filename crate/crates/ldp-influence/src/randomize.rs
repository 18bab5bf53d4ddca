//! Randomized response: distortion matrices, record perturbation, outcome
//! probabilities, and the population-distribution identities used to reason
//! about collected noisy data.
//!
//! A distortion matrix keeps a categorical value with probability
//! `e^ε/(d−1+e^ε)` and otherwise replaces it uniformly among the `d−1`
//! alternatives. The matrix is symmetric, so the row/column aggregation
//! conventions coincide; this crate still fixes `P[u][v] = P(output v | input u)`
//! and applies transposes explicitly wherever the direction matters.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Row-stochastic randomized-response matrix over a domain of `size`
/// categories. Stored implicitly as the two distinct entry values.
#[derive(Debug, Clone, PartialEq)]
pub struct DistortionMatrix {
    size: usize,
    epsilon: f64,
    diagonal: f64,
    off_diagonal: f64,
}

impl DistortionMatrix {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Probability of keeping the input value.
    pub fn diagonal(&self) -> f64 {
        self.diagonal
    }

    /// Probability of any one specific alternative value.
    pub fn off_diagonal(&self) -> f64 {
        self.off_diagonal
    }

    /// `P(output to | input from)`.
    pub fn prob(&self, from: usize, to: usize) -> f64 {
        debug_assert!(from < self.size && to < self.size);
        if from == to {
            self.diagonal
        } else {
            self.off_diagonal
        }
    }

    /// Materialize the full matrix.
    pub fn to_matrix(&self) -> Array2<f64> {
        let mut m = Array2::from_elem((self.size, self.size), self.off_diagonal);
        for i in 0..self.size {
            m[[i, i]] = self.diagonal;
        }
        m
    }

    /// `Pᵀ q` for a probability vector `q`. This is the forward-correction
    /// product applied to predicted class probabilities.
    pub fn transpose_apply(&self, q: &[f64]) -> Result<Vec<f64>> {
        if q.len() != self.size {
            return Err(Error::Dimension {
                expected: self.size,
                got: q.len(),
            });
        }
        let total: f64 = q.iter().sum();
        Ok(q.iter()
            .map(|&qc| self.off_diagonal * (total - qc) + self.diagonal * qc)
            .collect())
    }

    /// Sample an output value for `from` using a single uniform draw and the
    /// inverse CDF of the matrix row.
    pub fn sample(&self, from: usize, rng: &mut impl Rng) -> usize {
        debug_assert!(from < self.size);
        let u: f64 = rng.random();
        let mut cum = 0.0;
        for v in 0..self.size {
            cum += self.prob(from, v);
            if u < cum {
                return v;
            }
        }
        self.size - 1
    }
}

/// Build the randomized-response distortion matrix for a domain of `size`
/// categories at privacy level `epsilon`.
///
/// `epsilon = 0` yields the uniform matrix, valid for sampling but singular,
/// so [`recover_distribution`] rejects it.
pub fn build_distortion(size: usize, epsilon: f64) -> Result<DistortionMatrix> {
    if size < 2 {
        return Err(Error::Config(format!(
            "distortion matrix needs at least 2 categories, got {size}"
        )));
    }
    if !(epsilon >= 0.0) {
        return Err(Error::Config(format!(
            "epsilon must be nonnegative, got {epsilon}"
        )));
    }
    // e^(-ε) form avoids overflow for large ε: diag → 1, off → 0.
    let em = (-epsilon).exp();
    let denom = (size as f64 - 1.0) * em + 1.0;
    Ok(DistortionMatrix {
        size,
        epsilon,
        diagonal: 1.0 / denom,
        off_diagonal: em / denom,
    })
}

/// Whether a plan is meant to be sampled or consumed analytically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanMode {
    /// Records are actually resampled (oracle retraining path).
    Sample,
    /// The plan only parameterizes expected-loss estimators; no draws.
    Expectation,
}

/// One randomized attribute: its index in the dataset schema and its
/// prebuilt distortion matrix.
#[derive(Debug, Clone)]
pub struct PlanEntry {
    pub attribute: usize,
    pub matrix: DistortionMatrix,
}

/// Which attributes are randomized, with what per-attribute ε.
#[derive(Debug, Clone)]
pub struct PerturbationPlan {
    entries: Vec<PlanEntry>,
    mode: PlanMode,
}

impl PerturbationPlan {
    /// Build a plan over `(attribute index, epsilon)` pairs.
    /// `cardinalities[a]` is the domain size of attribute `a`.
    pub fn build(
        specs: &[(usize, f64)],
        cardinalities: &[usize],
        mode: PlanMode,
    ) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Config(
                "perturbation plan must randomize at least one attribute".into(),
            ));
        }
        let mut seen = vec![false; cardinalities.len()];
        let mut entries = Vec::with_capacity(specs.len());
        for &(attribute, epsilon) in specs {
            let d = *cardinalities.get(attribute).ok_or_else(|| {
                Error::Config(format!("attribute index {attribute} out of range"))
            })?;
            if seen[attribute] {
                return Err(Error::Config(format!(
                    "attribute {attribute} listed twice in perturbation plan"
                )));
            }
            seen[attribute] = true;
            entries.push(PlanEntry {
                attribute,
                matrix: build_distortion(d, epsilon)?,
            });
        }
        Ok(Self { entries, mode })
    }

    pub fn entries(&self) -> &[PlanEntry] {
        &self.entries
    }

    pub fn mode(&self) -> PlanMode {
        self.mode
    }

    /// Indices of the randomized attributes, in plan order.
    pub fn attributes(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.attribute).collect()
    }

    /// Number of joint alternatives `∏ d_f` per record.
    pub fn joint_outcomes(&self) -> usize {
        self.entries
            .iter()
            .map(|e| e.matrix.size())
            .product::<usize>()
    }
}

/// Template for a plan whose per-attribute ε is filled in per sweep point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanTemplate {
    pub attributes: Vec<usize>,
    pub mode: PlanMode,
}

impl PlanTemplate {
    /// Instantiate with a single ε applied to every randomized attribute.
    pub fn instantiate(&self, epsilon: f64, cardinalities: &[usize]) -> Result<PerturbationPlan> {
        let specs: Vec<(usize, f64)> =
            self.attributes.iter().map(|&a| (a, epsilon)).collect();
        PerturbationPlan::build(&specs, cardinalities, self.mode)
    }
}

/// Deterministic per-record seed derivation (splitmix64 over the pair),
/// so parallel perturbation and nested groups reuse identical draws.
pub fn derive_record_seed(root: u64, record_index: u64) -> u64 {
    let mut z = root ^ record_index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Apply randomized response to one record. Attributes outside the plan are
/// unchanged; each randomized attribute gets one independent draw.
pub fn perturb_record(record: &[usize], plan: &PerturbationPlan, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut out = record.to_vec();
    for entry in &plan.entries {
        out[entry.attribute] = entry.matrix.sample(record[entry.attribute], &mut rng);
    }
    out
}

/// Perturb the rows listed in `indices` in place, deriving each row's seed
/// from `(root_seed, row index)`.
pub fn perturb_rows(
    rows: &mut [Vec<usize>],
    indices: &[usize],
    plan: &PerturbationPlan,
    root_seed: u64,
) {
    for &i in indices {
        let seed = derive_record_seed(root_seed, i as u64);
        rows[i] = perturb_record(&rows[i], plan, seed);
    }
}

/// Probability that the randomized attributes `alpha` come out as exactly
/// `candidate`: the product of the per-attribute matrix entries.
pub fn outcome_probability(
    alpha: &[usize],
    candidate: &[usize],
    plan: &PerturbationPlan,
) -> Result<f64> {
    if alpha.len() != plan.entries.len() {
        return Err(Error::Dimension {
            expected: plan.entries.len(),
            got: alpha.len(),
        });
    }
    if candidate.len() != plan.entries.len() {
        return Err(Error::Dimension {
            expected: plan.entries.len(),
            got: candidate.len(),
        });
    }
    let mut p = 1.0;
    for (k, entry) in plan.entries.iter().enumerate() {
        if alpha[k] >= entry.matrix.size() || candidate[k] >= entry.matrix.size() {
            return Err(Error::Data(format!(
                "value out of domain for attribute {}",
                entry.attribute
            )));
        }
        p *= entry.matrix.prob(alpha[k], candidate[k]);
    }
    Ok(p)
}

/// Combined probability that at least one randomized attribute changes:
/// `1 − ∏_f e^{ε_f}/(d_f − 1 + e^{ε_f})`.
pub fn change_probability(plan: &PerturbationPlan) -> f64 {
    1.0 - plan
        .entries
        .iter()
        .map(|e| e.matrix.diagonal())
        .product::<f64>()
}

/// A point on the probability simplex over the categories of one attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationDistribution {
    proportions: Vec<f64>,
}

impl PopulationDistribution {
    pub fn new(proportions: Vec<f64>) -> Result<Self> {
        if proportions.len() < 2 {
            return Err(Error::Data(
                "population distribution needs at least 2 categories".into(),
            ));
        }
        if proportions.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::Data("proportions must be finite and nonnegative".into()));
        }
        let total: f64 = proportions.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Data(format!(
                "proportions must sum to 1 within 1e-12, got {total}"
            )));
        }
        Ok(Self { proportions })
    }

    pub fn proportions(&self) -> &[f64] {
        &self.proportions
    }

    pub fn len(&self) -> usize {
        self.proportions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proportions.is_empty()
    }
}

/// Expected observed distribution after randomized response: `λ = Pᵀπ`.
pub fn observed_distribution(
    pi: &PopulationDistribution,
    p: &DistortionMatrix,
) -> Result<PopulationDistribution> {
    if pi.len() != p.size() {
        return Err(Error::Dimension {
            expected: p.size(),
            got: pi.len(),
        });
    }
    let lambda = p.transpose_apply(pi.proportions())?;
    PopulationDistribution::new(lambda)
}

/// Result of [`recover_distribution`]: the simplex-projected estimate plus
/// how much negative mass was clipped away before renormalizing.
#[derive(Debug, Clone)]
pub struct RecoveredDistribution {
    pub distribution: PopulationDistribution,
    pub clipped_mass: f64,
}

/// Estimate the true distribution from an observed one by solving `Pᵀπ = λ`,
/// then clipping tiny negatives to zero and renormalizing.
pub fn recover_distribution(
    lambda: &PopulationDistribution,
    p: &DistortionMatrix,
) -> Result<RecoveredDistribution> {
    if lambda.len() != p.size() {
        return Err(Error::Dimension {
            expected: p.size(),
            got: lambda.len(),
        });
    }
    if p.epsilon() == 0.0 {
        return Err(Error::Numerical(
            "distortion matrix at epsilon 0 is singular (rank 1); cannot invert".into(),
        ));
    }
    let pt = p.to_matrix().t().to_owned();
    let rhs = Array1::from_vec(lambda.proportions().to_vec());
    let raw = linalg::gauss_solve(&pt, &rhs)?;
    let mut clipped = 0.0;
    let mut cleaned: Vec<f64> = raw
        .iter()
        .map(|&v| {
            if v < 0.0 {
                clipped += -v;
                0.0
            } else {
                v
            }
        })
        .collect();
    let total: f64 = cleaned.iter().sum();
    if total <= 0.0 {
        return Err(Error::Numerical(
            "recovered distribution has no positive mass".into(),
        ));
    }
    for v in &mut cleaned {
        *v /= total;
    }
    Ok(RecoveredDistribution {
        distribution: PopulationDistribution::new(cleaned)?,
        clipped_mass: clipped,
    })
}
