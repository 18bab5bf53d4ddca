//! Influence estimators: how removing or perturbing training points moves
//! model parameters and test loss, without retraining.
//!
//! Every group estimator reduces to one dot product against a cached
//! inverse-Hessian-vector product of the test-loss gradient, so a sweep over
//! many ε values and groups pays for the IHVP exactly once.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::time::Instant;

use ndarray::Array1;

use crate::correction;
use crate::dataset::{Dataset, EncodedDataset};
use crate::error::{Error, Result};
use crate::ihvp::{self, IhvpConfig, IhvpMethod};
use crate::model::{self, ModelParams};
use crate::randomize::{self, build_distortion, PerturbationPlan};

/// One encoded training or test point.
#[derive(Debug, Clone)]
pub struct EncodedPoint {
    pub x: Array1<f64>,
    pub y: usize,
}

/// A training point and its perturbed replacement.
#[derive(Debug, Clone)]
pub struct PerturbedPair {
    pub original: EncodedPoint,
    pub perturbed: EncodedPoint,
}

/// Whether the general randomized-response estimator applies the shared
/// combined-change scaling exactly as printed, or weights each alternative
/// outcome by its own probability (the exact expectation). The two coincide
/// whenever every randomized attribute is binary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScalingMode {
    PaperLiteral,
    ExpectationExact,
}

/// Estimator output: the raw influence value and the `1/n`-scaled estimated
/// change in average test loss.
#[derive(Debug, Clone)]
pub struct InfluenceResult {
    pub raw_influence: f64,
    pub estimated_loss_delta: f64,
    pub n_train: usize,
    pub meta: InfluenceMeta,
}

#[derive(Debug, Clone)]
pub struct InfluenceMeta {
    pub method: &'static str,
    pub epsilons: Vec<f64>,
    pub group_size: usize,
    pub test_size: usize,
    pub ihvp_method: IhvpMethod,
    pub wall_seconds: f64,
}

impl InfluenceResult {
    fn new(raw: f64, n_train: usize, meta: InfluenceMeta) -> Self {
        Self {
            raw_influence: raw,
            estimated_loss_delta: raw / n_train as f64,
            n_train,
            meta,
        }
    }
}

/// The gradient of the average test loss over S_te and its IHVP, computed
/// once per (θ̂, S_te, IHVP config) and reused across every ε and group.
#[derive(Debug, Clone)]
pub struct TestGradientCache {
    /// η = −∇ of the average test loss over S_te at θ̂.
    pub eta: Array1<f64>,
    /// H⁻¹ η under the configured IHVP strategy.
    pub eta_ihvp: Array1<f64>,
    pub ihvp_method: IhvpMethod,
    pub ihvp_residual: f64,
    pub ihvp_seconds: f64,
    pub test_size: usize,
    fingerprint: u64,
}

fn cache_fingerprint(params: &ModelParams, s_te: &[usize], cfg: &IhvpConfig) -> u64 {
    let mut hasher = DefaultHasher::new();
    for w in params.weights.iter() {
        w.to_bits().hash(&mut hasher);
    }
    params.l2_strength.to_bits().hash(&mut hasher);
    s_te.hash(&mut hasher);
    serde_json::to_string(cfg).expect("config serializes").hash(&mut hasher);
    hasher.finish()
}

impl TestGradientCache {
    /// Build the cache for test rows `s_te` of `test`.
    pub fn build(
        train: &EncodedDataset,
        params: &ModelParams,
        test: &EncodedDataset,
        s_te: &[usize],
        cfg: &IhvpConfig,
    ) -> Result<Self> {
        if s_te.is_empty() {
            return Err(Error::Data("test group S_te is empty".into()));
        }
        let start = Instant::now();
        let mut eta = model::mean_grad(params, test, Some(s_te))?;
        eta.mapv_inplace(|v| -v);
        let solved = ihvp::solve(train, params, &eta, cfg)?;
        Ok(Self {
            eta,
            eta_ihvp: solved.solution,
            ihvp_method: cfg.method,
            ihvp_residual: solved.residual,
            ihvp_seconds: start.elapsed().as_secs_f64(),
            test_size: s_te.len(),
            fingerprint: cache_fingerprint(params, s_te, cfg),
        })
    }

    /// True when the cache was built for exactly these parameters, test
    /// rows, and IHVP configuration; stale caches must be rebuilt.
    pub fn is_valid_for(&self, params: &ModelParams, s_te: &[usize], cfg: &IhvpConfig) -> bool {
        self.fingerprint == cache_fingerprint(params, s_te, cfg)
    }
}

/// Parameter-space influence of upweighting one training point:
/// `−H⁻¹ ∇ℓ(z, θ̂)`. The retrained parameters after removing z are
/// approximately `θ̂ − (1/n)·result`.
pub fn influence_up_params(
    train: &EncodedDataset,
    params: &ModelParams,
    point: &EncodedPoint,
    cfg: &IhvpConfig,
) -> Result<Array1<f64>> {
    let g = model::grad_point(params, point.x.view(), point.y)?;
    let mut solved = ihvp::solve(train, params, &g, cfg)?.solution;
    solved.mapv_inplace(|v| -v);
    Ok(solved)
}

/// Influence of one training point on the loss of one test point:
/// `−∇ℓ(z_te)ᵀ H⁻¹ ∇ℓ(z)`. Symmetric in swapping the two points.
pub fn influence_up_loss(
    train: &EncodedDataset,
    params: &ModelParams,
    point: &EncodedPoint,
    test_point: &EncodedPoint,
    cfg: &IhvpConfig,
) -> Result<f64> {
    let g_test = model::grad_point(params, test_point.x.view(), test_point.y)?;
    let g_train = model::grad_point(params, point.x.view(), point.y)?;
    let solved = ihvp::solve(train, params, &g_train, cfg)?.solution;
    Ok(-g_test.dot(&solved))
}

/// Group-to-group perturbation influence over explicit `(z, z_β)` pairs:
/// `ηᵀ H⁻¹ ∇ Σᵢ (ℓ(z_βⁱ) − ℓ(zⁱ))` with η the cached negative test-loss
/// gradient. Additive in the pairs; empty input yields exactly zero.
pub fn influence_pert_loss_g2g(
    train: &EncodedDataset,
    params: &ModelParams,
    pairs: &[PerturbedPair],
    cache: &TestGradientCache,
) -> Result<InfluenceResult> {
    let start = Instant::now();
    let mut gamma = Array1::<f64>::zeros(params.param_dim());
    for pair in pairs {
        gamma += &model::grad_point(params, pair.perturbed.x.view(), pair.perturbed.y)?;
        gamma -= &model::grad_point(params, pair.original.x.view(), pair.original.y)?;
    }
    let raw = cache.eta_ihvp.dot(&gamma);
    Ok(InfluenceResult::new(
        raw,
        train.len(),
        InfluenceMeta {
            method: "pert_loss_g2g",
            epsilons: vec![],
            group_size: pairs.len(),
            test_size: cache.test_size,
            ihvp_method: cache.ihvp_method,
            wall_seconds: start.elapsed().as_secs_f64(),
        },
    ))
}

/// Walks the Cartesian product of the plan's domains in mixed-radix order.
struct JointOutcomes {
    sizes: Vec<usize>,
    current: Vec<usize>,
    done: bool,
}

impl JointOutcomes {
    fn new(sizes: Vec<usize>) -> Self {
        let current = vec![0; sizes.len()];
        Self {
            sizes,
            current,
            done: false,
        }
    }
}

impl Iterator for JointOutcomes {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.done {
            return None;
        }
        let out = self.current.clone();
        let mut k = 0;
        loop {
            if k == self.sizes.len() {
                self.done = true;
                break;
            }
            self.current[k] += 1;
            if self.current[k] < self.sizes[k] {
                break;
            }
            self.current[k] = 0;
            k += 1;
        }
        Some(out)
    }
}

/// General randomized-response influence for a group S under a plan that may
/// randomize features, the label, or both. Enumerates every joint
/// alternative of the randomized attributes per point.
///
/// `enumeration_cap` bounds `∏ d_f`; exceeding it is an error suggesting
/// label-only or per-attribute analysis rather than silently truncating.
pub fn influence_rr(
    train_raw: &Dataset,
    train_enc: &EncodedDataset,
    params: &ModelParams,
    group: &[usize],
    cache: &TestGradientCache,
    plan: &PerturbationPlan,
    scaling: ScalingMode,
    enumeration_cap: usize,
) -> Result<InfluenceResult> {
    let start = Instant::now();
    let outcomes = plan.joint_outcomes();
    if outcomes > enumeration_cap {
        return Err(Error::Config(format!(
            "joint alternative space has {outcomes} outcomes, over the cap {enumeration_cap}; \
             consider label-only or per-attribute analysis"
        )));
    }
    let attrs = plan.attributes();
    let sizes: Vec<usize> = plan.entries().iter().map(|e| e.matrix.size()).collect();
    let epsilons: Vec<f64> = plan.entries().iter().map(|e| e.matrix.epsilon()).collect();

    let mut gamma = Array1::<f64>::zeros(params.param_dim());
    for &i in group {
        let record = train_raw
            .records
            .get(i)
            .ok_or_else(|| Error::Data(format!("group index {i} out of range")))?;
        let alpha: Vec<usize> = attrs.iter().map(|&a| record[a]).collect();
        let g_orig = model::grad_point(params, train_enc.design.row(i), train_enc.labels[i])?;
        let mut modified = record.clone();
        for candidate in JointOutcomes::new(sizes.clone()) {
            if candidate == alpha {
                continue;
            }
            for (k, &a) in attrs.iter().enumerate() {
                modified[a] = candidate[k];
            }
            let (x_mod, y_mod) = train_enc.encoding.encode_record(&modified);
            let g_mod = model::grad_point(params, x_mod.view(), y_mod)?;
            match scaling {
                ScalingMode::PaperLiteral => {
                    gamma += &g_mod;
                    gamma -= &g_orig;
                }
                ScalingMode::ExpectationExact => {
                    let w = randomize::outcome_probability(&alpha, &candidate, plan)?;
                    gamma.scaled_add(w, &g_mod);
                    gamma.scaled_add(-w, &g_orig);
                }
            }
        }
    }
    if scaling == ScalingMode::PaperLiteral {
        let shared = randomize::change_probability(plan);
        gamma.mapv_inplace(|v| v * shared);
    }
    let raw = cache.eta_ihvp.dot(&gamma);
    Ok(InfluenceResult::new(
        raw,
        train_enc.len(),
        InfluenceMeta {
            method: "rr",
            epsilons,
            group_size: group.len(),
            test_size: cache.test_size,
            ihvp_method: cache.ihvp_method,
            wall_seconds: start.elapsed().as_secs_f64(),
        },
    ))
}

/// Label-only randomized-response influence:
/// `ηᵀH⁻¹ ∇ [ 1/(C−1+e^ε) Σ_{i∈S} Σ_{c≠yⁱ} (ℓ(h(xⁱ),c) − ℓ(h(xⁱ),yⁱ)) ]`.
pub fn influence_rr_label(
    train_enc: &EncodedDataset,
    params: &ModelParams,
    group: &[usize],
    cache: &TestGradientCache,
    epsilon: f64,
) -> Result<InfluenceResult> {
    let start = Instant::now();
    let c = train_enc.n_classes;
    let coeff = build_distortion(c, epsilon)?.off_diagonal();
    let mut gamma = Array1::<f64>::zeros(params.param_dim());
    for &i in group {
        let x = train_enc.design.row(i);
        let y = train_enc.labels[i];
        let g_true = model::grad_point(params, x, y)?;
        for label in 0..c {
            if label == y {
                continue;
            }
            gamma.scaled_add(coeff, &model::grad_point(params, x, label)?);
            gamma.scaled_add(-coeff, &g_true);
        }
    }
    let raw = cache.eta_ihvp.dot(&gamma);
    Ok(InfluenceResult::new(
        raw,
        train_enc.len(),
        InfluenceMeta {
            method: "rr_label",
            epsilons: vec![epsilon],
            group_size: group.len(),
            test_size: cache.test_size,
            ihvp_method: cache.ihvp_method,
            wall_seconds: start.elapsed().as_secs_f64(),
        },
    ))
}

/// Label randomized-response influence with forward loss correction
/// simulated: the alternative-label losses are taken through the corrected
/// prediction `Pᵀh(x)` while the subtracted term stays uncorrected.
pub fn influence_rr_flc(
    train_enc: &EncodedDataset,
    params: &ModelParams,
    group: &[usize],
    cache: &TestGradientCache,
    epsilon: f64,
) -> Result<InfluenceResult> {
    let start = Instant::now();
    let c = train_enc.n_classes;
    let distortion = build_distortion(c, epsilon)?;
    let coeff = distortion.off_diagonal();
    let mut gamma = Array1::<f64>::zeros(params.param_dim());
    for &i in group {
        let x = train_enc.design.row(i);
        let y = train_enc.labels[i];
        let g_true = model::grad_point(params, x, y)?;
        for label in 0..c {
            if label == y {
                continue;
            }
            let g_corr = correction::flc_point_grad(params, &distortion, x, label)?;
            gamma.scaled_add(coeff, &g_corr);
            gamma.scaled_add(-coeff, &g_true);
        }
    }
    let raw = cache.eta_ihvp.dot(&gamma);
    Ok(InfluenceResult::new(
        raw,
        train_enc.len(),
        InfluenceMeta {
            method: "rr_flc",
            epsilons: vec![epsilon],
            group_size: group.len(),
            test_size: cache.test_size,
            ihvp_method: cache.ihvp_method,
            wall_seconds: start.elapsed().as_secs_f64(),
        },
    ))
}

/// First-order approximation of the parameters after replacing each pair's
/// original point with its perturbation: `θ̂ − (1/n) H⁻¹ Σ (∇ℓ(z_β) − ∇ℓ(z))`.
pub fn approx_params_after_perturbation(
    train: &EncodedDataset,
    params: &ModelParams,
    pairs: &[PerturbedPair],
    cfg: &IhvpConfig,
) -> Result<ModelParams> {
    let mut gamma = Array1::<f64>::zeros(params.param_dim());
    for pair in pairs {
        gamma += &model::grad_point(params, pair.perturbed.x.view(), pair.perturbed.y)?;
        gamma -= &model::grad_point(params, pair.original.x.view(), pair.original.y)?;
    }
    let step = ihvp::solve(train, params, &gamma, cfg)?.solution;
    let mut updated = params.clone();
    let flat = updated.flat() - &(step / train.len() as f64);
    updated.set_flat(&flat)?;
    updated.meta = None;
    Ok(updated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{encode, CategoricalDomain, Dataset};
    use crate::linalg;
    use crate::model::{mean_loss, train, Link, TrainConfig};
    use crate::randomize::PlanMode;
    use crate::synth::{generate, SyntheticConfig};
    use ndarray::array;

    fn fixture(n: usize, classes: usize, seed: u64, l2: f64) -> (EncodedDataset, ModelParams) {
        let ds = generate(&SyntheticConfig {
            n,
            n_features: 4,
            n_classes: classes,
            seed,
            ..Default::default()
        })
        .unwrap();
        let data = encode(&ds, true).unwrap();
        let params = train(
            &data,
            &TrainConfig {
                l2_strength: l2,
                tolerance: 1e-10,
                ..Default::default()
            },
        )
        .unwrap();
        (data, params)
    }

    fn raw_fixture(n: usize, seed: u64, l2: f64) -> (Dataset, EncodedDataset, ModelParams) {
        let ds = generate(&SyntheticConfig {
            n,
            n_features: 3,
            seed,
            ..Default::default()
        })
        .unwrap();
        let data = encode(&ds, true).unwrap();
        let params = train(
            &data,
            &TrainConfig {
                l2_strength: l2,
                tolerance: 1e-10,
                ..Default::default()
            },
        )
        .unwrap();
        (ds, data, params)
    }

    fn cache_for(
        data: &EncodedDataset,
        params: &ModelParams,
        test: &EncodedDataset,
    ) -> TestGradientCache {
        let s_te: Vec<usize> = (0..test.len()).collect();
        TestGradientCache::build(data, params, test, &s_te, &IhvpConfig::default()).unwrap()
    }

    fn point_from(data: &EncodedDataset, i: usize) -> EncodedPoint {
        EncodedPoint {
            x: data.design.row(i).to_owned(),
            y: data.labels[i],
        }
    }

    #[test]
    fn cache_fingerprint_detects_changes() {
        let (data, params) = fixture(60, 2, 1, 0.1);
        let s_te: Vec<usize> = (0..10).collect();
        let cfg = IhvpConfig::default();
        let cache = TestGradientCache::build(&data, &params, &data, &s_te, &cfg).unwrap();
        assert!(cache.is_valid_for(&params, &s_te, &cfg));

        let mut other = params.clone();
        let mut flat = other.flat();
        flat[0] += 0.1;
        other.set_flat(&flat).unwrap();
        assert!(!cache.is_valid_for(&other, &s_te, &cfg));
        assert!(!cache.is_valid_for(&params, &s_te[..5], &cfg));
        let mut cfg2 = cfg.clone();
        cfg2.damping *= 2.0;
        assert!(!cache.is_valid_for(&params, &s_te, &cfg2));
    }

    #[test]
    fn perfectly_fit_point_has_zero_influence() {
        let (data, params) = fixture(80, 2, 2, 0.05);
        // Construct a synthetic point with an exactly zero gradient: x = 0.
        let zero_point = EncodedPoint {
            x: Array1::zeros(data.width()),
            y: 1,
        };
        let inf = influence_up_params(&data, &params, &zero_point, &IhvpConfig::default())
            .unwrap();
        assert_eq!(linalg::norm(&inf), 0.0);
        let test_point = point_from(&data, 0);
        let val =
            influence_up_loss(&data, &params, &zero_point, &test_point, &IhvpConfig::default())
                .unwrap();
        assert_eq!(val, 0.0);
    }

    #[test]
    fn up_params_scales_linearly_with_the_gradient() {
        // At θ = 0 the per-point gradient is (0.5 − y)·x, so doubling x
        // doubles the gradient and must double the influence.
        let (data, _) = fixture(50, 2, 3, 0.1);
        let params = ModelParams::zeros(Link::Sigmoid, 2, data.width(), 0.1).unwrap();
        let base = point_from(&data, 4);
        let doubled = EncodedPoint {
            x: &base.x * 2.0,
            y: base.y,
        };
        let a = influence_up_params(&data, &params, &base, &IhvpConfig::default()).unwrap();
        let b = influence_up_params(&data, &params, &doubled, &IhvpConfig::default()).unwrap();
        let rel = linalg::norm(&(&b - &(&a * 2.0))) / linalg::norm(&b);
        assert!(rel <= 1e-12, "rel {rel}");
    }

    #[test]
    fn up_params_tracks_leave_one_out_retraining() {
        // 50 points, strong regularization: the predicted removal direction
        // should align with the actual retrain direction.
        let ds = generate(&SyntheticConfig {
            n: 50,
            n_features: 3,
            weight_scale: 1.5,
            seed: 4,
            ..Default::default()
        })
        .unwrap();
        let data = encode(&ds, true).unwrap();
        let cfg = TrainConfig {
            l2_strength: 1.0,
            tolerance: 1e-12,
            ..Default::default()
        };
        let params = train(&data, &cfg).unwrap();
        let removed = 7usize;
        let keep: Vec<usize> = (0..data.len()).filter(|&i| i != removed).collect();
        let retrained = train(
            &encode(&ds.subset(&keep).unwrap(), true).unwrap(),
            &cfg,
        )
        .unwrap();
        let actual = &retrained.flat() - &params.flat();
        let predicted = influence_up_params(
            &data,
            &params,
            &point_from(&data, removed),
            &IhvpConfig {
                damping: 0.0,
                ..Default::default()
            },
        )
        .unwrap()
        .mapv(|v| -v / data.len() as f64);
        let cosine = actual.dot(&predicted) / (linalg::norm(&actual) * linalg::norm(&predicted));
        assert!(cosine >= 0.9, "cosine {cosine}");
    }

    #[test]
    fn up_loss_is_swap_symmetric() {
        let (data, params) = fixture(70, 3, 5, 0.05);
        let a = point_from(&data, 3);
        let b = point_from(&data, 9);
        let cfg = IhvpConfig::default();
        let ab = influence_up_loss(&data, &params, &a, &b, &cfg).unwrap();
        let ba = influence_up_loss(&data, &params, &b, &a, &cfg).unwrap();
        assert!((ab - ba).abs() <= 1e-10 * ab.abs().max(1.0), "{ab} vs {ba}");
    }

    #[test]
    fn removal_of_correct_point_raises_its_own_loss() {
        let ds = generate(&SyntheticConfig {
            n: 40,
            n_features: 3,
            weight_scale: 1.5,
            seed: 6,
            ..Default::default()
        })
        .unwrap();
        let data = encode(&ds, true).unwrap();
        let cfg = TrainConfig {
            l2_strength: 0.5,
            tolerance: 1e-12,
            ..Default::default()
        };
        let params = train(&data, &cfg).unwrap();
        // pick a correctly classified point
        let mut chosen = None;
        for i in 0..data.len() {
            let probs = model::predict_proba(&params, data.design.row(i)).unwrap();
            if (probs[data.labels[i]] - 0.5) > 0.05 {
                chosen = Some(i);
                break;
            }
        }
        let i = chosen.expect("some point is correctly classified");
        let z = point_from(&data, i);
        let inf = influence_up_loss(
            &data,
            &params,
            &z,
            &z,
            &IhvpConfig {
                damping: 0.0,
                ..Default::default()
            },
        )
        .unwrap();
        let predicted_removal_delta = -inf / data.len() as f64;
        assert!(predicted_removal_delta > 0.0);

        let keep: Vec<usize> = (0..data.len()).filter(|&j| j != i).collect();
        let retrained = train(&encode(&ds.subset(&keep).unwrap(), true).unwrap(), &cfg).unwrap();
        let before = model::loss_point(&params, z.x.view(), z.y).unwrap();
        let after = model::loss_point(&retrained, z.x.view(), z.y).unwrap();
        assert!(after > before, "removal should raise the point's loss");
    }

    #[test]
    fn identical_pairs_give_exactly_zero() {
        let (data, params) = fixture(60, 2, 7, 0.05);
        let cache = cache_for(&data, &params, &data);
        let pairs: Vec<PerturbedPair> = (0..5)
            .map(|i| PerturbedPair {
                original: point_from(&data, i),
                perturbed: point_from(&data, i),
            })
            .collect();
        let result = influence_pert_loss_g2g(&data, &params, &pairs, &cache).unwrap();
        assert_eq!(result.raw_influence, 0.0);
        assert_eq!(result.estimated_loss_delta, 0.0);

        let empty = influence_pert_loss_g2g(&data, &params, &[], &cache).unwrap();
        assert_eq!(empty.raw_influence, 0.0);
    }

    #[test]
    fn g2g_is_additive_over_disjoint_pair_sets() {
        let (data, params) = fixture(90, 2, 8, 0.05);
        let cache = cache_for(&data, &params, &data);
        let flip = |i: usize| PerturbedPair {
            original: point_from(&data, i),
            perturbed: EncodedPoint {
                x: data.design.row(i).to_owned(),
                y: 1 - data.labels[i],
            },
        };
        let set_a: Vec<PerturbedPair> = (0..6).map(flip).collect();
        let set_b: Vec<PerturbedPair> = (6..14).map(flip).collect();
        let both: Vec<PerturbedPair> = (0..14).map(flip).collect();
        let ra = influence_pert_loss_g2g(&data, &params, &set_a, &cache).unwrap();
        let rb = influence_pert_loss_g2g(&data, &params, &set_b, &cache).unwrap();
        let rab = influence_pert_loss_g2g(&data, &params, &both, &cache).unwrap();
        let rel = (rab.raw_influence - (ra.raw_influence + rb.raw_influence)).abs()
            / rab.raw_influence.abs().max(1e-30);
        assert!(rel <= 1e-10, "rel {rel}");
    }

    #[test]
    fn g2g_matches_retraining_on_tiny_instance() {
        // Two training points, strong regularization; perturb one label and
        // compare the estimate against the actual retrain delta.
        let ds = Dataset::new(
            vec![
                CategoricalDomain::new("f", vec!["a".into(), "b".into()]).unwrap(),
                CategoricalDomain::new("label", vec!["0".into(), "1".into()]).unwrap(),
            ],
            vec![vec![0, 0], vec![1, 1]],
            1,
        )
        .unwrap();
        let data = encode(&ds, true).unwrap();
        let cfg = TrainConfig {
            l2_strength: 1.0,
            tolerance: 1e-12,
            ..Default::default()
        };
        let params = train(&data, &cfg).unwrap();
        let cache = TestGradientCache::build(
            &data,
            &params,
            &data,
            &[0, 1],
            &IhvpConfig {
                damping: 0.0,
                ..Default::default()
            },
        )
        .unwrap();
        let pair = PerturbedPair {
            original: point_from(&data, 0),
            perturbed: EncodedPoint {
                x: data.design.row(0).to_owned(),
                y: 1,
            },
        };
        let estimate = influence_pert_loss_g2g(&data, &params, &[pair], &cache)
            .unwrap()
            .estimated_loss_delta;

        let mut flipped = ds.clone();
        flipped.records[0][1] = 1;
        let retrained = train(&encode(&flipped, true).unwrap(), &cfg).unwrap();
        let actual = mean_loss(&retrained, &data, None).unwrap()
            - mean_loss(&params, &data, None).unwrap();
        let rel = (estimate - actual).abs() / actual.abs();
        assert!(rel <= 0.20, "estimate {estimate}, actual {actual}, rel {rel}");
    }

    #[test]
    fn rr_label_empty_group_is_zero() {
        let (data, params) = fixture(50, 2, 9, 0.05);
        let cache = cache_for(&data, &params, &data);
        let result = influence_rr_label(&data, &params, &[], &cache, 1.0).unwrap();
        assert_eq!(result.raw_influence, 0.0);
    }

    #[test]
    fn rr_label_coefficient_decays_with_epsilon() {
        let (data, params) = fixture(80, 2, 10, 0.05);
        let cache = cache_for(&data, &params, &data);
        let group: Vec<usize> = (0..20).collect();
        let at_one = influence_rr_label(&data, &params, &group, &cache, 1.0).unwrap();
        let at_fifty = influence_rr_label(&data, &params, &group, &cache, 50.0).unwrap();
        assert!(
            at_fifty.raw_influence.abs() <= 1e-15 * at_one.raw_influence.abs(),
            "{} vs {}",
            at_fifty.raw_influence,
            at_one.raw_influence
        );
    }

    #[test]
    fn rr_restricted_to_label_matches_rr_label() {
        let (ds, data, params) = raw_fixture(100, 11, 0.05);
        let cache = cache_for(&data, &params, &data);
        let group: Vec<usize> = (5..35).collect();
        let epsilon = 0.8;
        let plan = PerturbationPlan::build(
            &[(ds.label_attribute, epsilon)],
            &ds.cardinalities(),
            PlanMode::Expectation,
        )
        .unwrap();
        let general = influence_rr(
            &ds,
            &data,
            &params,
            &group,
            &cache,
            &plan,
            ScalingMode::ExpectationExact,
            1_000_000,
        )
        .unwrap();
        let label = influence_rr_label(&data, &params, &group, &cache, epsilon).unwrap();
        let rel = (general.raw_influence - label.raw_influence).abs()
            / label.raw_influence.abs().max(1e-30);
        assert!(rel <= 1e-12, "rel {rel}");
    }

    #[test]
    fn binary_attribute_literal_equals_exact() {
        let (ds, data, params) = raw_fixture(100, 12, 0.05);
        let cache = cache_for(&data, &params, &data);
        let group: Vec<usize> = (0..25).collect();
        let plan = PerturbationPlan::build(
            &[(0, 3.0f64.ln())],
            &ds.cardinalities(),
            PlanMode::Expectation,
        )
        .unwrap();
        let literal = influence_rr(
            &ds,
            &data,
            &params,
            &group,
            &cache,
            &plan,
            ScalingMode::PaperLiteral,
            1_000_000,
        )
        .unwrap();
        let exact = influence_rr(
            &ds,
            &data,
            &params,
            &group,
            &cache,
            &plan,
            ScalingMode::ExpectationExact,
            1_000_000,
        )
        .unwrap();
        let rel = (literal.raw_influence - exact.raw_influence).abs()
            / exact.raw_influence.abs().max(1e-30);
        assert!(rel <= 1e-12, "rel {rel}");
    }

    #[test]
    fn rr_enumeration_cap_is_enforced() {
        let (ds, data, params) = raw_fixture(50, 13, 0.05);
        let cache = cache_for(&data, &params, &data);
        let plan = PerturbationPlan::build(
            &[(0, 1.0), (1, 1.0), (2, 1.0)],
            &ds.cardinalities(),
            PlanMode::Expectation,
        )
        .unwrap();
        let err = influence_rr(
            &ds,
            &data,
            &params,
            &[0],
            &cache,
            &plan,
            ScalingMode::ExpectationExact,
            4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn rr_flc_vanishes_at_large_epsilon() {
        let (data, params) = fixture(60, 2, 14, 0.05);
        let cache = cache_for(&data, &params, &data);
        let group: Vec<usize> = (0..15).collect();
        let at_forty = influence_rr_flc(&data, &params, &group, &cache, 40.0).unwrap();
        let at_one = influence_rr_flc(&data, &params, &group, &cache, 1.0).unwrap();
        assert!(at_forty.raw_influence.abs() <= 1e-12 * at_one.raw_influence.abs().max(1e-12));
    }

    #[test]
    fn approx_params_identity_when_nothing_changes() {
        let (data, params) = fixture(40, 2, 15, 0.1);
        let pairs = vec![PerturbedPair {
            original: point_from(&data, 2),
            perturbed: point_from(&data, 2),
        }];
        let updated =
            approx_params_after_perturbation(&data, &params, &pairs, &IhvpConfig::default())
                .unwrap();
        assert_eq!(updated.weights, params.weights);
    }

    #[test]
    fn approx_params_direction_matches_retraining() {
        let ds = generate(&SyntheticConfig {
            n: 60,
            n_features: 3,
            weight_scale: 1.5,
            seed: 16,
            ..Default::default()
        })
        .unwrap();
        let data = encode(&ds, true).unwrap();
        let cfg = TrainConfig {
            l2_strength: 1.0,
            tolerance: 1e-12,
            ..Default::default()
        };
        let params = train(&data, &cfg).unwrap();
        let pairs = vec![PerturbedPair {
            original: point_from(&data, 0),
            perturbed: EncodedPoint {
                x: data.design.row(0).to_owned(),
                y: 1 - data.labels[0],
            },
        }];
        let approx = approx_params_after_perturbation(
            &data,
            &params,
            &pairs,
            &IhvpConfig {
                damping: 0.0,
                ..Default::default()
            },
        )
        .unwrap();
        let predicted = &approx.flat() - &params.flat();

        let mut flipped = ds.clone();
        flipped.records[0][ds.label_attribute] = 1 - flipped.records[0][ds.label_attribute];
        let retrained = train(&encode(&flipped, true).unwrap(), &cfg).unwrap();
        let actual = &retrained.flat() - &params.flat();
        let cosine = predicted.dot(&actual) / (linalg::norm(&predicted) * linalg::norm(&actual));
        assert!(cosine >= 0.9, "cosine {cosine}");
    }

    #[test]
    fn approx_params_is_additive_in_pairs() {
        let (data, params) = fixture(70, 2, 17, 0.1);
        let cfg = IhvpConfig::default();
        let flip = |i: usize| PerturbedPair {
            original: point_from(&data, i),
            perturbed: EncodedPoint {
                x: data.design.row(i).to_owned(),
                y: 1 - data.labels[i],
            },
        };
        let a = vec![flip(0)];
        let b = vec![flip(1)];
        let both = vec![flip(0), flip(1)];
        let da = &approx_params_after_perturbation(&data, &params, &a, &cfg)
            .unwrap()
            .flat()
            - &params.flat();
        let db = &approx_params_after_perturbation(&data, &params, &b, &cfg)
            .unwrap()
            .flat()
            - &params.flat();
        let dab = &approx_params_after_perturbation(&data, &params, &both, &cfg)
            .unwrap()
            .flat()
            - &params.flat();
        let rel = linalg::norm(&(&dab - &(&da + &db))) / linalg::norm(&dab).max(1e-30);
        assert!(rel <= 1e-10, "rel {rel}");
    }

    #[test]
    fn delta_is_raw_over_n() {
        let (data, params) = fixture(64, 2, 18, 0.05);
        let cache = cache_for(&data, &params, &data);
        let group: Vec<usize> = (0..10).collect();
        let r = influence_rr_label(&data, &params, &group, &cache, 0.5).unwrap();
        assert_eq!(r.estimated_loss_delta, r.raw_influence / 64.0);
        assert_eq!(r.n_train, 64);
        assert_eq!(r.meta.group_size, 10);
    }

    #[test]
    fn joint_outcome_iterator_counts() {
        let all: Vec<Vec<usize>> = JointOutcomes::new(vec![2, 3]).collect();
        assert_eq!(all.len(), 6);
        assert_eq!(all[0], vec![0, 0]);
        assert!(all.contains(&vec![1, 2]));
    }

    #[test]
    fn multiclass_literal_scales_by_alternative_count() {
        // For label-only randomization with C > 2, the shared-scaling form
        // is exactly (C−1)× the per-outcome expectation.
        let ds = generate(&SyntheticConfig {
            n: 80,
            n_features: 3,
            n_classes: 4,
            seed: 19,
            ..Default::default()
        })
        .unwrap();
        let data = encode(&ds, true).unwrap();
        let params = train(
            &data,
            &TrainConfig {
                l2_strength: 0.05,
                ..Default::default()
            },
        )
        .unwrap();
        let cache = cache_for(&data, &params, &data);
        let group: Vec<usize> = (0..20).collect();
        let plan = PerturbationPlan::build(
            &[(ds.label_attribute, 1.0)],
            &ds.cardinalities(),
            PlanMode::Expectation,
        )
        .unwrap();
        let literal = influence_rr(
            &ds, &data, &params, &group, &cache, &plan,
            ScalingMode::PaperLiteral, 1_000_000,
        )
        .unwrap();
        let exact = influence_rr(
            &ds, &data, &params, &group, &cache, &plan,
            ScalingMode::ExpectationExact, 1_000_000,
        )
        .unwrap();
        let ratio = literal.raw_influence / exact.raw_influence;
        assert!((ratio - 3.0).abs() < 1e-9, "ratio {ratio}");
    }

    #[test]
    fn up_loss_positive_quadratic_on_self() {
        // −gᵀH⁻¹g is strictly negative for a nonzero gradient, H PD.
        let (data, params) = fixture(50, 2, 20, 0.1);
        let z = point_from(&data, 1);
        let val = influence_up_loss(&data, &params, &z, &z, &IhvpConfig::default()).unwrap();
        let g = model::grad_point(&params, z.x.view(), z.y).unwrap();
        if linalg::norm(&g) > 1e-12 {
            assert!(val < 0.0);
        }
    }

    #[test]
    fn rr_with_features_and_label_runs() {
        let (ds, data, params) = raw_fixture(120, 21, 0.05);
        let cache = cache_for(&data, &params, &data);
        let group: Vec<usize> = (0..30).collect();
        let plan = PerturbationPlan::build(
            &[(0, 1.0), (1, 1.0), (ds.label_attribute, 1.0)],
            &ds.cardinalities(),
            PlanMode::Expectation,
        )
        .unwrap();
        let result = influence_rr(
            &ds, &data, &params, &group, &cache, &plan,
            ScalingMode::ExpectationExact, 1_000_000,
        )
        .unwrap();
        assert!(result.raw_influence.is_finite());
        assert_eq!(result.meta.epsilons, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn monotone_coefficient_property() {
        let (data, params) = fixture(90, 2, 22, 0.05);
        let cache = cache_for(&data, &params, &data);
        let group: Vec<usize> = (0..25).collect();
        let mut last = f64::INFINITY;
        for eps in [0.01, 0.1, 0.5, 1.0, 2.0, 5.0] {
            let r = influence_rr_label(&data, &params, &group, &cache, eps).unwrap();
            let magnitude = r.raw_influence.abs();
            assert!(magnitude <= last * (1.0 + 1e-12), "not decreasing at {eps}");
            last = magnitude;
        }
    }

    #[test]
    fn dimension_errors_surface() {
        let (data, params) = fixture(30, 2, 23, 0.05);
        let cache = cache_for(&data, &params, &data);
        let bad_point = EncodedPoint {
            x: array![1.0],
            y: 0,
        };
        let err = influence_pert_loss_g2g(
            &data,
            &params,
            &[PerturbedPair {
                original: bad_point.clone(),
                perturbed: bad_point,
            }],
            &cache,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }
}
