//! Ground truth for the estimators: actually perturb the chosen group,
//! actually retrain (with or without forward loss correction), measure the
//! true test-loss change, and score estimates with MAE and Spearman's ρ.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correction::{train_with_flc, FlcObjective};
use crate::dataset::{encode, Dataset, EncodedDataset, GroupSpec};
use crate::error::{Error, Result};
use crate::influence::{
    influence_rr, influence_rr_flc, influence_rr_label, InfluenceResult, ScalingMode,
    TestGradientCache,
};
use crate::ihvp::IhvpConfig;
use crate::model::{self, mean_loss, train, ModelParams, TrainConfig};
use crate::randomize::{derive_record_seed, perturb_rows, PerturbationPlan, PlanMode};

/// Whether retraining applies the adjusted forward loss correction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrectionMode {
    None,
    Flc,
}

/// One retraining run against a perturbed group.
#[derive(Debug, Clone)]
pub struct OracleResult {
    /// `ℒ_te(retrained) − ℒ_te(baseline)` over S_te.
    pub signed_delta: f64,
    /// `|ℒ_te(retrained) − ℒ_te(baseline)|`, the comparison target.
    pub abs_delta: f64,
    pub baseline_test_loss: f64,
    pub retrained_test_loss: f64,
    pub retrained: ModelParams,
    pub wall_seconds: f64,
}

/// Perturb exactly the group rows per the plan, retrain from scratch with
/// identical configuration (zero init, no warm start), and measure the
/// test-loss change over S_te on clean test data.
pub fn retrain_actual(
    train_raw: &Dataset,
    test_enc: &EncodedDataset,
    baseline: &ModelParams,
    group: &GroupSpec,
    plan: &PerturbationPlan,
    correction: CorrectionMode,
    train_cfg: &TrainConfig,
    bias: bool,
    seed: u64,
) -> Result<OracleResult> {
    let start = Instant::now();
    if plan.mode() != PlanMode::Sample {
        return Err(Error::Config(
            "oracle retraining needs a plan with mode=sample; expectation plans are \
             analytic only"
                .into(),
        ));
    }
    let mut records = train_raw.records.clone();
    perturb_rows(&mut records, &group.group_indices, plan, seed);
    let noisy = Dataset::new(
        train_raw.attributes.clone(),
        records,
        train_raw.label_attribute,
    )?;
    let noisy_enc = encode(&noisy, bias)?;

    let retrained = match correction {
        CorrectionMode::None => train(&noisy_enc, train_cfg)?,
        CorrectionMode::Flc => {
            let label_entry = plan
                .entries()
                .iter()
                .find(|e| e.attribute == train_raw.label_attribute)
                .ok_or_else(|| {
                    Error::Config("FLC retraining requires the label in the plan".into())
                })?;
            if plan.entries().len() != 1 {
                return Err(Error::Config(
                    "FLC retraining supports label-only perturbation plans".into(),
                ));
            }
            let obj = FlcObjective::new(
                label_entry.matrix.clone(),
                group.group_indices.clone(),
                noisy_enc.len(),
            )?;
            train_with_flc(&noisy_enc, &obj, train_cfg)?
        }
    };

    let baseline_test_loss = mean_loss(baseline, test_enc, Some(&group.test_indices))?;
    let retrained_test_loss = mean_loss(&retrained, test_enc, Some(&group.test_indices))?;
    let signed_delta = retrained_test_loss - baseline_test_loss;
    Ok(OracleResult {
        signed_delta,
        abs_delta: signed_delta.abs(),
        baseline_test_loss,
        retrained_test_loss,
        retrained,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Ranks with ties assigned their average rank (1-based).
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of average ranks.
/// A constant list has no defined ranking spread; that case returns 0.
pub fn spearman_rho(estimates: &[f64], actuals: &[f64]) -> Result<f64> {
    if estimates.len() != actuals.len() {
        return Err(Error::Dimension {
            expected: estimates.len(),
            got: actuals.len(),
        });
    }
    if estimates.len() < 2 {
        return Err(Error::Data(
            "spearman_rho needs at least 2 paired values".into(),
        ));
    }
    let ra = average_ranks(estimates);
    let rb = average_ranks(actuals);
    let n = ra.len() as f64;
    let mean_a = ra.iter().sum::<f64>() / n;
    let mean_b = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (a, b) in ra.iter().zip(rb.iter()) {
        cov += (a - mean_a) * (b - mean_b);
        var_a += (a - mean_a).powi(2);
        var_b += (b - mean_b).powi(2);
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (var_a * var_b).sqrt())
}

/// Mean absolute error between paired lists.
pub fn mae(estimates: &[f64], actuals: &[f64]) -> Result<f64> {
    if estimates.len() != actuals.len() {
        return Err(Error::Dimension {
            expected: estimates.len(),
            got: actuals.len(),
        });
    }
    if estimates.is_empty() {
        return Err(Error::Data("mae over empty lists".into()));
    }
    Ok(estimates
        .iter()
        .zip(actuals.iter())
        .map(|(e, a)| (e - a).abs())
        .sum::<f64>()
        / estimates.len() as f64)
}

// ---------------------------------------------------------------------------
// Sweep comparison
// ---------------------------------------------------------------------------

/// Oracle activation: off, retrain every grid point, or retrain only `n`
/// evenly spaced ε values and fit a calibration line to them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "n")]
pub enum OracleMode {
    Off,
    On,
    Subsample(usize),
}

/// Everything the comparison engine needs beyond the data and groups.
#[derive(Debug, Clone)]
pub struct ComparisonConfig {
    pub epsilons: Vec<f64>,
    pub repeats: usize,
    /// Feature attributes randomized at each grid ε (empty for label-only).
    pub feature_attributes: Vec<usize>,
    pub randomize_label: bool,
    pub correction: CorrectionMode,
    pub scaling: ScalingMode,
    pub ihvp: IhvpConfig,
    pub train: TrainConfig,
    pub oracle: OracleMode,
    pub enumeration_cap: usize,
    pub bias: bool,
    pub seed: u64,
}

/// One (group, ε) grid cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub group_fraction: f64,
    pub group_size: usize,
    pub epsilon: f64,
    pub estimate_signed: f64,
    pub estimate_abs: f64,
    pub actual_signed_mean: Option<f64>,
    pub actual_abs_mean: Option<f64>,
    pub estimator_seconds: f64,
    pub oracle_seconds: Option<f64>,
}

/// Least-squares line mapping absolute estimates to absolute actuals, fit
/// over the retrained subsample when the oracle runs in subsample mode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub points: usize,
}

/// Per-group aggregates over the ε grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupAggregate {
    pub group_fraction: f64,
    pub group_size: usize,
    pub mae: Option<f64>,
    pub rho: Option<f64>,
    pub calibration: Option<LinearFit>,
}

/// Output of [`run_sweep_comparison`].
#[derive(Debug, Clone)]
pub struct ComparisonOutcome {
    pub rows: Vec<SweepRow>,
    pub groups: Vec<GroupAggregate>,
    /// Wall time of the estimator phase, including the single IHVP.
    pub estimator_seconds: f64,
    /// The IHVP share of the estimator phase.
    pub ihvp_seconds: f64,
    pub ihvp_residual: f64,
    /// Wall time of the oracle retraining phase (0 when the oracle is off).
    pub oracle_seconds: f64,
}

impl ComparisonConfig {
    fn validate(&self, train_raw: &Dataset) -> Result<()> {
        if self.epsilons.is_empty() {
            return Err(Error::Config("epsilon grid is empty".into()));
        }
        if self.epsilons.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::Config("epsilon grid values must be positive".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if self.feature_attributes.is_empty() && !self.randomize_label {
            return Err(Error::Config(
                "nothing to randomize: no feature attributes and label off".into(),
            ));
        }
        for &a in &self.feature_attributes {
            if a >= train_raw.attributes.len() {
                return Err(Error::Config(format!("attribute index {a} out of range")));
            }
            if a == train_raw.label_attribute {
                return Err(Error::Config(
                    "label attribute listed under feature_attributes; set randomize_label".into(),
                ));
            }
        }
        if self.correction == CorrectionMode::Flc
            && (!self.feature_attributes.is_empty() || !self.randomize_label)
        {
            return Err(Error::Config(
                "FLC correction applies to label-only randomization".into(),
            ));
        }
        Ok(())
    }

    fn plan_specs(&self, train_raw: &Dataset) -> Vec<usize> {
        let mut attrs = self.feature_attributes.clone();
        if self.randomize_label {
            attrs.push(train_raw.label_attribute);
        }
        attrs
    }
}

fn estimate_one(
    train_raw: &Dataset,
    train_enc: &EncodedDataset,
    params: &ModelParams,
    group: &GroupSpec,
    cache: &TestGradientCache,
    cfg: &ComparisonConfig,
    epsilon: f64,
) -> Result<InfluenceResult> {
    match cfg.correction {
        CorrectionMode::Flc => {
            influence_rr_flc(train_enc, params, &group.group_indices, cache, epsilon)
        }
        CorrectionMode::None => {
            let label_only = cfg.feature_attributes.is_empty() && cfg.randomize_label;
            if label_only && cfg.scaling == ScalingMode::ExpectationExact {
                influence_rr_label(train_enc, params, &group.group_indices, cache, epsilon)
            } else {
                let specs: Vec<(usize, f64)> = cfg
                    .plan_specs(train_raw)
                    .into_iter()
                    .map(|a| (a, epsilon))
                    .collect();
                let plan = PerturbationPlan::build(
                    &specs,
                    &train_raw.cardinalities(),
                    PlanMode::Expectation,
                )?;
                influence_rr(
                    train_raw,
                    train_enc,
                    params,
                    &group.group_indices,
                    cache,
                    &plan,
                    cfg.scaling,
                    cfg.enumeration_cap,
                )
            }
        }
    }
}

/// Indices of the ε grid the oracle retrains for.
fn oracle_grid_indices(mode: OracleMode, grid_len: usize) -> Vec<usize> {
    match mode {
        OracleMode::Off => vec![],
        OracleMode::On => (0..grid_len).collect(),
        OracleMode::Subsample(n) => {
            if n == 0 {
                return vec![];
            }
            if n >= grid_len {
                return (0..grid_len).collect();
            }
            if n == 1 {
                return vec![0];
            }
            let mut picks: Vec<usize> = (0..n)
                .map(|i| (i as f64 * (grid_len - 1) as f64 / (n - 1) as f64).round() as usize)
                .collect();
            picks.dedup();
            picks
        }
    }
}

fn least_squares_fit(estimates: &[f64], actuals: &[f64]) -> Option<LinearFit> {
    let n = estimates.len();
    if n < 2 {
        return None;
    }
    let nf = n as f64;
    let mean_x = estimates.iter().sum::<f64>() / nf;
    let mean_y = actuals.iter().sum::<f64>() / nf;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in estimates.iter().zip(actuals.iter()) {
        sxx += (x - mean_x).powi(2);
        sxy += (x - mean_x) * (y - mean_y);
    }
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    Some(LinearFit {
        slope,
        intercept: mean_y - slope * mean_x,
        points: n,
    })
}

/// Run the estimator over every (group, ε) cell, optionally retrain for
/// ground truth (`repeats` RR draws averaged, training held deterministic),
/// and aggregate per-group MAE and ρ over the grid.
///
/// Oracle draws use common random numbers: the perturbation seed depends on
/// the repeat index and the row, not on ε or the group, so nested groups and
/// neighboring ε values share draws and the actual-vs-ε curve is smooth.
pub fn run_sweep_comparison(
    train_raw: &Dataset,
    train_enc: &EncodedDataset,
    test_enc: &EncodedDataset,
    params: &ModelParams,
    groups: &[GroupSpec],
    cfg: &ComparisonConfig,
) -> Result<ComparisonOutcome> {
    cfg.validate(train_raw)?;
    if groups.is_empty() {
        return Err(Error::Config("no groups to sweep".into()));
    }
    let s_te = &groups[0].test_indices;
    for g in groups {
        if &g.test_indices != s_te {
            return Err(Error::Config(
                "all groups in one sweep must share the same S_te".into(),
            ));
        }
    }

    // Estimator phase: one IHVP, then one cheap task per grid cell.
    let estimator_start = Instant::now();
    let cache = TestGradientCache::build(train_enc, params, test_enc, s_te, &cfg.ihvp)?;
    let cells: Vec<(usize, usize)> = (0..groups.len())
        .flat_map(|g| (0..cfg.epsilons.len()).map(move |e| (g, e)))
        .collect();
    let estimates: Vec<Result<InfluenceResult>> = cells
        .par_iter()
        .map(|&(g, e)| {
            estimate_one(
                train_raw,
                train_enc,
                params,
                &groups[g],
                &cache,
                cfg,
                cfg.epsilons[e],
            )
        })
        .collect();
    let mut estimate_grid: Vec<Vec<InfluenceResult>> = vec![Vec::new(); groups.len()];
    for (&(g, _), result) in cells.iter().zip(estimates) {
        estimate_grid[g].push(result?);
    }
    let estimator_seconds = estimator_start.elapsed().as_secs_f64();

    // Oracle phase.
    let oracle_start = Instant::now();
    let oracle_eps = oracle_grid_indices(cfg.oracle, cfg.epsilons.len());
    let cardinalities = train_raw.cardinalities();
    let plan_attrs = cfg.plan_specs(train_raw);
    let mut oracle_grid: Vec<Vec<Option<(f64, f64, f64)>>> =
        vec![vec![None; cfg.epsilons.len()]; groups.len()];
    if !oracle_eps.is_empty() {
        let tasks: Vec<(usize, usize, usize)> = (0..groups.len())
            .flat_map(|g| {
                let eps = &oracle_eps;
                (0..cfg.repeats).flat_map(move |r| eps.iter().map(move |&e| (g, e, r)))
            })
            .collect();
        let runs: Vec<Result<(usize, usize, OracleResult)>> = tasks
            .par_iter()
            .map(|&(g, e, r)| {
                let epsilon = cfg.epsilons[e];
                let specs: Vec<(usize, f64)> =
                    plan_attrs.iter().map(|&a| (a, epsilon)).collect();
                let plan = PerturbationPlan::build(&specs, &cardinalities, PlanMode::Sample)?;
                let seed = derive_record_seed(cfg.seed, r as u64);
                let result = retrain_actual(
                    train_raw,
                    test_enc,
                    params,
                    &groups[g],
                    &plan,
                    cfg.correction,
                    &cfg.train,
                    cfg.bias,
                    seed,
                )?;
                Ok((g, e, result))
            })
            .collect();
        let mut sums: Vec<Vec<(f64, f64, f64, usize)>> =
            vec![vec![(0.0, 0.0, 0.0, 0); cfg.epsilons.len()]; groups.len()];
        for run in runs {
            let (g, e, result) = run?;
            let slot = &mut sums[g][e];
            slot.0 += result.signed_delta;
            slot.1 += result.abs_delta;
            slot.2 += result.wall_seconds;
            slot.3 += 1;
        }
        for g in 0..groups.len() {
            for e in 0..cfg.epsilons.len() {
                let (signed, abs, secs, count) = sums[g][e];
                if count > 0 {
                    let n = count as f64;
                    oracle_grid[g][e] = Some((signed / n, abs / n, secs));
                }
            }
        }
    }
    let oracle_seconds = oracle_start.elapsed().as_secs_f64();

    // Rows and per-group aggregates.
    let mut rows = Vec::with_capacity(groups.len() * cfg.epsilons.len());
    let mut aggregates = Vec::with_capacity(groups.len());
    for (g, group) in groups.iter().enumerate() {
        let mut est_abs = Vec::new();
        let mut act_abs = Vec::new();
        for (e, &epsilon) in cfg.epsilons.iter().enumerate() {
            let estimate = &estimate_grid[g][e];
            let oracle_cell = oracle_grid[g][e];
            rows.push(SweepRow {
                group_fraction: group.rule.fraction,
                group_size: group.group_size(),
                epsilon,
                estimate_signed: estimate.estimated_loss_delta,
                estimate_abs: estimate.estimated_loss_delta.abs(),
                actual_signed_mean: oracle_cell.map(|(s, _, _)| s),
                actual_abs_mean: oracle_cell.map(|(_, a, _)| a),
                estimator_seconds: estimate.meta.wall_seconds,
                oracle_seconds: oracle_cell.map(|(_, _, t)| t),
            });
            if let Some((_, abs, _)) = oracle_cell {
                est_abs.push(estimate.estimated_loss_delta.abs());
                act_abs.push(abs);
            }
        }
        let group_mae = if est_abs.is_empty() {
            None
        } else {
            Some(mae(&est_abs, &act_abs)?)
        };
        let group_rho = if est_abs.len() >= 2 {
            Some(spearman_rho(&est_abs, &act_abs)?)
        } else {
            None
        };
        let calibration = match cfg.oracle {
            OracleMode::Subsample(_) => least_squares_fit(&est_abs, &act_abs),
            _ => None,
        };
        aggregates.push(GroupAggregate {
            group_fraction: group.rule.fraction,
            group_size: group.group_size(),
            mae: group_mae,
            rho: group_rho,
            calibration,
        });
    }

    Ok(ComparisonOutcome {
        rows,
        groups: aggregates,
        estimator_seconds,
        ihvp_seconds: cache.ihvp_seconds,
        ihvp_residual: cache.ihvp_residual,
        oracle_seconds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{select_group, split, SelectionRule};
    use crate::synth::{generate, SyntheticConfig};

    fn pipeline(
        n: usize,
        seed: u64,
    ) -> (Dataset, EncodedDataset, EncodedDataset, ModelParams, GroupSpec) {
        let ds = generate(&SyntheticConfig {
            n,
            n_features: 4,
            seed,
            ..Default::default()
        })
        .unwrap();
        let (train_raw, test_raw) = split(&ds, 0.2, 0).unwrap();
        let train_enc = encode(&train_raw, true).unwrap();
        let test_enc = encode(&test_raw, true).unwrap();
        let params = train(
            &train_enc,
            &TrainConfig {
                l2_strength: 1e-2,
                ..Default::default()
            },
        )
        .unwrap();
        let group = select_group(
            &train_raw,
            test_enc.len(),
            &SelectionRule {
                attribute: 0,
                category: 1,
                fraction: 0.3,
                seed: 7,
            },
        )
        .unwrap();
        (train_raw, train_enc, test_enc, params, group)
    }

    fn label_plan(ds: &Dataset, epsilon: f64) -> PerturbationPlan {
        PerturbationPlan::build(
            &[(ds.label_attribute, epsilon)],
            &ds.cardinalities(),
            PlanMode::Sample,
        )
        .unwrap()
    }

    #[test]
    fn huge_epsilon_leaves_loss_unchanged() {
        let (train_raw, _, test_enc, params, group) = pipeline(600, 1);
        let cfg = TrainConfig {
            l2_strength: 1e-2,
            ..Default::default()
        };
        let result = retrain_actual(
            &train_raw,
            &test_enc,
            &params,
            &group,
            &label_plan(&train_raw, 50.0),
            CorrectionMode::None,
            &cfg,
            true,
            3,
        )
        .unwrap();
        assert!(result.abs_delta <= 1e-3, "delta {}", result.abs_delta);
    }

    #[test]
    fn empty_group_reproduces_baseline() {
        let (train_raw, _, test_enc, params, mut group) = pipeline(400, 2);
        group.group_indices.clear();
        let cfg = TrainConfig {
            l2_strength: 1e-2,
            ..Default::default()
        };
        let result = retrain_actual(
            &train_raw,
            &test_enc,
            &params,
            &group,
            &label_plan(&train_raw, 1.0),
            CorrectionMode::None,
            &cfg,
            true,
            4,
        )
        .unwrap();
        assert!(result.abs_delta <= 1e-6, "delta {}", result.abs_delta);
    }

    #[test]
    fn tiny_epsilon_hurts_more_than_large() {
        let (train_raw, _, test_enc, params, group) = pipeline(700, 3);
        let cfg = TrainConfig {
            l2_strength: 1e-2,
            ..Default::default()
        };
        let noisy = retrain_actual(
            &train_raw,
            &test_enc,
            &params,
            &group,
            &label_plan(&train_raw, 0.001),
            CorrectionMode::None,
            &cfg,
            true,
            5,
        )
        .unwrap();
        let calm = retrain_actual(
            &train_raw,
            &test_enc,
            &params,
            &group,
            &label_plan(&train_raw, 10.0),
            CorrectionMode::None,
            &cfg,
            true,
            5,
        )
        .unwrap();
        assert!(
            noisy.abs_delta > calm.abs_delta,
            "{} vs {}",
            noisy.abs_delta,
            calm.abs_delta
        );
    }

    #[test]
    fn retrain_is_reproducible() {
        let (train_raw, _, test_enc, params, group) = pipeline(300, 4);
        let cfg = TrainConfig {
            l2_strength: 1e-2,
            ..Default::default()
        };
        let a = retrain_actual(
            &train_raw, &test_enc, &params, &group,
            &label_plan(&train_raw, 0.5),
            CorrectionMode::None, &cfg, true, 9,
        )
        .unwrap();
        let b = retrain_actual(
            &train_raw, &test_enc, &params, &group,
            &label_plan(&train_raw, 0.5),
            CorrectionMode::None, &cfg, true, 9,
        )
        .unwrap();
        assert_eq!(a.signed_delta.to_bits(), b.signed_delta.to_bits());
        assert_eq!(a.retrained.weights, b.retrained.weights);
    }

    #[test]
    fn spearman_basic_cases() {
        assert_eq!(
            spearman_rho(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(),
            1.0
        );
        assert_eq!(
            spearman_rho(&[1.0, 2.0, 3.0], &[30.0, 20.0, 10.0]).unwrap(),
            -1.0
        );
    }

    #[test]
    fn spearman_tie_handling() {
        // [1,1,2] ranks to [1.5, 1.5, 3]; against [1,2,3] the average-rank
        // Pearson value is √3/2.
        let rho = spearman_rho(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        let expected = 3.0f64.sqrt() / 2.0;
        assert!((rho - expected).abs() < 1e-12, "rho {rho}");
    }

    #[test]
    fn spearman_constant_list_is_zero() {
        assert_eq!(spearman_rho(&[5.0, 5.0, 5.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
    }

    #[test]
    fn spearman_rejects_bad_lengths() {
        assert!(spearman_rho(&[1.0], &[1.0]).is_err());
        assert!(spearman_rho(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn spearman_invariant_under_monotone_transforms() {
        let a = [0.3, 1.2, 0.7, 2.5, 0.9];
        let b = [1.0, 3.0, 2.0, 5.0, 4.0];
        let base = spearman_rho(&a, &b).unwrap();
        let exp_a: Vec<f64> = a.iter().map(|v| v.exp()).collect();
        let affine_b: Vec<f64> = b.iter().map(|v| 3.0 * v + 7.0).collect();
        assert!((spearman_rho(&exp_a, &b).unwrap() - base).abs() < 1e-12);
        assert!((spearman_rho(&a, &affine_b).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn mae_cases() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[0.0, 1.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert!((mae(&[0.1, 0.3], &[0.2, 0.2]).unwrap() - 0.1).abs() < 1e-15);
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mae_triangle_inequality() {
        let a = [0.5, 1.5, -0.3];
        let b = [0.7, 1.0, 0.0];
        let c = [1.0, 0.5, 0.4];
        let ac = mae(&a, &c).unwrap();
        let ab = mae(&a, &b).unwrap();
        let bc = mae(&b, &c).unwrap();
        assert!(ac <= ab + bc + 1e-15);
    }

    fn comparison_config(eps: Vec<f64>, oracle: OracleMode) -> ComparisonConfig {
        ComparisonConfig {
            epsilons: eps,
            repeats: 1,
            feature_attributes: vec![],
            randomize_label: true,
            correction: CorrectionMode::None,
            scaling: ScalingMode::ExpectationExact,
            ihvp: IhvpConfig::default(),
            train: TrainConfig {
                l2_strength: 1e-2,
                ..Default::default()
            },
            oracle,
            enumeration_cap: 1_000_000,
            bias: true,
            seed: 0,
        }
    }

    #[test]
    fn sweep_row_counts_match_grid() {
        let (train_raw, train_enc, test_enc, params, group) = pipeline(500, 5);
        let groups = vec![group];
        let cfg = comparison_config(vec![0.1, 1.0, 5.0], OracleMode::Off);
        let outcome =
            run_sweep_comparison(&train_raw, &train_enc, &test_enc, &params, &groups, &cfg)
                .unwrap();
        assert_eq!(outcome.rows.len(), 3);
        assert!(outcome.rows.iter().all(|r| r.actual_abs_mean.is_none()));
        assert!(outcome.groups[0].mae.is_none());
        assert!(outcome.groups[0].rho.is_none());
        assert_eq!(outcome.oracle_seconds, 0.0);
    }

    #[test]
    fn sweep_with_oracle_fills_actuals() {
        let (train_raw, train_enc, test_enc, params, group) = pipeline(500, 6);
        let groups = vec![group];
        let cfg = comparison_config(vec![0.05, 0.5, 2.0], OracleMode::On);
        let outcome =
            run_sweep_comparison(&train_raw, &train_enc, &test_enc, &params, &groups, &cfg)
                .unwrap();
        assert!(outcome.rows.iter().all(|r| r.actual_abs_mean.is_some()));
        assert!(outcome.groups[0].mae.is_some());
        assert!(outcome.groups[0].rho.is_some());
        assert!(outcome.oracle_seconds > 0.0);
    }

    #[test]
    fn single_epsilon_grid_has_no_rho() {
        let (train_raw, train_enc, test_enc, params, group) = pipeline(400, 7);
        let groups = vec![group];
        let cfg = comparison_config(vec![1.0], OracleMode::On);
        let outcome =
            run_sweep_comparison(&train_raw, &train_enc, &test_enc, &params, &groups, &cfg)
                .unwrap();
        assert!(outcome.groups[0].rho.is_none());
        assert!(outcome.groups[0].mae.is_some());
    }

    #[test]
    fn subsample_mode_fits_calibration_line() {
        let (train_raw, train_enc, test_enc, params, group) = pipeline(500, 8);
        let groups = vec![group];
        let cfg = comparison_config(
            vec![0.05, 0.2, 0.8, 2.0, 5.0],
            OracleMode::Subsample(3),
        );
        let outcome =
            run_sweep_comparison(&train_raw, &train_enc, &test_enc, &params, &groups, &cfg)
                .unwrap();
        let with_actuals = outcome
            .rows
            .iter()
            .filter(|r| r.actual_abs_mean.is_some())
            .count();
        assert_eq!(with_actuals, 3);
        let fit = outcome.groups[0].calibration.as_ref().unwrap();
        assert_eq!(fit.points, 3);
        assert!(fit.slope.is_finite());
    }

    #[test]
    fn oracle_grid_index_selection() {
        assert_eq!(oracle_grid_indices(OracleMode::Off, 5), Vec::<usize>::new());
        assert_eq!(oracle_grid_indices(OracleMode::On, 3), vec![0, 1, 2]);
        assert_eq!(oracle_grid_indices(OracleMode::Subsample(2), 5), vec![0, 4]);
        assert_eq!(
            oracle_grid_indices(OracleMode::Subsample(3), 5),
            vec![0, 2, 4]
        );
        assert_eq!(
            oracle_grid_indices(OracleMode::Subsample(9), 4),
            vec![0, 1, 2, 3]
        );
    }

    #[test]
    fn flc_with_features_is_rejected() {
        let (train_raw, train_enc, test_enc, params, group) = pipeline(300, 9);
        let groups = vec![group];
        let mut cfg = comparison_config(vec![1.0], OracleMode::Off);
        cfg.correction = CorrectionMode::Flc;
        cfg.feature_attributes = vec![0];
        let err =
            run_sweep_comparison(&train_raw, &train_enc, &test_enc, &params, &groups, &cfg)
                .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn expectation_plan_cannot_drive_oracle() {
        let (train_raw, _, test_enc, params, group) = pipeline(300, 10);
        let plan = PerturbationPlan::build(
            &[(train_raw.label_attribute, 1.0)],
            &train_raw.cardinalities(),
            PlanMode::Expectation,
        )
        .unwrap();
        let err = retrain_actual(
            &train_raw,
            &test_enc,
            &params,
            &group,
            &plan,
            CorrectionMode::None,
            &TrainConfig::default(),
            true,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
