//! Inverse-Hessian-vector products `s = H⁻¹v` by three strategies: explicit
//! factorization (O(np²+p³), exact), conjugate gradient (O(np) per
//! iteration, never materializes H), and stochastic estimation (truncated
//! Neumann series over sampled per-point Hessians).
//!
//! Whatever the strategy, the product is computed once per test-gradient and
//! reused across every ε and group in a sweep; see
//! [`crate::influence::TestGradientCache`].

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::EncodedDataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{self, Link, ModelParams};
use crate::randomize::derive_record_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IhvpMethod {
    Explicit,
    Cg,
    Stochastic,
}

/// Strategy selection plus the knobs each strategy reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IhvpConfig {
    pub method: IhvpMethod,
    /// Extra ridge added on top of the model's own L2 strength.
    pub damping: f64,
    pub cg_tolerance: f64,
    pub cg_max_iters: usize,
    /// Recursion depth r of the stochastic estimator.
    pub se_recursion_depth: usize,
    /// Number of independent recursions t, averaged.
    pub se_repeats: usize,
    /// Series scale; `None` derives a safe value from the per-point Hessian
    /// norm bound. A user-set value is validated against a power-iteration
    /// estimate of ‖H‖ at run time.
    pub se_scale: Option<f64>,
    /// Minibatch size per recursion step.
    pub se_batch: usize,
    /// Largest parameter dimension the explicit path will materialize.
    pub explicit_cap: usize,
    pub seed: u64,
}

impl Default for IhvpConfig {
    fn default() -> Self {
        Self {
            method: IhvpMethod::Explicit,
            damping: 1e-2,
            cg_tolerance: 1e-8,
            cg_max_iters: 1000,
            se_recursion_depth: 500,
            se_repeats: 10,
            se_scale: None,
            se_batch: 1,
            explicit_cap: 4096,
            seed: 0,
        }
    }
}

impl IhvpConfig {
    fn validate(&self) -> Result<()> {
        if self.damping < 0.0 {
            return Err(Error::Config("ihvp damping must be nonnegative".into()));
        }
        if self.cg_tolerance <= 0.0 {
            return Err(Error::Config("cg_tolerance must be positive".into()));
        }
        if self.cg_max_iters == 0 || self.se_recursion_depth == 0 || self.se_repeats == 0 {
            return Err(Error::Config(
                "iteration counts must be at least 1".into(),
            ));
        }
        if self.se_batch == 0 {
            return Err(Error::Config("se_batch must be at least 1".into()));
        }
        if let Some(scale) = self.se_scale {
            if scale <= 0.0 {
                return Err(Error::Config("se_scale must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Solution plus solve telemetry.
#[derive(Debug, Clone)]
pub struct IhvpOutcome {
    pub solution: Array1<f64>,
    /// Relative residual ‖H s − v‖ / ‖v‖ actually achieved.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Per-iteration absolute residual norms (CG only).
    pub residual_history: Vec<f64>,
}

impl IhvpOutcome {
    fn exact_zero(dim: usize) -> Self {
        Self {
            solution: Array1::zeros(dim),
            residual: 0.0,
            iterations: 0,
            converged: true,
            residual_history: Vec::new(),
        }
    }
}

/// Dispatch on `cfg.method`.
pub fn solve(
    data: &EncodedDataset,
    params: &ModelParams,
    v: &Array1<f64>,
    cfg: &IhvpConfig,
) -> Result<IhvpOutcome> {
    match cfg.method {
        IhvpMethod::Explicit => ihvp_explicit(data, params, v, cfg),
        IhvpMethod::Cg => ihvp_cg(data, params, v, cfg),
        IhvpMethod::Stochastic => ihvp_stochastic(data, params, v, cfg),
    }
}

fn check_dims(params: &ModelParams, v: &Array1<f64>) -> Result<()> {
    if v.len() != params.param_dim() {
        return Err(Error::Dimension {
            expected: params.param_dim(),
            got: v.len(),
        });
    }
    Ok(())
}

/// Solve `H s = v` through a symmetric positive-definite factorization.
pub fn ihvp_explicit(
    data: &EncodedDataset,
    params: &ModelParams,
    v: &Array1<f64>,
    cfg: &IhvpConfig,
) -> Result<IhvpOutcome> {
    cfg.validate()?;
    check_dims(params, v)?;
    let dim = v.len();
    if dim > cfg.explicit_cap {
        return Err(Error::Config(format!(
            "parameter dimension {dim} exceeds the explicit-IHVP cap {}; use cg or stochastic",
            cfg.explicit_cap
        )));
    }
    let v_norm = linalg::norm(v);
    if v_norm == 0.0 {
        return Ok(IhvpOutcome::exact_zero(dim));
    }
    let h = model::hessian(data, params, cfg.damping)?;
    let solution = linalg::cholesky_solve(&h, v)?;
    let residual = linalg::norm(&(&h.dot(&solution) - v)) / v_norm;
    Ok(IhvpOutcome {
        solution,
        residual,
        iterations: 1,
        converged: residual <= 1e-8,
        residual_history: Vec::new(),
    })
}

/// Conjugate gradient on `H s = v`, touching H only through Hessian-vector
/// products. Stops at `cg_tolerance·‖v‖` or `cg_max_iters`, whichever comes
/// first; a max-iters exit still returns the iterate with its achieved
/// residual in the metadata.
pub fn ihvp_cg(
    data: &EncodedDataset,
    params: &ModelParams,
    v: &Array1<f64>,
    cfg: &IhvpConfig,
) -> Result<IhvpOutcome> {
    cfg.validate()?;
    check_dims(params, v)?;
    let dim = v.len();
    let v_norm = linalg::norm(v);
    if v_norm == 0.0 {
        return Ok(IhvpOutcome::exact_zero(dim));
    }
    let target = cfg.cg_tolerance * v_norm;

    let mut s = Array1::<f64>::zeros(dim);
    let mut r = v.clone();
    let mut p = r.clone();
    let mut rs = r.dot(&r);
    let mut history = vec![rs.sqrt()];
    let mut iterations = 0;
    while rs.sqrt() > target && iterations < cfg.cg_max_iters {
        let hp = model::hvp(data, params, p.view(), cfg.damping)?;
        let curvature = p.dot(&hp);
        if curvature <= 0.0 || !curvature.is_finite() {
            return Err(Error::Numerical(format!(
                "CG hit nonpositive curvature {curvature:.3e}; Hessian is not PD, increase damping"
            )));
        }
        let alpha = rs / curvature;
        s.scaled_add(alpha, &p);
        r.scaled_add(-alpha, &hp);
        let rs_new = r.dot(&r);
        let beta = rs_new / rs;
        p = &r + &(&p * beta);
        rs = rs_new;
        history.push(rs.sqrt());
        iterations += 1;
    }
    let residual = rs.sqrt() / v_norm;
    Ok(IhvpOutcome {
        solution: s,
        residual,
        iterations,
        converged: residual <= cfg.cg_tolerance,
        residual_history: history,
    })
}

/// Power-iteration estimate of the spectral norm of the damped Hessian.
pub fn estimate_hessian_norm(
    data: &EncodedDataset,
    params: &ModelParams,
    damping: f64,
    iterations: usize,
    seed: u64,
) -> Result<f64> {
    let dim = params.param_dim();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut w = Array1::from_iter((0..dim).map(|_| rng.random::<f64>() - 0.5));
    let mut norm_est = 0.0;
    for _ in 0..iterations.max(1) {
        let n = linalg::norm(&w);
        if n == 0.0 {
            return Ok(0.0);
        }
        w.mapv_inplace(|x| x / n);
        w = model::hvp(data, params, w.view(), damping)?;
        norm_est = linalg::norm(&w);
    }
    Ok(norm_est)
}

/// Upper bound on any single-point damped Hessian norm: used to derive the
/// default series scale. The per-class curvature factor is at most 1/4 for
/// the sigmoid link and 1/2 for softmax.
fn per_point_hessian_bound(data: &EncodedDataset, params: &ModelParams, damping: f64) -> f64 {
    let curvature_cap = match params.link {
        Link::Sigmoid => 0.25,
        Link::Softmax => 0.5,
    };
    let max_row_norm_sq = (0..data.len())
        .map(|i| {
            let row = data.design.row(i);
            row.dot(&row)
        })
        .fold(0.0f64, f64::max);
    curvature_cap * max_row_norm_sq + params.l2_strength + damping
}

/// Stochastic estimation: average `se_repeats` truncated Neumann recursions
/// `sⱼ₊₁ = v + (I − scale·Ĥ)sⱼ` of depth `se_recursion_depth`, where `Ĥ` is
/// the damped Hessian of a sampled minibatch; the average of `scale·s_r`
/// estimates `H⁻¹v`. Deterministic under the seed.
pub fn ihvp_stochastic(
    data: &EncodedDataset,
    params: &ModelParams,
    v: &Array1<f64>,
    cfg: &IhvpConfig,
) -> Result<IhvpOutcome> {
    cfg.validate()?;
    check_dims(params, v)?;
    let dim = v.len();
    let v_norm = linalg::norm(v);
    if v_norm == 0.0 {
        return Ok(IhvpOutcome::exact_zero(dim));
    }
    if data.is_empty() {
        return Err(Error::Data("stochastic IHVP over empty dataset".into()));
    }

    let ridge = params.l2_strength + cfg.damping;
    let scale = match cfg.se_scale {
        Some(scale) => {
            let h_norm = estimate_hessian_norm(data, params, cfg.damping, 30, cfg.seed ^ 0x5e)?;
            if scale * h_norm >= 1.0 {
                return Err(Error::Numerical(format!(
                    "se_scale {scale} is too large: scale·‖H‖ ≈ {:.3} must stay below 1",
                    scale * h_norm
                )));
            }
            scale
        }
        None => 0.95 / per_point_hessian_bound(data, params, cfg.damping),
    };

    // Largest norm the converged iterate can legitimately reach; 10× past it
    // means the recursion is diverging.
    let norm_cap = if ridge > 0.0 {
        10.0 * v_norm / (scale * ridge)
    } else {
        f64::INFINITY
    };

    let mut estimate = Array1::<f64>::zeros(dim);
    for repeat in 0..cfg.se_repeats {
        let mut rng = ChaCha12Rng::seed_from_u64(derive_record_seed(cfg.seed, repeat as u64));
        let mut s = v.clone();
        let mut hs = Array1::<f64>::zeros(dim);
        for _ in 0..cfg.se_recursion_depth {
            hs.fill(0.0);
            let batch: Vec<usize> = (0..cfg.se_batch)
                .map(|_| rng.random_range(0..data.len()))
                .collect();
            model::accumulate_hvp(data, params, s.view(), &mut hs, &batch, 1.0 / cfg.se_batch as f64)?;
            hs.scaled_add(ridge, &s);
            // s ← v + s − scale·Ĥs
            s += v;
            s.scaled_add(-scale, &hs);
            // the += above produced v + s_old in place; subtracting scale·Ĥs finishes the update
            let s_norm = linalg::norm(&s);
            if !s_norm.is_finite() || s_norm > norm_cap {
                return Err(Error::Numerical(format!(
                    "stochastic IHVP diverged (iterate norm {s_norm:.3e}); \
                     decrease se_scale or increase damping"
                )));
            }
        }
        estimate.scaled_add(scale / cfg.se_repeats as f64, &s);
    }

    let residual =
        linalg::norm(&(&model::hvp(data, params, estimate.view(), cfg.damping)? - v)) / v_norm;
    Ok(IhvpOutcome {
        solution: estimate,
        residual,
        iterations: cfg.se_recursion_depth * cfg.se_repeats,
        converged: true,
        residual_history: Vec::new(),
    })
}
