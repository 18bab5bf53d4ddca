//! Forward loss correction (FLC): training objectives that multiply the
//! predicted probability vector by `Pᵀ` before scoring against noisy labels,
//! so the minimizer under label noise matches the clean minimizer.
//!
//! Two variants: the full correction applied to every point, and the
//! adjusted objective that corrects only a known perturbed subset S while
//! scoring the remaining points R against their clean labels.
//!
//! The distortion matrices built here are symmetric, so `Pᵀ = P`; the
//! transpose is still applied explicitly so a future non-symmetric matrix
//! fails invariant checks loudly instead of giving silently wrong answers.

use ndarray::{Array1, Array2, ArrayView1};

use crate::dataset::EncodedDataset;
use crate::error::{Error, Result};
use crate::model::{
    self, accumulate_point_hessian, plain_curvature, Link, ModelParams, PointCurvature,
    TrainConfig,
};
use crate::randomize::DistortionMatrix;

/// Adjusted-FLC objective: the label distortion in force over the perturbed
/// indices S, with R = all other training rows scored uncorrected.
#[derive(Debug, Clone)]
pub struct FlcObjective {
    pub distortion: DistortionMatrix,
    pub perturbed: Vec<usize>,
    pub clean: Vec<usize>,
}

impl FlcObjective {
    /// Build from the perturbed set S; R is derived as the complement of S
    /// in `0..n_total`. Rejects singular distortions (ε = 0) and invalid S.
    pub fn new(distortion: DistortionMatrix, perturbed: Vec<usize>, n_total: usize) -> Result<Self> {
        if distortion.epsilon() == 0.0 {
            return Err(Error::Numerical(
                "FLC requires a nonsingular distortion matrix; epsilon 0 is rank 1".into(),
            ));
        }
        let mut in_s = vec![false; n_total];
        for &i in &perturbed {
            if i >= n_total {
                return Err(Error::Data(format!(
                    "perturbed index {i} out of range for {n_total} rows"
                )));
            }
            if in_s[i] {
                return Err(Error::Data(format!("perturbed index {i} listed twice")));
            }
            in_s[i] = true;
        }
        let clean = (0..n_total).filter(|&i| !in_s[i]).collect();
        let mut perturbed = perturbed;
        perturbed.sort_unstable();
        Ok(Self {
            distortion,
            perturbed,
            clean,
        })
    }
}

/// Column `y` of P as the weights `a_k = P[k → y]`, the corrected
/// probability `q_y = Σ a_k s_k`, and the posterior `u_k = a_k s_k / q_y`.
fn corrected_terms(
    p: &DistortionMatrix,
    probs: &Array1<f64>,
    y: usize,
) -> Result<(f64, Array1<f64>)> {
    let c = probs.len();
    if p.size() != c {
        return Err(Error::Dimension {
            expected: c,
            got: p.size(),
        });
    }
    if y >= c {
        return Err(Error::Data(format!("label {y} out of range for {c} classes")));
    }
    let mut q = 0.0;
    for k in 0..c {
        q += p.prob(k, y) * probs[k];
    }
    let mut u = Array1::<f64>::zeros(c);
    if q > 0.0 {
        for k in 0..c {
            u[k] = p.prob(k, y) * probs[k] / q;
        }
    }
    Ok((q, u))
}

/// Loss of one point under forward correction: `−log (Pᵀ ψ⁻¹(h(x)))_y`.
pub fn flc_point_loss(
    params: &ModelParams,
    p: &DistortionMatrix,
    x: ArrayView1<f64>,
    y: usize,
) -> Result<f64> {
    let probs = model::predict_proba(params, x)?;
    let (q, _) = corrected_terms(p, &probs, y)?;
    Ok(-(q.max(1e-300)).ln())
}

/// Gradient of [`flc_point_loss`] w.r.t. the flattened weights. In logit
/// space the gradient is `s − u`, with u the corrected posterior; at `P = I`
/// it reduces to the plain cross-entropy gradient `s − onehot(y)`.
pub fn flc_point_grad(
    params: &ModelParams,
    p: &DistortionMatrix,
    x: ArrayView1<f64>,
    y: usize,
) -> Result<Array1<f64>> {
    let probs = model::predict_proba(params, x)?;
    let (_, u) = corrected_terms(p, &probs, y)?;
    Ok(match params.link {
        Link::Sigmoid => {
            let coeff = probs[1] - u[1];
            x.mapv(|v| coeff * v)
        }
        Link::Softmax => {
            let c = probs.len();
            let width = params.width();
            let mut g = Array1::<f64>::zeros(c * width);
            for k in 0..c {
                let coeff = probs[k] - u[k];
                for j in 0..width {
                    g[k * width + j] = coeff * x[j];
                }
            }
            g
        }
    })
}

/// Logit-space curvature of the corrected loss:
/// `(diag(s) − ssᵀ) − (diag(u) − uuᵀ)`. Not guaranteed PSD, which is why
/// Newton training retries with extra ridge on factorization failure.
fn flc_curvature(link: Link, probs: &Array1<f64>, u: &Array1<f64>) -> PointCurvature {
    match link {
        Link::Sigmoid => PointCurvature::Scalar(
            probs[1] * (1.0 - probs[1]) - u[1] * (1.0 - u[1]),
        ),
        Link::Softmax => {
            let c = probs.len();
            let mut m = Array2::<f64>::zeros((c, c));
            for k in 0..c {
                for l in 0..c {
                    let plain = f64::from(k == l) * probs[k] - probs[k] * probs[l];
                    let corr = f64::from(k == l) * u[k] - u[k] * u[l];
                    m[[k, l]] = plain - corr;
                }
            }
            PointCurvature::Matrix(m)
        }
    }
}

/// Fully corrected empirical risk: every label treated as noisy.
/// Accepts a singular (ε = 0) matrix so the uniform limit is evaluable as a
/// loss value, even though training with one is rejected.
pub fn flc_loss(data: &EncodedDataset, params: &ModelParams, p: &DistortionMatrix) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("FLC loss over empty dataset".into()));
    }
    let mut total = 0.0;
    for i in 0..data.len() {
        total += flc_point_loss(params, p, data.design.row(i), data.labels[i])?;
    }
    Ok(total / data.len() as f64)
}

/// Adjusted objective of the partial-perturbation setting:
/// `(1/n)[ Σ_{i∈R} ℓ(h(xⁱ), yⁱ) + Σ_{j∈S} ℓ(Pᵀh(xʲ), ỹʲ) ]`.
pub fn flc_adjusted_loss(
    data: &EncodedDataset,
    params: &ModelParams,
    obj: &FlcObjective,
) -> Result<f64> {
    check_cover(data, obj)?;
    let mut total = 0.0;
    for &i in &obj.clean {
        total += model::loss_point(params, data.design.row(i), data.labels[i])?;
    }
    for &j in &obj.perturbed {
        total += flc_point_loss(params, &obj.distortion, data.design.row(j), data.labels[j])?;
    }
    Ok(total / data.len() as f64)
}

/// Gradient of [`flc_adjusted_loss`] w.r.t. the flattened weights.
pub fn flc_adjusted_grad(
    data: &EncodedDataset,
    params: &ModelParams,
    obj: &FlcObjective,
) -> Result<Array1<f64>> {
    check_cover(data, obj)?;
    let mut g = Array1::<f64>::zeros(params.param_dim());
    for &i in &obj.clean {
        g += &model::grad_point(params, data.design.row(i), data.labels[i])?;
    }
    for &j in &obj.perturbed {
        g += &flc_point_grad(params, &obj.distortion, data.design.row(j), data.labels[j])?;
    }
    Ok(g / data.len() as f64)
}

fn flc_adjusted_hessian(
    data: &EncodedDataset,
    params: &ModelParams,
    obj: &FlcObjective,
) -> Result<Array2<f64>> {
    check_cover(data, obj)?;
    let q = params.param_dim();
    let mut h = Array2::<f64>::zeros((q, q));
    let scale = 1.0 / data.len() as f64;
    for &i in &obj.clean {
        let x = data.design.row(i);
        let probs = model::predict_proba(params, x)?;
        let curvature = plain_curvature(params.link, &probs);
        accumulate_point_hessian(&mut h, x, &curvature, scale);
    }
    for &j in &obj.perturbed {
        let x = data.design.row(j);
        let probs = model::predict_proba(params, x)?;
        let (_, u) = corrected_terms(&obj.distortion, &probs, data.labels[j])?;
        let curvature = flc_curvature(params.link, &probs, &u);
        accumulate_point_hessian(&mut h, x, &curvature, scale);
    }
    for d in 0..q {
        h[[d, d]] += params.l2_strength;
    }
    Ok(h)
}

fn check_cover(data: &EncodedDataset, obj: &FlcObjective) -> Result<()> {
    if obj.clean.len() + obj.perturbed.len() != data.len() {
        return Err(Error::Data(format!(
            "FLC index sets cover {} rows, dataset has {}",
            obj.clean.len() + obj.perturbed.len(),
            data.len()
        )));
    }
    if let Some(&max) = obj.perturbed.iter().max() {
        if max >= data.len() {
            return Err(Error::Data(format!(
                "perturbed index {max} out of range for {} rows",
                data.len()
            )));
        }
    }
    Ok(())
}

/// Minimize the adjusted FLC objective plus the usual L2 term.
/// With S = ∅ this follows exactly the same trajectory as [`model::train`].
pub fn train_with_flc(
    data: &EncodedDataset,
    obj: &FlcObjective,
    cfg: &TrainConfig,
) -> Result<ModelParams> {
    if data.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    if obj.distortion.size() != data.n_classes {
        return Err(Error::Dimension {
            expected: data.n_classes,
            got: obj.distortion.size(),
        });
    }
    let link = if data.n_classes == 2 {
        Link::Sigmoid
    } else {
        Link::Softmax
    };
    let mut params = ModelParams::zeros(link, data.n_classes, data.width(), cfg.l2_strength)?;
    let meta = model::minimize(
        &mut params,
        cfg,
        &|p| {
            let flat = p.flat();
            Ok(flc_adjusted_loss(data, p, obj)? + 0.5 * p.l2_strength * flat.dot(&flat))
        },
        &|p| {
            let mut g = flc_adjusted_grad(data, p, obj)?;
            g += &(p.flat() * p.l2_strength);
            Ok(g)
        },
        &|p| flc_adjusted_hessian(data, p, obj),
    )?;
    params.meta = Some(meta);
    Ok(params)
}

/// Combine K per-group label distributions and their row-stochastic
/// distortion matrices into one population-level pair `(π, P)` with
/// `π_c = Σ_k π_c^k` and `p_uv = Σ_k (π_u^k/π_u)·p_uv^k`.
///
/// Inputs are group-mass-weighted sub-distributions (each `π^k` carries its
/// group's share, so the output sums to the total mass). The composed pair
/// satisfies `Σ_k (P^k)ᵀ π^k = Pᵀ π`.
pub fn compose_group_distortions(
    groups: &[(Array1<f64>, Array2<f64>)],
) -> Result<(Array1<f64>, Array2<f64>)> {
    if groups.is_empty() {
        return Err(Error::Data("no groups to compose".into()));
    }
    let c = groups[0].0.len();
    for (pi_k, p_k) in groups {
        if pi_k.len() != c {
            return Err(Error::Dimension {
                expected: c,
                got: pi_k.len(),
            });
        }
        if p_k.nrows() != c || p_k.ncols() != c {
            return Err(Error::Dimension {
                expected: c,
                got: p_k.nrows().max(p_k.ncols()),
            });
        }
        if pi_k.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::Data("group distribution has negative mass".into()));
        }
        for u in 0..c {
            let row_sum: f64 = (0..c).map(|v| p_k[[u, v]]).sum();
            if (row_sum - 1.0).abs() > 1e-9 {
                return Err(Error::Data(format!(
                    "group distortion row {u} sums to {row_sum}, not 1"
                )));
            }
        }
    }

    let mut pi = Array1::<f64>::zeros(c);
    for (pi_k, _) in groups {
        pi += pi_k;
    }
    let mut p = Array2::<f64>::zeros((c, c));
    for u in 0..c {
        if pi[u] == 0.0 {
            return Err(Error::Numerical(format!(
                "category {u} has zero total mass; composed ratio is undefined"
            )));
        }
        for (pi_k, p_k) in groups {
            let weight = pi_k[u] / pi[u];
            for v in 0..c {
                p[[u, v]] += weight * p_k[[u, v]];
            }
        }
    }
    Ok((pi, p))
}
