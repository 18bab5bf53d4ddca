//! Convex classifier: binary logistic regression (sigmoid link) or
//! multinomial softmax regression, with closed-form per-point gradients and
//! Hessians of the cross-entropy loss.
//!
//! The training objective is `(1/n) Σ ℓ(zⁱ,θ) + (l2/2)·‖θ‖²`. Per-point
//! losses returned by [`loss_point`] exclude the regularizer; it enters only
//! the objective and the Hessian, so it cancels in every loss difference the
//! influence estimators form.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::dataset::EncodedDataset;
use crate::error::{Error, Result};
use crate::linalg;

/// Inverse-link choice; also fixes the weight-matrix shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    /// Binary classifier, weights stored as a single row.
    Sigmoid,
    /// C-class classifier, weights stored as C rows, no reference-class
    /// pinning; the L2 term keeps the parameterization identifiable.
    Softmax,
}

/// Fitted (or hand-constructed) classifier parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `rows × p` weight matrix: 1 row for sigmoid, C rows for softmax.
    pub weights: Array2<f64>,
    pub link: Link,
    pub l2_strength: f64,
    pub meta: Option<TrainMeta>,
}

/// Training outcome carried on the fitted parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub converged: bool,
    pub epochs_run: usize,
    pub final_grad_norm: f64,
}

impl ModelParams {
    /// Zero-initialized parameters for `n_classes` over width `p`.
    pub fn zeros(link: Link, n_classes: usize, p: usize, l2_strength: f64) -> Result<Self> {
        let rows = match link {
            Link::Sigmoid => {
                if n_classes != 2 {
                    return Err(Error::Config(format!(
                        "sigmoid link requires 2 classes, got {n_classes}"
                    )));
                }
                1
            }
            Link::Softmax => n_classes,
        };
        Ok(Self {
            weights: Array2::zeros((rows, p)),
            link,
            l2_strength,
            meta: None,
        })
    }

    /// Number of classes this parameterization scores.
    pub fn n_classes(&self) -> usize {
        match self.link {
            Link::Sigmoid => 2,
            Link::Softmax => self.weights.nrows(),
        }
    }

    /// Design-matrix width p.
    pub fn width(&self) -> usize {
        self.weights.ncols()
    }

    /// Total parameter dimension (p for sigmoid, C·p for softmax).
    pub fn param_dim(&self) -> usize {
        self.weights.len()
    }

    /// Flattened (row-major) copy of the weights.
    pub fn flat(&self) -> Array1<f64> {
        Array1::from_iter(self.weights.iter().cloned())
    }

    /// Replace the weights from a flat row-major vector.
    pub fn set_flat(&mut self, flat: &Array1<f64>) -> Result<()> {
        if flat.len() != self.param_dim() {
            return Err(Error::Dimension {
                expected: self.param_dim(),
                got: flat.len(),
            });
        }
        let (rows, p) = (self.weights.nrows(), self.weights.ncols());
        self.weights =
            Array2::from_shape_vec((rows, p), flat.to_vec()).expect("shape checked above");
        Ok(())
    }

    /// Serialize to the JSON checkpoint document.
    pub fn to_checkpoint_json(&self) -> String {
        let doc = CheckpointDoc {
            weights: self
                .weights
                .outer_iter()
                .map(|row| row.to_vec())
                .collect(),
            link: self.link,
            l2_strength: self.l2_strength,
            meta: self.meta.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("checkpoint serializes")
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let doc: CheckpointDoc = serde_json::from_str(text)
            .map_err(|e| Error::Data(format!("invalid checkpoint JSON: {e}")))?;
        let rows = doc.weights.len();
        if rows == 0 {
            return Err(Error::Data("checkpoint has no weight rows".into()));
        }
        let p = doc.weights[0].len();
        if doc.weights.iter().any(|r| r.len() != p) {
            return Err(Error::Data("ragged weight rows in checkpoint".into()));
        }
        let flat: Vec<f64> = doc.weights.into_iter().flatten().collect();
        Ok(Self {
            weights: Array2::from_shape_vec((rows, p), flat).expect("shape prechecked"),
            link: doc.link,
            l2_strength: doc.l2_strength,
            meta: doc.meta,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    weights: Vec<Vec<f64>>,
    link: Link,
    l2_strength: f64,
    meta: Option<TrainMeta>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    Newton,
    GradientDescent,
}

/// Training configuration. `l2_strength` is copied onto the fitted params.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub tolerance: f64,
    pub l2_strength: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Newton,
            learning_rate: 1e-3,
            max_epochs: 100,
            tolerance: 1e-8,
            l2_strength: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.tolerance <= 0.0 {
            return Err(Error::Config("tolerance must be positive".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.l2_strength < 0.0 {
            return Err(Error::Config("l2_strength must be nonnegative".into()));
        }
        if self.optimizer == Optimizer::Newton && self.l2_strength == 0.0 {
            return Err(Error::Config(
                "newton optimizer requires l2_strength > 0 for strict convexity".into(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Link evaluations
// ---------------------------------------------------------------------------

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn logits(params: &ModelParams, x: ArrayView1<f64>) -> Result<Array1<f64>> {
    if x.len() != params.width() {
        return Err(Error::Dimension {
            expected: params.width(),
            got: x.len(),
        });
    }
    Ok(params.weights.dot(&x))
}

/// Class probabilities for one feature row. Entries sum to 1 within 1e−12.
pub fn predict_proba(params: &ModelParams, x: ArrayView1<f64>) -> Result<Array1<f64>> {
    let z = logits(params, x)?;
    match params.link {
        Link::Sigmoid => {
            let p1 = sigmoid(z[0]);
            Ok(Array1::from_vec(vec![1.0 - p1, p1]))
        }
        Link::Softmax => {
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut e = z.mapv(|v| (v - max).exp());
            let total = e.sum();
            e.mapv_inplace(|v| v / total);
            Ok(e)
        }
    }
}

/// Cross-entropy `−log P(y|x)` of one point. Excludes the regularizer.
pub fn loss_point(params: &ModelParams, x: ArrayView1<f64>, y: usize) -> Result<f64> {
    if y >= params.n_classes() {
        return Err(Error::Data(format!(
            "label {y} out of range for {} classes",
            params.n_classes()
        )));
    }
    let z = logits(params, x)?;
    Ok(match params.link {
        Link::Sigmoid => {
            if y == 1 {
                softplus(-z[0])
            } else {
                softplus(z[0])
            }
        }
        Link::Softmax => {
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - z[y]
        }
    })
}

/// Closed-form gradient of [`loss_point`] w.r.t. the flattened weights:
/// `(ψ⁻¹(logits) − onehot(y)) ⊗ x`.
pub fn grad_point(params: &ModelParams, x: ArrayView1<f64>, y: usize) -> Result<Array1<f64>> {
    if y >= params.n_classes() {
        return Err(Error::Data(format!(
            "label {y} out of range for {} classes",
            params.n_classes()
        )));
    }
    let probs = predict_proba(params, x)?;
    Ok(match params.link {
        Link::Sigmoid => {
            let coeff = probs[1] - y as f64;
            x.mapv(|v| coeff * v)
        }
        Link::Softmax => {
            let c = params.n_classes();
            let p = params.width();
            let mut g = Array1::<f64>::zeros(c * p);
            for k in 0..c {
                let coeff = probs[k] - f64::from(k == y);
                for j in 0..p {
                    g[k * p + j] = coeff * x[j];
                }
            }
            g
        }
    })
}

/// Mean loss over `indices` (all rows when `None`). Excludes the regularizer.
pub fn mean_loss(
    params: &ModelParams,
    data: &EncodedDataset,
    indices: Option<&[usize]>,
) -> Result<f64> {
    let sum_over = |idx: &mut dyn Iterator<Item = usize>| -> Result<(f64, usize)> {
        let mut total = 0.0;
        let mut count = 0;
        for i in idx {
            total += loss_point(params, data.design.row(i), data.labels[i])?;
            count += 1;
        }
        Ok((total, count))
    };
    let (total, count) = match indices {
        Some(list) => sum_over(&mut list.iter().cloned())?,
        None => sum_over(&mut (0..data.len()))?,
    };
    if count == 0 {
        return Err(Error::Data("mean loss over empty index set".into()));
    }
    Ok(total / count as f64)
}

/// Gradient of the mean loss over `indices` (all rows when `None`).
pub fn mean_grad(
    params: &ModelParams,
    data: &EncodedDataset,
    indices: Option<&[usize]>,
) -> Result<Array1<f64>> {
    let mut g = Array1::<f64>::zeros(params.param_dim());
    let mut count = 0usize;
    let mut add = |i: usize| -> Result<()> {
        g += &grad_point(params, data.design.row(i), data.labels[i])?;
        count += 1;
        Ok(())
    };
    match indices {
        Some(list) => {
            for &i in list {
                add(i)?;
            }
        }
        None => {
            for i in 0..data.len() {
                add(i)?;
            }
        }
    }
    if count == 0 {
        return Err(Error::Data("mean gradient over empty index set".into()));
    }
    Ok(g / count as f64)
}

/// Regularized empirical risk: mean loss plus `(l2/2)·‖θ‖²`.
pub fn objective(params: &ModelParams, data: &EncodedDataset) -> Result<f64> {
    let flat = params.flat();
    Ok(mean_loss(params, data, None)? + 0.5 * params.l2_strength * flat.dot(&flat))
}

/// Gradient of the regularized empirical risk.
pub fn objective_grad(params: &ModelParams, data: &EncodedDataset) -> Result<Array1<f64>> {
    let mut g = mean_grad(params, data, None)?;
    g += &(params.flat() * params.l2_strength);
    Ok(g)
}

/// Per-point loss curvature in logit space: a scalar for the sigmoid link,
/// a C×C matrix for softmax. The full per-point Hessian is this curvature
/// Kronecker-multiplied with `x xᵀ`.
pub(crate) enum PointCurvature {
    Scalar(f64),
    Matrix(Array2<f64>),
}

/// Curvature of the plain cross-entropy loss at predicted probabilities.
pub(crate) fn plain_curvature(link: Link, probs: &Array1<f64>) -> PointCurvature {
    match link {
        Link::Sigmoid => PointCurvature::Scalar(probs[1] * (1.0 - probs[1])),
        Link::Softmax => {
            let c = probs.len();
            let mut m = Array2::<f64>::zeros((c, c));
            for k in 0..c {
                for l in 0..c {
                    m[[k, l]] = f64::from(k == l) * probs[k] - probs[k] * probs[l];
                }
            }
            PointCurvature::Matrix(m)
        }
    }
}

/// Add `scale · (curvature ⊗ x xᵀ)` into `h`.
pub(crate) fn accumulate_point_hessian(
    h: &mut Array2<f64>,
    x: ArrayView1<f64>,
    curvature: &PointCurvature,
    scale: f64,
) {
    let p = x.len();
    match curvature {
        PointCurvature::Scalar(w) => {
            let w = w * scale;
            for a in 0..p {
                let xa = x[a];
                if xa == 0.0 {
                    continue;
                }
                for b in 0..p {
                    h[[a, b]] += w * xa * x[b];
                }
            }
        }
        PointCurvature::Matrix(m) => {
            let c = m.nrows();
            for k in 0..c {
                for l in 0..c {
                    let s = m[[k, l]] * scale;
                    if s == 0.0 {
                        continue;
                    }
                    for a in 0..p {
                        let xa = x[a];
                        if xa == 0.0 {
                            continue;
                        }
                        for b in 0..p {
                            h[[k * p + a, l * p + b]] += s * xa * x[b];
                        }
                    }
                }
            }
        }
    }
}

/// Full Hessian of the training objective plus extra `damping`:
/// `(1/n) Σ ∇²ℓ(zⁱ,θ) + (l2_strength + damping)·I`.
pub fn hessian(data: &EncodedDataset, params: &ModelParams, damping: f64) -> Result<Array2<f64>> {
    if data.is_empty() {
        return Err(Error::Data("hessian of empty dataset".into()));
    }
    let q = params.param_dim();
    let mut h = Array2::<f64>::zeros((q, q));
    let scale = 1.0 / data.len() as f64;
    for i in 0..data.len() {
        let x = data.design.row(i);
        let probs = predict_proba(params, x)?;
        let curvature = plain_curvature(params.link, &probs);
        accumulate_point_hessian(&mut h, x, &curvature, scale);
    }
    let ridge = params.l2_strength + damping;
    for d in 0..q {
        h[[d, d]] += ridge;
    }
    Ok(h)
}

/// Hessian-vector product `H·v` without materializing H. Agrees with
/// [`hessian`]`·v` to machine precision.
pub fn hvp(
    data: &EncodedDataset,
    params: &ModelParams,
    v: ArrayView1<f64>,
    damping: f64,
) -> Result<Array1<f64>> {
    if data.is_empty() {
        return Err(Error::Data("hvp over empty dataset".into()));
    }
    if v.len() != params.param_dim() {
        return Err(Error::Dimension {
            expected: params.param_dim(),
            got: v.len(),
        });
    }
    let mut out = Array1::<f64>::zeros(v.len());
    let scale = 1.0 / data.len() as f64;
    accumulate_hvp(data, params, v, &mut out, &(0..data.len()).collect::<Vec<_>>(), scale)?;
    out += &(&v.to_owned() * (params.l2_strength + damping));
    Ok(out)
}

/// Add `scale · Σ_{i∈rows} ∇²ℓ(zⁱ)·v` into `out` (no ridge term).
pub(crate) fn accumulate_hvp(
    data: &EncodedDataset,
    params: &ModelParams,
    v: ArrayView1<f64>,
    out: &mut Array1<f64>,
    rows: &[usize],
    scale: f64,
) -> Result<()> {
    let p = params.width();
    match params.link {
        Link::Sigmoid => {
            for &i in rows {
                let x = data.design.row(i);
                let probs = predict_proba(params, x)?;
                let w = probs[1] * (1.0 - probs[1]) * scale;
                let xv = x.dot(&v);
                out.scaled_add(w * xv, &x);
            }
        }
        Link::Softmax => {
            let c = params.n_classes();
            for &i in rows {
                let x = data.design.row(i);
                let probs = predict_proba(params, x)?;
                // t_l = x · v_l (row l of v viewed as C×p)
                let mut t = Array1::<f64>::zeros(c);
                for l in 0..c {
                    let mut dot = 0.0;
                    for j in 0..p {
                        dot += x[j] * v[l * p + j];
                    }
                    t[l] = dot;
                }
                let st = probs.dot(&t);
                for k in 0..c {
                    let u = probs[k] * (t[k] - st) * scale;
                    if u == 0.0 {
                        continue;
                    }
                    for j in 0..p {
                        out[k * p + j] += u * x[j];
                    }
                }
            }
        }
    }
    Ok(())
}

/// Fraction of rows whose argmax prediction matches the label.
pub fn accuracy(params: &ModelParams, data: &EncodedDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("accuracy over empty dataset".into()));
    }
    let mut hits = 0usize;
    for i in 0..data.len() {
        let probs = predict_proba(params, data.design.row(i))?;
        let pred = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probs"))
            .map(|(k, _)| k)
            .expect("nonempty probs");
        if pred == data.labels[i] {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Fit by Newton's method or full-batch gradient descent from zero
/// initialization. Non-convergence within `max_epochs` is reported through
/// `meta.converged`, not an error.
pub fn train(data: &EncodedDataset, cfg: &TrainConfig) -> Result<ModelParams> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    let link = if data.n_classes == 2 {
        Link::Sigmoid
    } else {
        Link::Softmax
    };
    let mut params = ModelParams::zeros(link, data.n_classes, data.width(), cfg.l2_strength)?;
    let meta = minimize(
        &mut params,
        cfg,
        &|p| objective(p, data),
        &|p| objective_grad(p, data),
        &|p| hessian(data, p, 0.0),
    )?;
    params.meta = Some(meta);
    Ok(params)
}

/// Shared minimizer driving both [`train`] and FLC training: Newton with a
/// halving line search and damping retry, or plain gradient descent.
pub(crate) fn minimize(
    params: &mut ModelParams,
    cfg: &TrainConfig,
    objective_fn: &dyn Fn(&ModelParams) -> Result<f64>,
    grad_fn: &dyn Fn(&ModelParams) -> Result<Array1<f64>>,
    hessian_fn: &dyn Fn(&ModelParams) -> Result<Array2<f64>>,
) -> Result<TrainMeta> {
    let mut grad_norm = f64::INFINITY;
    let mut epochs_run = 0;
    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        let g = grad_fn(params)?;
        grad_norm = linalg::norm(&g);
        if !grad_norm.is_finite() {
            return Err(Error::Numerical(format!(
                "gradient diverged at epoch {epoch}"
            )));
        }
        if grad_norm <= cfg.tolerance {
            return Ok(TrainMeta {
                converged: true,
                epochs_run: epoch - 1,
                final_grad_norm: grad_norm,
            });
        }
        match cfg.optimizer {
            Optimizer::GradientDescent => {
                let flat = params.flat() - &(&g * cfg.learning_rate);
                params.set_flat(&flat)?;
            }
            Optimizer::Newton => {
                let h = hessian_fn(params)?;
                // The FLC objective is not guaranteed convex everywhere, so
                // retry with extra ridge if the factorization fails.
                let step = match linalg::cholesky_solve(&h, &g) {
                    Ok(step) => step,
                    Err(_) => {
                        let mut extra = 1e-4;
                        loop {
                            let mut damped = h.clone();
                            for d in 0..damped.nrows() {
                                damped[[d, d]] += extra;
                            }
                            match linalg::cholesky_solve(&damped, &g) {
                                Ok(step) => break step,
                                Err(e) if extra > 1e6 => return Err(e),
                                Err(_) => extra *= 10.0,
                            }
                        }
                    }
                };
                let best = objective_fn(params)?;
                let base = params.flat();
                let mut alpha = 1.0;
                let mut accepted = false;
                for _ in 0..40 {
                    let candidate = &base - &(&step * alpha);
                    params.set_flat(&candidate)?;
                    if objective_fn(params)? < best {
                        accepted = true;
                        break;
                    }
                    alpha *= 0.5;
                }
                if !accepted {
                    // No descent direction left at working precision.
                    params.set_flat(&base)?;
                    return Ok(TrainMeta {
                        converged: grad_norm <= cfg.tolerance,
                        epochs_run: epoch,
                        final_grad_norm: grad_norm,
                    });
                }
            }
        }
    }
    let g = grad_fn(params)?;
    grad_norm = linalg::norm(&g);
    Ok(TrainMeta {
        converged: grad_norm <= cfg.tolerance,
        epochs_run,
        final_grad_norm: grad_norm,
    })
}
