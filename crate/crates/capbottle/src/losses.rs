//! Training objectives: L1 task losses, the pairwise feature loss, RBF-kernel
//! MMD (quadratic U-statistic plus the linear-time unbiased estimator), and
//! the two composite losses used by the supervised and unsupervised
//! adaptation regimes.
//!
//! Primitive losses are sums, matching the sum form of the objectives; the
//! composite divides by batch size so the published weights stay meaningful
//! as per-term means at any batch size.

use crate::dataset::Action;
use crate::net::{
    backward, forward_features, forward_full, forward_mmd_hook, ForwardCache, NetError,
    NetworkParams, UpstreamGrads,
};
use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use thiserror::Error;

/// Bandwidth floor returned by the median heuristic for degenerate batches.
pub const BANDWIDTH_FLOOR: f64 = 1e-8;

/// Cap on the number of vectors the median heuristic considers.
pub const MEDIAN_SUBSAMPLE_CAP: usize = 256;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("batch too small: need at least {need} vectors, got {got}")]
    BatchTooSmall { need: usize, got: usize },
    #[error("linear MMD estimator needs an even, equal number of source and target vectors; got {p} and {q}")]
    OddPairing { p: usize, q: usize },
    #[error("regime/batch mismatch: {0}")]
    ModeMismatch(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Loss weights alpha (source task), beta (target task), gamma (alignment).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    Fixed(f64),
    /// Median pairwise distance over the joint batch, recomputed per call and
    /// treated as constant with respect to the features.
    Median,
}

/// RBF kernel configuration. k(x, y) = exp(-|x-y|^2 / (2 sigma^2)).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelConfig {
    pub bandwidth: Bandwidth,
}

impl KernelConfig {
    pub fn median() -> KernelConfig {
        KernelConfig { bandwidth: Bandwidth::Median }
    }

    pub fn fixed(sigma: f64) -> KernelConfig {
        assert!(sigma > 0.0, "fixed bandwidth must be positive");
        KernelConfig { bandwidth: Bandwidth::Fixed(sigma) }
    }

    fn resolve(&self, p: &Array2<f64>, q: &Array2<f64>) -> f64 {
        match self.bandwidth {
            Bandwidth::Fixed(sigma) => sigma,
            Bandwidth::Median => median_heuristic(p, q),
        }
    }
}

fn sq_dist(x: ArrayView1<f64>, y: ArrayView1<f64>) -> f64 {
    x.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn rbf(x: ArrayView1<f64>, y: ArrayView1<f64>, sigma: f64) -> f64 {
    (-sq_dist(x, y) / (2.0 * sigma * sigma)).exp()
}

/// Sum of absolute errors with the sign subgradient (sign(0) = 0).
pub fn task_loss_l1(
    predictions: &[f64],
    labels: &[f64],
) -> Result<(f64, Vec<f64>), LossError> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(LossError::LengthMismatch {
            left: predictions.len(),
            right: labels.len(),
        });
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(predictions.len());
    for (&p, &y) in predictions.iter().zip(labels) {
        let d = p - y;
        loss += d.abs();
        grad.push(if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        });
    }
    Ok((loss, grad))
}

/// Sum over pairs of the (unsquared) Euclidean distance between paired
/// features, with gradients for both batches. Zero-distance pairs get zero
/// gradient.
pub fn pairwise_loss(
    features_source: &Array2<f64>,
    features_target: &Array2<f64>,
) -> Result<(f64, Array2<f64>, Array2<f64>), LossError> {
    if features_source.dim() != features_target.dim() {
        return Err(LossError::LengthMismatch {
            left: features_source.len(),
            right: features_target.len(),
        });
    }
    let mut loss = 0.0;
    let mut grad_s = Array2::<f64>::zeros(features_source.raw_dim());
    let mut grad_t = Array2::<f64>::zeros(features_target.raw_dim());
    for i in 0..features_source.nrows() {
        let fs = features_source.row(i);
        let ft = features_target.row(i);
        let diff = &fs.to_owned() - &ft;
        let norm = diff.dot(&diff).sqrt();
        loss += norm;
        if norm > 0.0 {
            let g = diff.mapv(|v| v / norm);
            grad_s.row_mut(i).assign(&g);
            grad_t.row_mut(i).assign(&g.mapv(|v| -v));
        }
    }
    Ok((loss, grad_s, grad_t))
}

/// Sum over pairs of the squared Euclidean distance between paired features,
/// with gradients for both batches.
///
/// This is the variant the composite objective trains with. The unsquared
/// form has unit-magnitude per-pair gradients however close the pair already
/// is, and Adam normalizes per-parameter gradient scale, so that constant,
/// highly consistent pull outcompetes the task terms at any gamma and drives
/// the feature extractor to a collapsed constant map. The squared form's
/// gradient shrinks with the residual gap, leaving a stable joint optimum
/// where features are aligned and still task-informative.
pub fn pairwise_loss_squared(
    features_source: &Array2<f64>,
    features_target: &Array2<f64>,
) -> Result<(f64, Array2<f64>, Array2<f64>), LossError> {
    if features_source.dim() != features_target.dim() {
        return Err(LossError::LengthMismatch {
            left: features_source.len(),
            right: features_target.len(),
        });
    }
    let diff = features_source - features_target;
    let loss = diff.mapv(|v| v * v).sum();
    let grad_s = diff.mapv(|v| 2.0 * v);
    let grad_t = diff.mapv(|v| -2.0 * v);
    Ok((loss, grad_s, grad_t))
}

/// Unbiased quadratic estimate of the squared MMD.
///
/// For equally sized batches this is the one-sample U-statistic
/// (1/(n(n-1))) sum_{i != j} [k(p_i,p_j) + k(q_i,q_j) - k(p_i,q_j) - k(p_j,q_i)],
/// which is exactly 0 when q equals p elementwise. For unequal sizes it falls
/// back to unbiased within-batch means minus twice the full cross mean.
pub fn mmd_quadratic(
    batch_p: &Array2<f64>,
    batch_q: &Array2<f64>,
    kernel: &KernelConfig,
) -> Result<f64, LossError> {
    let (np, nq) = (batch_p.nrows(), batch_q.nrows());
    if np < 2 || nq < 2 {
        return Err(LossError::BatchTooSmall { need: 2, got: np.min(nq) });
    }
    let sigma = kernel.resolve(batch_p, batch_q);
    if np == nq {
        let n = np;
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                acc += rbf(batch_p.row(i), batch_p.row(j), sigma)
                    + rbf(batch_q.row(i), batch_q.row(j), sigma)
                    - rbf(batch_p.row(i), batch_q.row(j), sigma)
                    - rbf(batch_p.row(j), batch_q.row(i), sigma);
            }
        }
        Ok(acc / (n * (n - 1)) as f64)
    } else {
        let mut within_p = 0.0;
        for i in 0..np {
            for j in 0..np {
                if i != j {
                    within_p += rbf(batch_p.row(i), batch_p.row(j), sigma);
                }
            }
        }
        within_p /= (np * (np - 1)) as f64;
        let mut within_q = 0.0;
        for i in 0..nq {
            for j in 0..nq {
                if i != j {
                    within_q += rbf(batch_q.row(i), batch_q.row(j), sigma);
                }
            }
        }
        within_q /= (nq * (nq - 1)) as f64;
        let mut cross = 0.0;
        for i in 0..np {
            for j in 0..nq {
                cross += rbf(batch_p.row(i), batch_q.row(j), sigma);
            }
        }
        cross /= (np * nq) as f64;
        Ok(within_p + within_q - 2.0 * cross)
    }
}

/// Linear-time unbiased estimate of the squared MMD, consuming the batches in
/// their given order two at a time:
/// (2/n) sum_i [k(p_{2i-1},p_{2i}) + k(q_{2i-1},q_{2i})
///              - k(p_{2i-1},q_{2i}) - k(p_{2i},q_{2i-1})].
/// Returns the estimate and its gradients with respect to both batches; the
/// bandwidth is treated as constant.
pub fn mmd_linear(
    batch_p: &Array2<f64>,
    batch_q: &Array2<f64>,
    kernel: &KernelConfig,
) -> Result<(f64, Array2<f64>, Array2<f64>), LossError> {
    let (np, nq) = (batch_p.nrows(), batch_q.nrows());
    if np != nq || np % 2 != 0 || np == 0 {
        return Err(LossError::OddPairing { p: np, q: nq });
    }
    let sigma = kernel.resolve(batch_p, batch_q);
    let inv_s2 = 1.0 / (sigma * sigma);
    let scale = 2.0 / np as f64;

    let mut est = 0.0;
    let mut grad_p = Array2::<f64>::zeros(batch_p.raw_dim());
    let mut grad_q = Array2::<f64>::zeros(batch_q.raw_dim());

    // Adds the gradient of sign * scale * k(x, y) to both row gradients:
    // d/dx k = k * (y - x) / sigma^2, and the negation for y.
    let term = |rows: (&mut Array2<f64>, usize, &Array2<f64>),
                    cols: (&mut Array2<f64>, usize, &Array2<f64>),
                    sign: f64|
     -> f64 {
        let (gx, ix, bx) = rows;
        let (gy, iy, by) = cols;
        let x = bx.row(ix);
        let y = by.row(iy);
        let k = rbf(x, y, sigma);
        let coef = sign * scale * k * inv_s2;
        for (d, (xv, yv)) in x.iter().zip(y.iter()).enumerate() {
            gx[[ix, d]] += coef * (yv - xv);
            gy[[iy, d]] -= coef * (yv - xv);
        }
        sign * k
    };

    for i in 0..np / 2 {
        let (a, b) = (2 * i, 2 * i + 1);
        // Within-source and within-target pairs.
        let mut gp2 = Array2::<f64>::zeros(batch_p.raw_dim());
        let mut gq2 = Array2::<f64>::zeros(batch_q.raw_dim());
        est += term((&mut gp2, a, batch_p), (&mut grad_p, b, batch_p), 1.0);
        grad_p += &gp2;
        gp2.fill(0.0);
        est += term((&mut gq2, a, batch_q), (&mut grad_q, b, batch_q), 1.0);
        grad_q += &gq2;
        gq2.fill(0.0);
        // Cross pairs.
        est += term((&mut grad_p, a, batch_p), (&mut grad_q, b, batch_q), -1.0);
        est += term((&mut grad_p, b, batch_p), (&mut grad_q, a, batch_q), -1.0);
    }
    Ok((est * scale, grad_p, grad_q))
}

/// Median pairwise Euclidean distance over the joint batch, on a capped
/// deterministic subsample, floored at [`BANDWIDTH_FLOOR`].
pub fn median_heuristic(batch_p: &Array2<f64>, batch_q: &Array2<f64>) -> f64 {
    let mut rows: Vec<ArrayView1<f64>> = Vec::new();
    rows.extend(batch_p.axis_iter(Axis(0)));
    rows.extend(batch_q.axis_iter(Axis(0)));
    rows.truncate(MEDIAN_SUBSAMPLE_CAP);
    let mut dists = Vec::with_capacity(rows.len() * (rows.len().saturating_sub(1)) / 2);
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            dists.push(sq_dist(rows[i], rows[j]).sqrt());
        }
    }
    if dists.is_empty() {
        return BANDWIDTH_FLOOR;
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let n = dists.len();
    let median = if n % 2 == 1 {
        dists[n / 2]
    } else {
        0.5 * (dists[n / 2 - 1] + dists[n / 2])
    };
    median.max(BANDWIDTH_FLOOR)
}

/// Which alignment term the composite loss carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignMode {
    None,
    /// Pairwise pool3-feature loss over X_ST triples.
    Pairwise,
    /// Linear-time MMD over the conv1 hook on unpaired, unlabeled images.
    Mmd,
}

/// One training step's worth of data, already resolved to image views.
#[derive(Default)]
pub struct CompositeBatch<'a> {
    pub source: Vec<(ArrayView2<'a, f64>, Action, f64)>,
    pub target: Vec<(ArrayView2<'a, f64>, Action, f64)>,
    /// (source image, target image, shared action) triples.
    pub pairs: Vec<(ArrayView2<'a, f64>, ArrayView2<'a, f64>, Action)>,
    pub mmd_source: Vec<ArrayView2<'a, f64>>,
    pub mmd_target: Vec<ArrayView2<'a, f64>>,
}

/// Decomposed value of one composite evaluation. Term fields are the
/// unweighted per-term means; `total` applies the weights.
#[derive(Debug)]
pub struct CompositeResult {
    pub total: f64,
    pub task_source: f64,
    pub task_target: f64,
    pub alignment: f64,
    pub grads: NetworkParams,
}

fn task_term(
    items: &[(ArrayView2<f64>, Action, f64)],
    params: &NetworkParams,
    weight: f64,
    grads: &mut NetworkParams,
) -> Result<f64, LossError> {
    let n = items.len() as f64;
    let mut preds = Vec::with_capacity(items.len());
    let mut caches: Vec<ForwardCache> = Vec::with_capacity(items.len());
    for (img, action, _) in items {
        let (pred, cache) = forward_full(*img, *action, params)?;
        preds.push(pred);
        caches.push(cache);
    }
    let labels: Vec<f64> = items.iter().map(|(_, _, y)| *y).collect();
    let (loss_sum, sign) = task_loss_l1(&preds, &labels)?;
    for (cache, g) in caches.iter().zip(&sign) {
        let up = UpstreamGrads { d_out: weight * g / n, ..Default::default() };
        backward(params, cache, &up, grads)?;
    }
    Ok(loss_sum / n)
}

/// Composite objective and full parameter gradient for one minibatch.
///
/// `AlignMode::Pairwise` is the supervised-adaptation objective
/// (alpha * source task + beta * target task + gamma * squared pairwise
/// distance on pool3 features; see [`pairwise_loss_squared`] for why the
/// trained term is the squared variant);
/// `AlignMode::Mmd` is the unsupervised one (alpha * source task + gamma *
/// linear MMD on the conv1 hook). Weighted terms with empty batches are a
/// regime/batch mismatch error; zero-weighted terms are skipped.
pub fn composite_loss(
    mode: AlignMode,
    batch: &CompositeBatch,
    params: &NetworkParams,
    weights: &LossWeights,
    kernel: &KernelConfig,
) -> Result<CompositeResult, LossError> {
    let mut grads = NetworkParams::zeros(params.arch);
    let mut result = CompositeResult {
        total: 0.0,
        task_source: 0.0,
        task_target: 0.0,
        alignment: 0.0,
        grads: NetworkParams::zeros(params.arch),
    };

    if weights.alpha > 0.0 {
        if batch.source.is_empty() {
            return Err(LossError::ModeMismatch(
                "alpha > 0 requires labeled source samples in the batch".into(),
            ));
        }
        result.task_source = task_term(&batch.source, params, weights.alpha, &mut grads)?;
    }
    if weights.beta > 0.0 {
        if batch.target.is_empty() {
            return Err(LossError::ModeMismatch(
                "beta > 0 requires labeled target samples in the batch".into(),
            ));
        }
        result.task_target = task_term(&batch.target, params, weights.beta, &mut grads)?;
    }

    if weights.gamma > 0.0 {
        match mode {
            AlignMode::None => {
                return Err(LossError::ModeMismatch(
                    "gamma > 0 with AlignMode::None".into(),
                ))
            }
            AlignMode::Pairwise => {
                if batch.pairs.is_empty() {
                    return Err(LossError::ModeMismatch(
                        "pairwise regime requires X_ST triples in the batch".into(),
                    ));
                }
                let n = batch.pairs.len();
                let dim = params.arch.dims().feature_len;
                let mut fs = Array2::<f64>::zeros((n, dim));
                let mut ft = Array2::<f64>::zeros((n, dim));
                let mut caches_s = Vec::with_capacity(n);
                let mut caches_t = Vec::with_capacity(n);
                for (i, (img_s, img_t, action)) in batch.pairs.iter().enumerate() {
                    let (f, c) = forward_features(*img_s, *action, params)?;
                    fs.row_mut(i).assign(&f);
                    caches_s.push(c);
                    let (f, c) = forward_features(*img_t, *action, params)?;
                    ft.row_mut(i).assign(&f);
                    caches_t.push(c);
                }
                let (loss_sum, gs, gt) = pairwise_loss_squared(&fs, &ft)?;
                result.alignment = loss_sum / n as f64;
                let scale = weights.gamma / n as f64;
                for i in 0..n {
                    let g = gs.row(i).mapv(|v| v * scale);
                    let up = UpstreamGrads { d_feature: Some(g.view()), ..Default::default() };
                    backward(params, &caches_s[i], &up, &mut grads)?;
                    let g = gt.row(i).mapv(|v| v * scale);
                    let up = UpstreamGrads { d_feature: Some(g.view()), ..Default::default() };
                    backward(params, &caches_t[i], &up, &mut grads)?;
                }
            }
            AlignMode::Mmd => {
                let (np, nq) = (batch.mmd_source.len(), batch.mmd_target.len());
                if np == 0 || np != nq || np % 2 != 0 {
                    return Err(LossError::ModeMismatch(format!(
                        "MMD regime requires equal, even, nonempty image pools; got {np} and {nq}"
                    )));
                }
                let width = params.arch.hook_width;
                let mut hp = Array2::<f64>::zeros((np, width));
                let mut hq = Array2::<f64>::zeros((nq, width));
                let mut caches_p = Vec::with_capacity(np);
                let mut caches_q = Vec::with_capacity(nq);
                for (i, img) in batch.mmd_source.iter().enumerate() {
                    let (_, mut cache) = forward_features(*img, Action::zero(), params)?;
                    hp.row_mut(i).assign(&forward_mmd_hook(&mut cache, params));
                    caches_p.push(cache);
                }
                for (i, img) in batch.mmd_target.iter().enumerate() {
                    let (_, mut cache) = forward_features(*img, Action::zero(), params)?;
                    hq.row_mut(i).assign(&forward_mmd_hook(&mut cache, params));
                    caches_q.push(cache);
                }
                let (est, gp, gq) = mmd_linear(&hp, &hq, kernel)?;
                result.alignment = est;
                for i in 0..np {
                    let g = gp.row(i).mapv(|v| v * weights.gamma);
                    let up = UpstreamGrads { d_hook: Some(g.view()), ..Default::default() };
                    backward(params, &caches_p[i], &up, &mut grads)?;
                    let g = gq.row(i).mapv(|v| v * weights.gamma);
                    let up = UpstreamGrads { d_hook: Some(g.view()), ..Default::default() };
                    backward(params, &caches_q[i], &up, &mut grads)?;
                }
            }
        }
    }

    result.total = weights.alpha * result.task_source
        + weights.beta * result.task_target
        + weights.gamma * result.alignment;
    result.grads = grads;
    Ok(result)
}
