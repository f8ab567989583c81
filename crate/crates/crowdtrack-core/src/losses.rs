//! Reference implementation of the training losses with analytic
//! gradients: focal center loss, L1 scale/offset loss, the counting loss
//! (amplified MSE + SSIM), the two mutual count-consistency constraints,
//! softmax reID classification, and the uncertainty-weighted total.
//!
//! Every gradient here is checked against central finite differences by
//! the test suite and the `gradcheck` CLI command.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::density::{
    self, AdaptiveSigmaConfig, DensityError, DensityGrid, IndicatorGrid,
};
use crate::math;

/// Clamp applied to heatmap predictions before logarithms.
pub const HEATMAP_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub enum LossError {
    /// Grids must share a geometry.
    ShapeMismatch,
    /// Focal loss needs at least one gt == 1 cell (the 1/N normalizer).
    NoCenterCells,
    /// Paired per-object lists must have equal lengths.
    LengthMismatch { left: usize, right: usize },
    /// Grid smaller than the SSIM window.
    GridTooSmall { grid_w: usize, grid_h: usize, window: usize },
    /// A label index is outside [0, L).
    BadLabel { label: usize, num_classes: usize },
    /// Batch shape is inconsistent or empty.
    BadBatch(&'static str),
    /// Inputs must be finite.
    NonFinite,
    Density(DensityError),
}

impl fmt::Display for LossError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossError::ShapeMismatch => write!(f, "grid shapes differ"),
            LossError::NoCenterCells => write!(f, "no gt == 1 cells; focal normalizer undefined"),
            LossError::LengthMismatch { left, right } => {
                write!(f, "length mismatch: {left} vs {right}")
            }
            LossError::GridTooSmall { grid_w, grid_h, window } => {
                write!(f, "grid {grid_w}x{grid_h} smaller than SSIM window {window}")
            }
            LossError::BadLabel { label, num_classes } => {
                write!(f, "label {label} out of range for {num_classes} classes")
            }
            LossError::BadBatch(what) => write!(f, "bad batch: {what}"),
            LossError::NonFinite => write!(f, "inputs must be finite"),
            LossError::Density(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for LossError {}

impl From<DensityError> for LossError {
    fn from(e: DensityError) -> Self {
        LossError::Density(e)
    }
}

/// Focal-loss exponents; alpha = 2, beta = 4 by default.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalParams {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams { alpha: 2.0, beta: 4.0 }
    }
}

/// Counting-loss parameters: amplification factor and SSIM settings.
///
/// `ssim_c1`/`ssim_c2` are the coefficients multiplied by the dynamic
/// range before squaring (the 0.01 / 0.03 of the original SSIM paper).
/// `ssim_as_dissimilarity` switches the SSIM term of the counting loss
/// from the literal `+ SSIM` to `+ (1 - SSIM)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CountLossParams {
    pub mu: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
    pub ssim_as_dissimilarity: bool,
}

impl Default for CountLossParams {
    fn default() -> Self {
        CountLossParams {
            mu: 1000.0,
            ssim_window: 11,
            ssim_sigma: 1.5,
            ssim_c1: 0.01,
            ssim_c2: 0.03,
            ssim_as_dissimilarity: false,
        }
    }
}

/// Trainable task-balancing parameters of the total loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UncertaintyWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
}

impl Default for UncertaintyWeights {
    fn default() -> Self {
        UncertaintyWeights { w1: -2.0, w2: -1.0, w3: -1.0 }
    }
}

/// A batch of reID classification rows: `n x num_classes` logits plus one
/// identity label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ReidBatch {
    logits: Vec<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl ReidBatch {
    pub fn new(logits: Vec<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self, LossError> {
        if labels.is_empty() {
            return Err(LossError::BadBatch("batch must contain at least one object"));
        }
        if num_classes < 2 {
            return Err(LossError::BadBatch("need at least two identities"));
        }
        if logits.len() != labels.len() * num_classes {
            return Err(LossError::LengthMismatch {
                left: logits.len(),
                right: labels.len() * num_classes,
            });
        }
        for &l in &labels {
            if l >= num_classes {
                return Err(LossError::BadLabel { label: l, num_classes });
            }
        }
        Ok(ReidBatch { logits, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
}

fn check_same_shape(a: &DensityGrid, b: &DensityGrid) -> Result<(), LossError> {
    if a.geom() != b.geom() {
        return Err(LossError::ShapeMismatch);
    }
    Ok(())
}

/// Pixel-wise focal regression loss on the center heatmap, with its
/// gradient w.r.t. the prediction.
///
/// Predictions are clamped to `[HEATMAP_EPS, 1 - HEATMAP_EPS]` before the
/// logarithms; the gradient is taken at the clamped value.
pub fn focal_center_loss(
    pred: &DensityGrid,
    gt: &DensityGrid,
    params: &FocalParams,
) -> Result<(f64, DensityGrid), LossError> {
    check_same_shape(pred, gt)?;
    let n = gt.values().iter().filter(|&&m| m == 1.0).count();
    if n == 0 {
        return Err(LossError::NoCenterCells);
    }
    let inv_n = 1.0 / n as f64;
    let (alpha, beta) = (params.alpha, params.beta);
    let mut loss = 0.0;
    let mut grad = DensityGrid::zeros(*pred.geom());
    for (i, (&p, &m)) in pred.values().iter().zip(gt.values()).enumerate() {
        let p = p.clamp(HEATMAP_EPS, 1.0 - HEATMAP_EPS);
        if m == 1.0 {
            let one_m = 1.0 - p;
            loss -= math::powf(one_m, alpha) * math::ln(p);
            grad.values_mut()[i] = inv_n
                * (alpha * math::powf(one_m, alpha - 1.0) * math::ln(p)
                    - math::powf(one_m, alpha) / p);
        } else {
            let w = math::powf(1.0 - m, beta);
            loss -= w * math::powf(p, alpha) * math::ln(1.0 - p);
            grad.values_mut()[i] = inv_n
                * w
                * (math::powf(p, alpha) / (1.0 - p)
                    - alpha * math::powf(p, alpha - 1.0) * math::ln(1.0 - p));
        }
    }
    Ok((loss * inv_n, grad))
}

/// L1 loss over per-object scale and offset residuals. The subgradient at
/// a zero residual is fixed to 0.
pub fn scale_offset_loss(
    pred_s: &[(f64, f64)],
    gt_s: &[(f64, f64)],
    pred_o: &[(f64, f64)],
    gt_o: &[(f64, f64)],
) -> Result<(f64, Vec<(f64, f64)>, Vec<(f64, f64)>), LossError> {
    if pred_s.len() != gt_s.len() {
        return Err(LossError::LengthMismatch { left: pred_s.len(), right: gt_s.len() });
    }
    if pred_o.len() != gt_o.len() {
        return Err(LossError::LengthMismatch { left: pred_o.len(), right: gt_o.len() });
    }
    if pred_s.len() != pred_o.len() {
        return Err(LossError::LengthMismatch { left: pred_s.len(), right: pred_o.len() });
    }
    fn sign(x: f64) -> f64 {
        if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
    let mut loss = 0.0;
    let mut grad_s = Vec::with_capacity(pred_s.len());
    let mut grad_o = Vec::with_capacity(pred_o.len());
    for ((ps, gs), (po, go)) in pred_s.iter().zip(gt_s).zip(pred_o.iter().zip(gt_o)) {
        let (dsx, dsy) = (ps.0 - gs.0, ps.1 - gs.1);
        let (dox, doy) = (po.0 - go.0, po.1 - go.1);
        loss += math::abs(dsx) + math::abs(dsy) + math::abs(dox) + math::abs(doy);
        grad_s.push((sign(dsx), sign(dsy)));
        grad_o.push((sign(dox), sign(doy)));
    }
    Ok((loss, grad_s, grad_o))
}

struct SsimSettings {
    half: isize,
    weights: Vec<f64>, // (2*half+1)^2 Gaussian window, sum 1
    c1: f64,
    c2: f64,
}

fn ssim_settings(
    a: &DensityGrid,
    b: &DensityGrid,
    params: &CountLossParams,
) -> Result<SsimSettings, LossError> {
    check_same_shape(a, b)?;
    let window = params.ssim_window;
    if window == 0 || window % 2 == 0 {
        return Err(LossError::Density(DensityError::EvenWindow { window }));
    }
    let g = a.geom();
    if g.grid_w() < window || g.grid_h() < window {
        return Err(LossError::GridTooSmall {
            grid_w: g.grid_w(),
            grid_h: g.grid_h(),
            window,
        });
    }
    let half = (window / 2) as isize;
    let inv = 1.0 / (2.0 * params.ssim_sigma * params.ssim_sigma);
    let mut weights = Vec::with_capacity(window * window);
    for dy in -half..=half {
        for dx in -half..=half {
            weights.push(math::exp(-((dx * dx + dy * dy) as f64) * inv));
        }
    }
    let total: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= total;
    }
    // Dynamic range of the reference grid, floored to keep the constants
    // well defined for flat references.
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in b.values() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = f64::max(hi - lo, 1e-6);
    Ok(SsimSettings {
        half,
        weights,
        c1: (params.ssim_c1 * range) * (params.ssim_c1 * range),
        c2: (params.ssim_c2 * range) * (params.ssim_c2 * range),
    })
}

/// Mean local structural similarity between two grids with a Gaussian
/// window, evaluated at every position where the full window fits. The
/// contrast constants derive from the dynamic range of `b`.
pub fn ssim(a: &DensityGrid, b: &DensityGrid, params: &CountLossParams) -> Result<f64, LossError> {
    let (value, _) = ssim_impl(a, b, params, false)?;
    Ok(value)
}

/// SSIM plus its gradient with respect to the first argument.
pub fn ssim_with_grad(
    a: &DensityGrid,
    b: &DensityGrid,
    params: &CountLossParams,
) -> Result<(f64, DensityGrid), LossError> {
    let (value, grad) = ssim_impl(a, b, params, true)?;
    Ok((value, grad.expect("grad requested")))
}

fn ssim_impl(
    a: &DensityGrid,
    b: &DensityGrid,
    params: &CountLossParams,
    want_grad: bool,
) -> Result<(f64, Option<DensityGrid>), LossError> {
    let s = ssim_settings(a, b, params)?;
    let g = a.geom();
    let (gw, gh) = (g.grid_w() as isize, g.grid_h() as isize);
    let half = s.half;
    let side = (2 * half + 1) as usize;
    let xs = a.values();
    let ys = b.values();
    let positions = ((gw - 2 * half) * (gh - 2 * half)) as f64;
    let inv_positions = 1.0 / positions;
    let mut total = 0.0;
    let mut grad = if want_grad { Some(DensityGrid::zeros(*g)) } else { None };

    for cy in half..gh - half {
        for cx in half..gw - half {
            let mut mu_x = 0.0;
            let mut mu_y = 0.0;
            let mut xx = 0.0;
            let mut yy = 0.0;
            let mut xy = 0.0;
            for dy in -half..=half {
                for dx in -half..=half {
                    let w = s.weights[(dy + half) as usize * side + (dx + half) as usize];
                    let xi = xs[((cy + dy) * gw + cx + dx) as usize];
                    let yi = ys[((cy + dy) * gw + cx + dx) as usize];
                    mu_x += w * xi;
                    mu_y += w * yi;
                    xx += w * xi * xi;
                    yy += w * yi * yi;
                    xy += w * xi * yi;
                }
            }
            let var_x = xx - mu_x * mu_x;
            let var_y = yy - mu_y * mu_y;
            let cov = xy - mu_x * mu_y;
            let a1 = 2.0 * mu_x * mu_y + s.c1;
            let a2 = 2.0 * cov + s.c2;
            let b1 = mu_x * mu_x + mu_y * mu_y + s.c1;
            let b2 = var_x + var_y + s.c2;
            let denom = b1 * b2;
            let value = a1 * a2 / denom;
            total += value;

            if let Some(grad) = grad.as_mut() {
                let scale = 2.0 * inv_positions / denom;
                for dy in -half..=half {
                    for dx in -half..=half {
                        let w = s.weights[(dy + half) as usize * side + (dx + half) as usize];
                        let idx = ((cy + dy) * gw + cx + dx) as usize;
                        let xi = xs[idx];
                        let yi = ys[idx];
                        let d = w
                            * scale
                            * (mu_y * a2 + a1 * (yi - mu_y)
                                - value * (mu_x * b2 + b1 * (xi - mu_x)));
                        grad.values_mut()[idx] += d;
                    }
                }
            }
        }
    }
    Ok((total * inv_positions, grad))
}

/// Counting loss `||pred - mu*gt||^2 + SSIM(pred, mu*gt)` as written, with
/// gradient over the prediction. With `ssim_as_dissimilarity` the SSIM
/// term becomes `1 - SSIM`.
pub fn counting_loss(
    pred: &DensityGrid,
    gt: &DensityGrid,
    params: &CountLossParams,
) -> Result<(f64, DensityGrid), LossError> {
    check_same_shape(pred, gt)?;
    let scaled = DensityGrid::from_values(
        *gt.geom(),
        gt.values().iter().map(|&v| params.mu * v).collect(),
    )
    .expect("same length");
    let mut loss = 0.0;
    let mut grad = DensityGrid::zeros(*pred.geom());
    for (i, (&p, &t)) in pred.values().iter().zip(scaled.values()).enumerate() {
        let d = p - t;
        loss += d * d;
        grad.values_mut()[i] = 2.0 * d;
    }
    let (ssim_value, ssim_grad) = ssim_with_grad(pred, &scaled, params)?;
    if params.ssim_as_dissimilarity {
        loss += 1.0 - ssim_value;
        for (g, sg) in grad.values_mut().iter_mut().zip(ssim_grad.values()) {
            *g -= sg;
        }
    } else {
        loss += ssim_value;
        for (g, sg) in grad.values_mut().iter_mut().zip(ssim_grad.values()) {
            *g += sg;
        }
    }
    Ok((loss, grad))
}

/// Detection-with-counting constraint: squared L2 distance between the
/// blurred indicator and the (fixed) estimated density map. The indicator
/// is the decision variable; candidate configurations are compared by
/// this value.
pub fn det_count_loss(
    u: &IndicatorGrid,
    dhat: &DensityGrid,
    cfg: &AdaptiveSigmaConfig,
) -> Result<f64, LossError> {
    Ok(det_count_loss_with_grad(u, dhat, cfg)?.0)
}

/// Same constraint with the gradient over the density argument (the only
/// continuous variable; the indicator is a discrete configuration).
pub fn det_count_loss_with_grad(
    u: &IndicatorGrid,
    dhat: &DensityGrid,
    cfg: &AdaptiveSigmaConfig,
) -> Result<(f64, DensityGrid), LossError> {
    if u.geom() != dhat.geom() {
        return Err(LossError::ShapeMismatch);
    }
    let blurred = density::indicator_blur(u, cfg)?;
    let mut loss = 0.0;
    let mut grad = DensityGrid::zeros(*dhat.geom());
    for (i, (&b, &d)) in blurred.values().iter().zip(dhat.values()).enumerate() {
        let diff = b - d;
        loss += diff * diff;
        grad.values_mut()[i] = -2.0 * diff;
    }
    Ok((loss, grad))
}

/// Counting-with-detection constraint: mean squared difference between the
/// window counts of the density map and of the (fixed) indicator, over all
/// K = grid_w * grid_h densely sampled windows. The gradient over the
/// density is the adjoint box filter of the count differences.
pub fn window_count_loss(
    dhat: &DensityGrid,
    u: &IndicatorGrid,
    window: usize,
) -> Result<(f64, DensityGrid), LossError> {
    if dhat.geom() != u.geom() {
        return Err(LossError::ShapeMismatch);
    }
    let counts_d = density::window_counts(dhat, window)?;
    let counts_u = density::window_counts_indicator(u, window)?;
    let k = dhat.geom().cells() as f64;
    let diff: Vec<f64> = counts_d
        .values()
        .iter()
        .zip(counts_u.values())
        .map(|(&a, &b)| a - b)
        .collect();
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / k;
    // d loss / d dhat_p = (2/K) * sum over windows containing p of diff_k;
    // window membership is symmetric, so that is another window sum.
    let diff_grid = DensityGrid::from_values(*dhat.geom(), diff).expect("same length");
    let adjoint = density::window_counts(&diff_grid, window)?;
    let grad_values: Vec<f64> = adjoint.values().iter().map(|&v| 2.0 * v / k).collect();
    let grad = DensityGrid::from_values(*dhat.geom(), grad_values).expect("same length");
    Ok((loss, grad))
}

/// Softmax cross-entropy over identities, summed over objects, with the
/// gradient over the logits (`softmax - onehot` per row).
pub fn reid_loss(batch: &ReidBatch) -> Result<(f64, Vec<f64>), LossError> {
    let l = batch.num_classes;
    let mut loss = 0.0;
    let mut grad = vec![0.0; batch.logits.len()];
    for (i, &label) in batch.labels.iter().enumerate() {
        let row = &batch.logits[i * l..(i + 1) * l];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|&z| math::exp(z - m)).sum();
        let lse = m + math::ln(sum_exp);
        loss += lse - row[label];
        for (j, &z) in row.iter().enumerate() {
            let soft = math::exp(z - m) / sum_exp;
            grad[i * l + j] = soft - if j == label { 1.0 } else { 0.0 };
        }
    }
    Ok((loss, grad))
}

/// Uncertainty-weighted multi-task total:
/// `0.5 * (e^-w1 L1 + e^-w2 L2 + e^-w3 L3) + (w1 + w2 + w3)`,
/// with gradients over the three weights.
pub fn total_loss(
    l_det_dc: f64,
    l_cnt_cd: f64,
    l_id: f64,
    w: &UncertaintyWeights,
) -> Result<(f64, [f64; 3]), LossError> {
    if !(l_det_dc.is_finite() && l_cnt_cd.is_finite() && l_id.is_finite()) {
        return Err(LossError::NonFinite);
    }
    let e1 = math::exp(-w.w1);
    let e2 = math::exp(-w.w2);
    let e3 = math::exp(-w.w3);
    let loss = 0.5 * (e1 * l_det_dc + e2 * l_cnt_cd + e3 * l_id) + (w.w1 + w.w2 + w.w3);
    let grads = [
        -0.5 * e1 * l_det_dc + 1.0,
        -0.5 * e2 * l_cnt_cd + 1.0,
        -0.5 * e3 * l_id + 1.0,
    ];
    Ok((loss, grads))
}
