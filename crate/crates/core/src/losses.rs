//! Supervised detection objective: focal classification loss, IoU regression
//! loss, and centerness binary cross-entropy.
//!
//! Each loss comes in two forms: a plain value function over arrays, and a
//! `*_t` variant that attaches a fused node (value + analytic input gradient)
//! to a [`Tape`]. The gradient is computed in the same pass as the value, so
//! the tape node is a single `ScalarWithGrad`.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, softplus, Tape, Var};

/// Focal loss parameters; `alpha` is a uniform scale on every term.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams { gamma: 2.0, alpha: 0.25 }
    }
}

/// Component breakdown of the detection objective; `total = cls + reg + ctr`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub reg: f64,
    pub ctr: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(cls: f64, reg: f64, ctr: f64) -> Self {
        LossBreakdown { cls, reg, ctr, total: cls + reg + ctr }
    }
}

fn ensure_finite(vals: impl IntoIterator<Item = f64>, what: &str) -> Result<()> {
    for v in vals {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite {what}: {v}")));
        }
    }
    Ok(())
}

/// Focal term sum and its gradient w.r.t. the logits (both unnormalized).
///
/// Per location and class channel, with `p = sigmoid(logit)` and the binary
/// target `t` (1 iff the location's class equals the channel):
/// `-alpha * (1 - p_t)^gamma * ln(p_t)`.
fn focal_sum_and_grad(
    logits: &ArrayView3<f64>,
    target: &ArrayView2<i32>,
    params: FocalParams,
) -> (f64, Array3<f64>) {
    let (c, h, w) = logits.dim();
    let FocalParams { gamma, alpha } = params;
    let mut sum = 0.0;
    let mut grad = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let xv = logits[[ci, y, x]];
                let p = sigmoid(xv);
                let q = sigmoid(-xv);
                let lnp = -softplus(-xv);
                let lnq = -softplus(xv);
                if target[[y, x]] == ci as i32 {
                    sum += -alpha * q.powf(gamma) * lnp;
                    grad[[ci, y, x]] = alpha * gamma * p * q.powf(gamma) * lnp
                        - alpha * q.powf(gamma + 1.0);
                } else {
                    sum += -alpha * p.powf(gamma) * lnq;
                    grad[[ci, y, x]] = -alpha * gamma * p.powf(gamma) * q * lnq
                        + alpha * p.powf(gamma + 1.0);
                }
            }
        }
    }
    (sum, grad)
}

/// Focal classification loss normalized by `max(n_pos, 1)`.
pub fn focal_loss(
    cls_logits: &ArrayView3<f64>,
    cls_target: &ArrayView2<i32>,
    n_pos: usize,
    params: FocalParams,
) -> Result<f64> {
    if cls_logits.dim().0 == 0 {
        return Err(Error::Invalid("focal loss needs at least one class channel".into()));
    }
    if (cls_logits.dim().1, cls_logits.dim().2) != cls_target.dim() {
        return Err(Error::Shape(format!(
            "cls logits {:?} vs target {:?}",
            cls_logits.dim(),
            cls_target.dim()
        )));
    }
    ensure_finite(cls_logits.iter().copied(), "classification logit")?;
    let (sum, _) = focal_sum_and_grad(cls_logits, cls_target, params);
    Ok(sum / n_pos.max(1) as f64)
}

/// Tape variant of [`focal_loss`]; `cls_logits` is a `[C,H,W]` node.
pub fn focal_loss_t(
    tape: &mut Tape,
    cls_logits: Var,
    cls_target: &Array2<i32>,
    n_pos: usize,
    params: FocalParams,
) -> Result<Var> {
    let logits = tape.value(cls_logits).clone();
    let view = logits.view().into_dimensionality::<ndarray::Ix3>().unwrap();
    ensure_finite(view.iter().copied(), "classification logit")?;
    let (sum, grad) = focal_sum_and_grad(&view, &cls_target.view(), params);
    let norm = n_pos.max(1) as f64;
    Ok(tape.scalar_with_grad(cls_logits, sum / norm, grad.into_dyn().mapv(|g| g / norm)))
}

/// `-ln(IoU)` sum over positive locations plus gradient w.r.t. predicted
/// offsets, both unnormalized; also returns the weight sum.
///
/// Predictions and targets share the anchor point, so the IoU is computed
/// analytically from the `(l,t,r,b)` components.
fn iou_sum_and_grad(
    pred: &ArrayView3<f64>,
    target: &ArrayView3<f64>,
    pos: &ArrayView2<bool>,
    weights: Option<&ArrayView2<f64>>,
) -> (f64, Array3<f64>, f64) {
    let (_, h, w) = pred.dim();
    let mut sum = 0.0;
    let mut wsum = 0.0;
    let mut grad = Array3::<f64>::zeros(pred.dim());
    for y in 0..h {
        for x in 0..w {
            if !pos[[y, x]] {
                continue;
            }
            let wgt = weights.map_or(1.0, |wv| wv[[y, x]]);
            wsum += wgt;
            let (pl, pt, pr, pb) =
                (pred[[0, y, x]], pred[[1, y, x]], pred[[2, y, x]], pred[[3, y, x]]);
            let (tl, tt, tr, tb) =
                (target[[0, y, x]], target[[1, y, x]], target[[2, y, x]], target[[3, y, x]]);
            debug_assert!(pl > 0.0 && pt > 0.0 && pr > 0.0 && pb > 0.0);
            let iw = pl.min(tl) + pr.min(tr);
            let ih = pt.min(tt) + pb.min(tb);
            let inter = iw * ih;
            let area_p = (pl + pr) * (pt + pb);
            let area_t = (tl + tr) * (tt + tb);
            let union = area_p + area_t - inter;
            sum += wgt * (union.ln() - inter.ln());
            // d(ln U - ln I)/d(component); min() routes to pred at ties.
            let comps = [(pl, tl, ih, pt + pb), (pt, tt, iw, pl + pr),
                         (pr, tr, ih, pt + pb), (pb, tb, iw, pl + pr)];
            for (k, (pv, tv, icross, pcross)) in comps.iter().enumerate() {
                let di = if pv <= tv { *icross } else { 0.0 };
                let du = pcross - di;
                grad[[k, y, x]] = wgt * (du / union - di / inter);
            }
        }
    }
    (sum, grad, wsum)
}

/// Mean `-ln(IoU)` over positive locations (weighted mean when `weights` is
/// given); 0 when there are no positives.
pub fn iou_loss(
    pred: &ArrayView3<f64>,
    target: &ArrayView3<f64>,
    pos: &ArrayView2<bool>,
    weights: Option<&ArrayView2<f64>>,
) -> Result<f64> {
    check_ltrb_shapes(pred, target, pos)?;
    let (sum, _, wsum) = iou_sum_and_grad(pred, target, pos, weights);
    Ok(if wsum > 0.0 { sum / wsum } else { 0.0 })
}

/// Tape variant of [`iou_loss`] with an explicit normalizer (the training
/// loop divides by the batch-global positive count).
pub fn iou_loss_t(
    tape: &mut Tape,
    pred: Var,
    target: &Array3<f64>,
    pos: &Array2<bool>,
    weights: Option<&Array2<f64>>,
    norm: f64,
) -> Result<Var> {
    let pv = tape.value(pred).clone();
    let view = pv.view().into_dimensionality::<ndarray::Ix3>().unwrap();
    check_ltrb_shapes(&view, &target.view(), &pos.view())?;
    let (sum, grad, _) =
        iou_sum_and_grad(&view, &target.view(), &pos.view(), weights.map(|w| w.view()).as_ref());
    let norm = norm.max(1.0);
    Ok(tape.scalar_with_grad(pred, sum / norm, grad.into_dyn().mapv(|g| g / norm)))
}

fn check_ltrb_shapes(
    pred: &ArrayView3<f64>,
    target: &ArrayView3<f64>,
    pos: &ArrayView2<bool>,
) -> Result<()> {
    if pred.dim() != target.dim() || pred.dim().0 != 4 {
        return Err(Error::Shape(format!(
            "ltrb maps must be [4,H,W] and equal: {:?} vs {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    if (pred.dim().1, pred.dim().2) != pos.dim() {
        return Err(Error::Shape("pos mask size mismatch".into()));
    }
    Ok(())
}

/// Binary cross-entropy sum over positives with soft targets, plus the
/// gradient w.r.t. the logits (both unnormalized).
fn bce_sum_and_grad(
    logits: &ArrayView2<f64>,
    target: &ArrayView2<f64>,
    pos: &ArrayView2<bool>,
) -> (f64, Array2<f64>, usize) {
    let mut sum = 0.0;
    let mut n = 0;
    let mut grad = Array2::<f64>::zeros(logits.dim());
    for ((y, x), &xv) in logits.indexed_iter() {
        if !pos[[y, x]] {
            continue;
        }
        let t = target[[y, x]];
        sum += softplus(xv) - t * xv;
        grad[[y, x]] = sigmoid(xv) - t;
        n += 1;
    }
    (sum, grad, n)
}

/// Mean BCE over positive locations between centerness logits and soft
/// targets in `[0,1]`; 0 when there are no positives.
pub fn centerness_loss(
    ctr_logits: &ArrayView2<f64>,
    ctr_target: &ArrayView2<f64>,
    pos: &ArrayView2<bool>,
) -> Result<f64> {
    if ctr_logits.dim() != ctr_target.dim() || ctr_logits.dim() != pos.dim() {
        return Err(Error::Shape("centerness map size mismatch".into()));
    }
    ensure_finite(ctr_logits.iter().copied(), "centerness logit")?;
    let (sum, _, n) = bce_sum_and_grad(ctr_logits, ctr_target, pos);
    Ok(if n > 0 { sum / n as f64 } else { 0.0 })
}

/// Tape variant of [`centerness_loss`] with an explicit normalizer.
pub fn centerness_loss_t(
    tape: &mut Tape,
    ctr_logits: Var,
    ctr_target: &Array2<f64>,
    pos: &Array2<bool>,
    norm: f64,
) -> Result<Var> {
    let lv = tape.value(ctr_logits).clone();
    let view = lv.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    ensure_finite(view.iter().copied(), "centerness logit")?;
    let (sum, grad, _) = bce_sum_and_grad(&view, &ctr_target.view(), &pos.view());
    let norm = norm.max(1.0);
    Ok(tape.scalar_with_grad(ctr_logits, sum / norm, grad.into_dyn().mapv(|g| g / norm)))
}

/// One pyramid level of predictions in loss-ready form: classification
/// logits, centerness logits, and regression offsets already mapped to
/// pixel units.
#[derive(Debug, Clone)]
pub struct LevelPrediction {
    pub cls_logits: Array3<f64>,
    pub ctr_logits: Array2<f64>,
    pub reg_ltrb: Array3<f64>,
}

/// Detection objective summed across levels, with the positive count taken
/// globally over all levels (floor 1) as the shared normalizer.
pub fn detection_loss(
    preds: &[LevelPrediction],
    targets: &[crate::assignment::LevelTargets],
    focal: FocalParams,
    ctr_weighted_iou: bool,
) -> Result<LossBreakdown> {
    if preds.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} prediction levels vs {} target levels",
            preds.len(),
            targets.len()
        )));
    }
    let n_pos: usize = targets.iter().map(|t| t.num_pos()).sum();
    let cls_norm = n_pos.max(1) as f64;
    let mut cls = 0.0;
    let mut reg_sum = 0.0;
    let mut reg_wsum = 0.0;
    let mut ctr_sum = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        cls += focal_loss(&p.cls_logits.view(), &t.cls.view(), 1, focal)?;
        let weights = ctr_weighted_iou.then(|| t.ctr.view());
        let (s, _, w) =
            iou_sum_and_grad(&p.reg_ltrb.view(), &t.reg.view(), &t.pos.view(), weights.as_ref());
        reg_sum += s;
        reg_wsum += w;
        ensure_finite(p.ctr_logits.iter().copied(), "centerness logit")?;
        let (cs, _, _) = bce_sum_and_grad(&p.ctr_logits.view(), &t.ctr.view(), &t.pos.view());
        ctr_sum += cs;
    }
    let cls = cls / cls_norm;
    let reg = if reg_wsum > 0.0 { reg_sum / reg_wsum.max(1.0) } else { 0.0 };
    let ctr = ctr_sum / cls_norm;
    Ok(LossBreakdown::new(cls, reg, ctr))
}
