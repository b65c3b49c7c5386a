//! Hard-pixel-weighted BCE + IoU detection loss and the deep-supervision total.
//!
//! All losses take pre-sigmoid logits and binary targets of the same shape,
//! treated as a stack of planes (`[H, W]`, `[1, H, W]` or `[N, 1, H, W]`).
//! Each plane is scored on its own and the batch is reduced by the mean.

use crate::bgm::edge_loss_with_grad;
use crate::error::{Error, Result};
use crate::graph::sigmoid;
use crate::network::{SideOutputs, SIDES};
use crate::tensor::Tensor;

/// Side length of the box filter defining the hard-pixel weight.
pub const WEIGHT_WINDOW: usize = 31;
pub const WEIGHT_GAIN: f64 = 5.0;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub edge: f64,
    pub det: [f64; SIDES],
    pub total: f64,
}

/// Gradients of the total loss with respect to the side logits and the boundary map.
#[derive(Clone, Debug)]
pub struct LossGrads {
    pub logits: Vec<Tensor>,
    pub boundary: Option<Tensor>,
}

fn planes(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [h, w] => Ok((1, h, w)),
        [1, h, w] => Ok((1, h, w)),
        [n, 1, h, w] => Ok((n, h, w)),
        _ => Err(Error::contract(format!("loss expects single-channel maps, got {shape:?}"))),
    }
}

fn check_pair(logit: &Tensor, target: &Tensor) -> Result<(usize, usize, usize)> {
    if logit.shape() != target.shape() {
        return Err(Error::contract(format!(
            "loss shape mismatch: {:?} vs {:?}",
            logit.shape(),
            target.shape()
        )));
    }
    planes(logit.shape())
}

/// `ω = 1 + 5·|box31(t) − t|`, where the box mean runs over the in-frame
/// part of the 31×31 window.
pub fn hard_pixel_weight(target: &Tensor) -> Result<Tensor> {
    let (n, h, w) = planes(target.shape())?;
    let r = WEIGHT_WINDOW / 2;
    let mut out = Tensor::zeros(target.shape());
    for b in 0..n {
        let t = &target.data()[b * h * w..(b + 1) * h * w];
        // integral image with a zero row and column in front
        let mut s = vec![0.0; (h + 1) * (w + 1)];
        for y in 0..h {
            for x in 0..w {
                s[(y + 1) * (w + 1) + x + 1] = t[y * w + x] + s[y * (w + 1) + x + 1] + s[(y + 1) * (w + 1) + x] - s[y * (w + 1) + x];
            }
        }
        let o = &mut out.data_mut()[b * h * w..(b + 1) * h * w];
        for y in 0..h {
            let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
            for x in 0..w {
                let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
                let sum = s[y1 * (w + 1) + x1] - s[y0 * (w + 1) + x1] - s[y1 * (w + 1) + x0] + s[y0 * (w + 1) + x0];
                let mean = sum / ((y1 - y0) * (x1 - x0)) as f64;
                o[y * w + x] = 1.0 + WEIGHT_GAIN * (mean - t[y * w + x]).abs();
            }
        }
    }
    Ok(out)
}

/// Stable `-(t ln σ(x) + (1 − t) ln(1 − σ(x)))`.
fn bce_logit(x: f64, t: f64) -> f64 {
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

struct Parts {
    bce: f64,
    iou: f64,
    grad_bce: Tensor,
    grad_iou: Tensor,
}

fn parts(logit: &Tensor, target: &Tensor) -> Result<Parts> {
    let (n, h, w) = check_pair(logit, target)?;
    let omega = hard_pixel_weight(target)?;
    let hw = h * w;
    let inv_n = 1.0 / n as f64;
    let mut out = Parts {
        bce: 0.0,
        iou: 0.0,
        grad_bce: Tensor::zeros(logit.shape()),
        grad_iou: Tensor::zeros(logit.shape()),
    };
    for b in 0..n {
        let r = b * hw..(b + 1) * hw;
        let (x, t, om) = (&logit.data()[r.clone()], &target.data()[r.clone()], &omega.data()[r.clone()]);
        let wsum: f64 = om.iter().sum();
        let (mut bce, mut inter, mut union) = (0.0, 0.0, 0.0);
        for i in 0..hw {
            let p = sigmoid(x[i]);
            bce += om[i] * bce_logit(x[i], t[i]);
            inter += om[i] * p * t[i];
            union += om[i] * (p + t[i] - p * t[i]);
        }
        out.bce += inv_n * bce / wsum;
        out.iou += inv_n * (1.0 - (inter + 1.0) / (union + 1.0));
        let u2 = (union + 1.0) * (union + 1.0);
        let gb = &mut out.grad_bce.data_mut()[r.clone()];
        for i in 0..hw {
            gb[i] = inv_n * om[i] * (sigmoid(x[i]) - t[i]) / wsum;
        }
        let gi = &mut out.grad_iou.data_mut()[r];
        for i in 0..hw {
            let p = sigmoid(x[i]);
            let d_inter = om[i] * t[i];
            let d_union = om[i] * (1.0 - t[i]);
            let dl_dp = -(d_inter * (union + 1.0) - (inter + 1.0) * d_union) / u2;
            gi[i] = inv_n * dl_dp * p * (1.0 - p);
        }
    }
    Ok(out)
}

pub fn weighted_bce(logit: &Tensor, target: &Tensor) -> Result<f64> {
    Ok(parts(logit, target)?.bce)
}

pub fn weighted_iou(logit: &Tensor, target: &Tensor) -> Result<f64> {
    Ok(parts(logit, target)?.iou)
}

pub fn weighted_bce_with_grad(logit: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    let p = parts(logit, target)?;
    Ok((p.bce, p.grad_bce))
}

pub fn weighted_iou_with_grad(logit: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    let p = parts(logit, target)?;
    Ok((p.iou, p.grad_iou))
}

/// `weighted_bce + weighted_iou`.
pub fn detection_loss(logit: &Tensor, target: &Tensor) -> Result<f64> {
    let p = parts(logit, target)?;
    Ok(p.bce + p.iou)
}

pub fn detection_loss_with_grad(logit: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    let mut p = parts(logit, target)?;
    p.grad_bce.add_assign(&p.grad_iou);
    Ok((p.bce + p.iou, p.grad_bce))
}

/// Edge loss on the boundary map (when present) plus the detection loss of every side.
pub fn total_loss(outputs: &SideOutputs, mask: &Tensor, edge: &Tensor) -> Result<LossBreakdown> {
    Ok(total_loss_with_grads(outputs, mask, edge)?.0)
}

pub fn total_loss_with_grads(outputs: &SideOutputs, mask: &Tensor, edge: &Tensor) -> Result<(LossBreakdown, LossGrads)> {
    if outputs.logits.len() != SIDES {
        return Err(Error::contract(format!("expected {SIDES} side outputs, got {}", outputs.logits.len())));
    }
    let mut det = [0.0; SIDES];
    let mut logits = Vec::with_capacity(SIDES);
    for (d, l) in det.iter_mut().zip(&outputs.logits) {
        let (v, g) = detection_loss_with_grad(l, mask)?;
        *d = v;
        logits.push(g);
    }
    let (edge_v, boundary) = match &outputs.boundary {
        Some(b) => {
            let (v, g) = edge_loss_with_grad(b, edge)?;
            (v, Some(g))
        }
        None => (0.0, None),
    };
    let total = edge_v + det.iter().sum::<f64>();
    Ok((LossBreakdown { edge: edge_v, det, total }, LossGrads { logits, boundary }))
}
