//! Boundary guidance: fuses the two stride-4 encoder levels into an
//! edge-guidance feature and a supervised boundary map.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, ParamStore};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[EPS, 1 - EPS]` inside the edge loss.
pub const EDGE_LOSS_EPS: f64 = 1e-7;

#[derive(Clone, Debug)]
pub struct Bgm {
    pub from_f1: Conv2d,
    pub from_f2: Conv2d,
    pub fuse: Conv2d,
    pub head: Conv2d,
}

/// `guidance` is `[N, C_l, H/4, W/4]`; `boundary` is `[N, 1, H, W]` after the sigmoid.
#[derive(Clone, Copy, Debug)]
pub struct BoundaryBundle {
    pub guidance: Var,
    pub boundary: Var,
}

impl Bgm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c1: usize, c2: usize, cl: usize, rng: &mut R) -> Self {
        Bgm {
            from_f1: Conv2d::new(store, &format!("{name}.f1"), c1, cl, 3, 1, true, rng),
            from_f2: Conv2d::new(store, &format!("{name}.f2"), c2, cl, 3, 1, true, rng),
            fuse: Conv2d::new(store, &format!("{name}.fuse"), cl, cl, 3, 1, true, rng),
            head: Conv2d::new(store, &format!("{name}.head"), cl, 1, 3, 1, true, rng),
        }
    }

    /// `out_size` is the input image resolution the boundary map is upsampled to.
    pub fn forward(&self, g: &mut Graph<'_>, f1: Var, f2: Var, out_size: (usize, usize)) -> Result<BoundaryBundle> {
        let (n1, c1, h1, w1) = g.value(f1).dims4();
        let (n2, c2, h2, w2) = g.value(f2).dims4();
        if (n1, h1, w1) != (n2, h2, w2) {
            return Err(Error::contract(format!(
                "boundary guidance needs equally sized levels, got {h1}x{w1} and {h2}x{w2}"
            )));
        }
        if c1 != self.from_f1.in_channels || c2 != self.from_f2.in_channels {
            return Err(Error::contract(format!(
                "boundary guidance built for {}/{} channels, got {c1}/{c2}",
                self.from_f1.in_channels, self.from_f2.in_channels
            )));
        }
        let a = self.from_f1.forward(g, f1);
        let b = self.from_f2.forward(g, f2);
        let sum = g.add(a, b);
        let guidance = self.fuse.forward(g, sum);
        let logit = self.head.forward(g, guidance);
        let prob = g.sigmoid(logit);
        let boundary = g.resize(prob, out_size.0, out_size.1);
        Ok(BoundaryBundle { guidance, boundary })
    }
}

/// Mean binary cross-entropy between a boundary probability map and a
/// binary edge map, over all pixels of the batch.
pub fn edge_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    Ok(edge_loss_with_grad(pred, target)?.0)
}

/// [`edge_loss`] and its gradient with respect to `pred`. The gradient is
/// zero where `pred` lies outside the clamp interval.
pub fn edge_loss_with_grad(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::contract(format!(
            "edge loss shape mismatch: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(pred.shape());
    for ((&p, &t), gr) in pred.data().iter().zip(target.data()).zip(grad.data_mut()) {
        let pc = p.clamp(EDGE_LOSS_EPS, 1.0 - EDGE_LOSS_EPS);
        loss -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
        if p > EDGE_LOSS_EPS && p < 1.0 - EDGE_LOSS_EPS {
            *gr = (-t / pc + (1.0 - t) / (1.0 - pc)) / n;
        }
    }
    Ok((loss / n, grad))
}
