//! Dense row-major `f64` tensors.
//!
//! Feature maps are laid out as `[N, C, H, W]`. Everything here is plain data;
//! differentiation lives in [`crate::graph`].

use crate::error::{Error, Result};
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::contract(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// `[N, C, H, W]` of a rank-4 tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected rank-4 tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::contract(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Batch item `n` of a rank-4 tensor as a `[1, C, H, W]` tensor.
    pub fn batch_item(&self, n: usize) -> Tensor {
        let (_, c, h, w) = self.dims4();
        let len = c * h * w;
        Tensor {
            shape: vec![1, c, h, w],
            data: self.data[n * len..(n + 1) * len].to_vec(),
        }
    }

    /// Stacks `[1, C, H, W]` (or `[C, H, W]`) tensors of equal shape into a batch.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::contract("cannot stack zero tensors"))?;
        let inner: Vec<usize> = match first.shape.len() {
            4 if first.shape[0] == 1 => first.shape[1..].to_vec(),
            3 => first.shape.clone(),
            _ => {
                return Err(Error::contract(format!(
                    "cannot stack tensors of shape {:?}",
                    first.shape
                )))
            }
        };
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.len() != first.len() || t.shape.iter().rev().take(3).ne(inner.iter().rev()) {
                return Err(Error::contract(format!(
                    "stack shape mismatch: {:?} vs {:?}",
                    t.shape, first.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend(inner);
        Tensor::from_vec(&shape, data)
    }
}

/// Bilinear interpolation weights along one axis with half-pixel centers
/// (`align_corners = false`): output index -> (i0, i1, frac).
pub(crate) fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of every plane of a `[N, C, H, W]` tensor.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    if h == out_h && w == out_w {
        return x.clone();
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        let plane = &src[p * h * w..(p + 1) * h * w];
        let oplane = &mut dst[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                oplane[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Nearest-neighbour resize (half-pixel centers) of a `[N, C, H, W]` tensor.
pub fn resize_nearest(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let pick = |in_len: usize, out_len: usize, o: usize| {
        let src = ((o as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize;
        src.min(in_len - 1)
    };
    let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        for oy in 0..out_h {
            let sy = pick(h, out_h, oy);
            for ox in 0..out_w {
                let sx = pick(w, out_w, ox);
                dst[p * out_h * out_w + oy * out_w + ox] = src[p * h * w + sy * w + sx];
            }
        }
    }
    out
}
