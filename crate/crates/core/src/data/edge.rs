use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One-pixel boundary of a binary mask: foreground pixels whose 3×3
/// neighbourhood (clipped to the frame) contains background, i.e.
/// `mask - erode(mask)`. Pixels outside the frame never count as background,
/// so a full mask has no edge.
///
/// Accepts `[H, W]`, `[1, H, W]` or `[1, 1, H, W]`; the output has the input's shape.
pub fn extract_edge_gt(mask: &Tensor) -> Result<Tensor> {
    let (h, w) = match mask.shape() {
        [h, w] | [1, h, w] | [1, 1, h, w] => (*h, *w),
        s => return Err(Error::contract(format!("edge extraction expects a single plane, got {s:?}"))),
    };
    let m = mask.data();
    if let Some(v) = m.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::contract(format!("edge extraction needs a binary mask, found value {v}")));
    }
    let mut edge = Tensor::zeros(mask.shape());
    let out = edge.data_mut();
    for y in 0..h {
        for x in 0..w {
            if m[y * w + x] == 0.0 {
                continue;
            }
            let touches_bg = (y.saturating_sub(1)..=(y + 1).min(h - 1))
                .any(|ny| (x.saturating_sub(1)..=(x + 1).min(w - 1)).any(|nx| m[ny * w + nx] == 0.0));
            if touches_bg {
                out[y * w + x] = 1.0;
            }
        }
    }
    Ok(edge)
}
