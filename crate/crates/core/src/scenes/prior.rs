use super::tight_box;
use crate::detector::BBox;
use crate::numerics::Tensor;
use crate::{Error, Result};

/// Area-average pooling of a `[H, W]` mask down to `[out_h, out_w]`.
pub fn pool_prior(mask: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let &[h, w] = mask.shape() else {
        return Err(Error::ShapeMismatch {
            expected: vec![out_h, out_w],
            actual: mask.shape().to_vec(),
        });
    };
    if out_h == 0 || out_w == 0 || h % out_h != 0 || w % out_w != 0 {
        return Err(Error::InvalidConfig(format!(
            "cannot pool {h}x{w} evenly onto {out_h}x{out_w}"
        )));
    }
    let (bh, bw) = (h / out_h, w / out_w);
    let scale = 1.0 / (bh * bw) as f64;
    let src = mask.data();
    let mut out = vec![0.0; out_h * out_w];
    for (r, row) in src.chunks_exact(w).enumerate() {
        let dst = &mut out[(r / bh) * out_w..][..out_w];
        for (c, &v) in row.iter().enumerate() {
            dst[c / bw] += v;
        }
    }
    for v in &mut out {
        *v *= scale;
    }
    Tensor::from_vec(&[out_h, out_w], out)
}

pub fn flip_prior(prior: &Tensor) -> Tensor {
    super::flip_columns(prior)
}

/// One 8-connected foreground component of a binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub bbox: BBox,
    /// Row-major pixel indices.
    pub pixels: Vec<usize>,
}

/// 8-connected components of the pixels with value > 0.5, in row-major
/// order of their first pixel. Assumes a square mask.
pub fn connected_components(mask: &Tensor) -> Vec<Component> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    debug_assert_eq!(h, w, "tight_box assumes a square canvas");
    let data = mask.data();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if seen[start] || data[start] <= 0.5 {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut pixels = Vec::new();
        while let Some(p) = stack.pop() {
            pixels.push(p);
            let (r, c) = ((p / w) as isize, (p % w) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr < 0 || cc < 0 || rr as usize >= h || cc as usize >= w {
                        continue;
                    }
                    let q = rr as usize * w + cc as usize;
                    if !seen[q] && data[q] > 0.5 {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        pixels.sort_unstable();
        out.push(Component {
            bbox: tight_box(&pixels, w),
            pixels,
        });
    }
    out
}
