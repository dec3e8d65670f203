use super::Tensor;
use crate::Result;

/// Geometry of a square 2-D correlation over `[H, W, C]` tensors.
///
/// Weights are stored `[ky][kx][c_in][c_out]` so the innermost loop runs over
/// contiguous output channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// Spacing between kernel taps; 1 is a dense kernel.
    pub dilation: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    pub const fn weight_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels * self.out_channels
    }

    pub const fn param_len(&self) -> usize {
        self.weight_len() + self.out_channels
    }

    pub const fn output_dim(&self, input: usize) -> usize {
        (input + 2 * self.pad - self.dilation * (self.kernel - 1) - 1) / self.stride + 1
    }

    fn input_coord(&self, out: usize, tap: usize, limit: usize) -> Option<usize> {
        let pos = (out * self.stride + tap * self.dilation).checked_sub(self.pad)?;
        (pos < limit).then_some(pos)
    }

    pub fn forward(&self, input: &Tensor, weight: &[f64], bias: &[f64]) -> Result<Tensor> {
        let &[h, w, c] = input.shape() else {
            input.expect_shape(&[0, 0, self.in_channels])?;
            unreachable!()
        };
        input.expect_shape(&[h, w, self.in_channels])?;
        debug_assert_eq!(c, self.in_channels);
        debug_assert_eq!(weight.len(), self.weight_len());
        debug_assert_eq!(bias.len(), self.out_channels);

        let (oh, ow, co) = (self.output_dim(h), self.output_dim(w), self.out_channels);
        let src = input.data();
        let mut out = vec![0.0; oh * ow * co];
        for oy in 0..oh {
            for ox in 0..ow {
                let acc = &mut out[(oy * ow + ox) * co..][..co];
                acc.copy_from_slice(bias);
                for ky in 0..self.kernel {
                    let Some(iy) = self.input_coord(oy, ky, h) else { continue };
                    for kx in 0..self.kernel {
                        let Some(ix) = self.input_coord(ox, kx, w) else { continue };
                        let pixel = &src[(iy * w + ix) * c..][..c];
                        let taps = &weight[(ky * self.kernel + kx) * c * co..][..c * co];
                        for (ci, &x) in pixel.iter().enumerate() {
                            for (a, &wt) in acc.iter_mut().zip(&taps[ci * co..][..co]) {
                                *a += x * wt;
                            }
                        }
                    }
                }
            }
        }
        Tensor::from_vec(&[oh, ow, co], out)
    }

    /// Returns `(grad_input, grad_weight, grad_bias)`; the input gradient is
    /// only formed when requested.
    pub fn backward(
        &self,
        input: &Tensor,
        weight: &[f64],
        grad_out: &Tensor,
        want_input_grad: bool,
    ) -> (Option<Tensor>, Vec<f64>, Vec<f64>) {
        let (h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (oh, ow, co) = (grad_out.shape()[0], grad_out.shape()[1], grad_out.shape()[2]);
        let src = input.data();
        let g = grad_out.data();
        let mut grad_w = vec![0.0; self.weight_len()];
        let mut grad_b = vec![0.0; co];
        let mut grad_in = want_input_grad.then(|| vec![0.0; h * w * c]);

        for oy in 0..oh {
            for ox in 0..ow {
                let go = &g[(oy * ow + ox) * co..][..co];
                for (b, &v) in grad_b.iter_mut().zip(go) {
                    *b += v;
                }
                for ky in 0..self.kernel {
                    let Some(iy) = self.input_coord(oy, ky, h) else { continue };
                    for kx in 0..self.kernel {
                        let Some(ix) = self.input_coord(ox, kx, w) else { continue };
                        let base = (ky * self.kernel + kx) * c * co;
                        let pix = (iy * w + ix) * c;
                        for ci in 0..c {
                            let x = src[pix + ci];
                            let row = base + ci * co;
                            for (gw, &v) in grad_w[row..row + co].iter_mut().zip(go) {
                                *gw += x * v;
                            }
                            if let Some(gi) = grad_in.as_mut() {
                                let taps = &weight[row..row + co];
                                gi[pix + ci] += taps.iter().zip(go).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    }
                }
            }
        }
        let grad_in = grad_in.map(|d| Tensor::from_vec(&[h, w, c], d).expect("input shape"));
        (grad_in, grad_w, grad_b)
    }
}
