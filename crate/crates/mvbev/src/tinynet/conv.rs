//! 2D convolution with stride and dilation, plus the exact reverse-mode
//! pass. The backward loops visit the same (output, tap) pairs as the
//! forward, so the gradient is the true transpose of the forward map.

use crate::tensor::Tensor;

pub const KERNEL: usize = 3;

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn unit() -> Self {
        ConvSpec {
            stride: 1,
            dilation: 1,
            padding: 1,
        }
    }

    pub fn strided() -> Self {
        ConvSpec {
            stride: 2,
            dilation: 1,
            padding: 1,
        }
    }

    /// Shape-preserving dilated conv: padding equals dilation for k = 3.
    pub fn dilated(dilation: usize) -> Self {
        ConvSpec {
            stride: 1,
            dilation,
            padding: dilation,
        }
    }

    pub fn out_dim(&self, in_dim: usize) -> usize {
        let span = self.dilation * (KERNEL - 1) + 1;
        (in_dim + 2 * self.padding - span) / self.stride + 1
    }
}

/// `input (Cin, H, W)`, `weight (Cout, Cin, 3, 3)`, `bias (Cout)` ->
/// `(Cout, out_h, out_w)`. Out-of-image taps read zero.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, spec: &ConvSpec) -> Tensor {
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let c_out = weight.shape()[0];
    debug_assert_eq!(weight.shape(), &[c_out, c_in, KERNEL, KERNEL]);
    debug_assert_eq!(bias.shape(), &[c_out]);
    let (oh, ow) = (spec.out_dim(h), spec.out_dim(w));
    let mut out = Tensor::zeros(&[c_out, oh, ow]);

    let idata = input.data();
    let wdata = weight.data();
    let odata = out.data_mut();
    for oc in 0..c_out {
        let b = bias.data()[oc];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b;
                for ic in 0..c_in {
                    let wbase = ((oc * c_in) + ic) * KERNEL * KERNEL;
                    let ibase = ic * h * w;
                    for ky in 0..KERNEL {
                        let iy = (oy * spec.stride + ky * spec.dilation) as isize
                            - spec.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..KERNEL {
                            let ix = (ox * spec.stride + kx * spec.dilation) as isize
                                - spec.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += wdata[wbase + ky * KERNEL + kx]
                                * idata[ibase + iy as usize * w + ix as usize];
                        }
                    }
                }
                odata[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

/// Reverse-mode pass for [`conv2d`]: returns `(grad_input, grad_weight,
/// grad_bias)` for upstream `grad_out (Cout, out_h, out_w)`.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    spec: &ConvSpec,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let c_out = weight.shape()[0];
    let (oh, ow) = (spec.out_dim(h), spec.out_dim(w));
    debug_assert_eq!(grad_out.shape(), &[c_out, oh, ow]);

    let mut grad_input = Tensor::zeros(&[c_in, h, w]);
    let mut grad_weight = Tensor::zeros(&[c_out, c_in, KERNEL, KERNEL]);
    let mut grad_bias = Tensor::zeros(&[c_out]);

    let idata = input.data();
    let wdata = weight.data();
    let gdata = grad_out.data();
    let gi = grad_input.data_mut();
    for oc in 0..c_out {
        let mut gb = 0.0f32;
        for oy in 0..oh {
            for ox in 0..ow {
                let g = gdata[(oc * oh + oy) * ow + ox];
                gb += g;
                if g == 0.0 {
                    continue;
                }
                for ic in 0..c_in {
                    let wbase = ((oc * c_in) + ic) * KERNEL * KERNEL;
                    let ibase = ic * h * w;
                    for ky in 0..KERNEL {
                        let iy = (oy * spec.stride + ky * spec.dilation) as isize
                            - spec.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..KERNEL {
                            let ix = (ox * spec.stride + kx * spec.dilation) as isize
                                - spec.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let ii = ibase + iy as usize * w + ix as usize;
                            gi[ii] += wdata[wbase + ky * KERNEL + kx] * g;
                            grad_weight.data_mut()[wbase + ky * KERNEL + kx] += idata[ii] * g;
                        }
                    }
                }
            }
        }
        grad_bias.data_mut()[oc] = gb;
    }
    (grad_input, grad_weight, grad_bias)
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor::from_vec(x.shape(), data)
}

/// Gradient through ReLU given the pre-activation values.
pub fn relu_backward(pre: &Tensor, grad: &Tensor) -> Tensor {
    debug_assert_eq!(pre.shape(), grad.shape());
    let data = pre
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&z, &g)| if z > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(pre.shape(), data)
}

/// Logistic squashing, clamped to the largest f32 interval strictly inside
/// (0, 1) so occupancy values never saturate to exactly 0 or 1.
#[inline]
pub fn logistic(x: f32) -> f32 {
    let y = (1.0 / (1.0 + (-(x as f64)).exp())) as f32;
    y.clamp(f32::MIN_POSITIVE, 1.0 - f32::EPSILON / 2.0)
}
