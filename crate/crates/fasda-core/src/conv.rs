//! Spatial ops for the column-feature encoder: 2-D convolution over
//! `[channels, height, width]` tensors and the column-grouping reshape that
//! turns a feature map into a left-to-right sequence of column vectors.

use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

/// 2-D convolution with zero padding.
///
/// `input` is `[ci, h, w]`, `kernel` is `[co, ci, kh, kw]`, `bias` is `[co]`.
/// Output is `[co, oh, ow]` with `oh = (h + 2*pad_h - kh) / stride_h + 1`
/// and the analogous width formula.
pub fn conv2d<F: Scalar>(
    input: &Tensor<F>,
    kernel: &Tensor<F>,
    bias: &Tensor<F>,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<Tensor<F>, TensorError> {
    if input.rank() != 3 || kernel.rank() != 4 || bias.rank() != 1 {
        return Err(TensorError::Invalid {
            op: "conv2d",
            msg: format!(
                "expected input [ci,h,w], kernel [co,ci,kh,kw], bias [co]; got {:?} {:?} {:?}",
                input.shape(),
                kernel.shape(),
                bias.shape()
            ),
        });
    }
    let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (co, kci, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    if kci != ci || bias.shape()[0] != co {
        return Err(TensorError::Invalid {
            op: "conv2d",
            msg: format!(
                "channel mismatch: input ci={ci}, kernel ci={kci}, kernel co={co}, bias {:?}",
                bias.shape()
            ),
        });
    }
    let (sh, sw) = stride;
    let (ph, pw) = pad;
    if sh == 0 || sw == 0 || h + 2 * ph < kh || w + 2 * pw < kw {
        return Err(TensorError::Invalid {
            op: "conv2d",
            msg: format!("kernel {kh}x{kw} does not fit padded input {h}x{w} (pad {ph},{pw})"),
        });
    }
    let oh = (h + 2 * ph - kh) / sh + 1;
    let ow = (w + 2 * pw - kw) / sw + 1;

    let x = input.values();
    let k = kernel.values();
    let b = bias.values();
    let mut out = vec![F::zero(); co * oh * ow];
    for o in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b[o];
                for c in 0..ci {
                    for dy in 0..kh {
                        let iy = (oy * sh + dy) as isize - ph as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for dx in 0..kw {
                            let ix = (ox * sw + dx) as isize - pw as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            acc += x[(c * h + iy as usize) * w + ix as usize]
                                * k[((o * ci + c) * kh + dy) * kw + dx];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }

    Ok(Tensor::make_conv_node(
        vec![co, oh, ow],
        out,
        input,
        kernel,
        bias,
        move |grad, x, k| {
            let mut dx = vec![F::zero(); ci * h * w];
            let mut dk = vec![F::zero(); co * ci * kh * kw];
            let mut db = vec![F::zero(); co];
            for o in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = grad[(o * oh + oy) * ow + ox];
                        db[o] += g;
                        for c in 0..ci {
                            for dy in 0..kh {
                                let iy = (oy * sh + dy) as isize - ph as isize;
                                if iy < 0 || iy as usize >= h {
                                    continue;
                                }
                                for dxk in 0..kw {
                                    let ix = (ox * sw + dxk) as isize - pw as isize;
                                    if ix < 0 || ix as usize >= w {
                                        continue;
                                    }
                                    let xi = (c * h + iy as usize) * w + ix as usize;
                                    let ki = ((o * ci + c) * kh + dy) * kw + dxk;
                                    dx[xi] += g * k[ki];
                                    dk[ki] += g * x[xi];
                                }
                            }
                        }
                    }
                }
            }
            (dx, dk, db)
        },
    ))
}

/// Regroup a `[c, h, w]` feature map into `[m, c*h*stride]` where column
/// block `j` holds columns `j*stride .. (j+1)*stride`, zero padded on the
/// right when the width is not a multiple of the stride.
pub fn column_groups<F: Scalar>(
    input: &Tensor<F>,
    stride: usize,
) -> Result<Tensor<F>, TensorError> {
    if input.rank() != 3 || stride == 0 {
        return Err(TensorError::Invalid {
            op: "column_groups",
            msg: format!("need rank-3 input and stride > 0, got {:?}", input.shape()),
        });
    }
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let m = w.div_ceil(stride);
    let cols = c * h * stride;
    let x = input.values();
    let mut out = vec![F::zero(); m * cols];
    for j in 0..m {
        for cc in 0..c {
            for y in 0..h {
                for s in 0..stride {
                    let ix = j * stride + s;
                    if ix >= w {
                        continue;
                    }
                    out[j * cols + (cc * h + y) * stride + s] = x[(cc * h + y) * w + ix];
                }
            }
        }
    }
    Ok(Tensor::make_map_node(
        vec![m, cols],
        out,
        input,
        move |grad| {
            let mut dx = vec![F::zero(); c * h * w];
            for j in 0..m {
                for cc in 0..c {
                    for y in 0..h {
                        for s in 0..stride {
                            let ix = j * stride + s;
                            if ix >= w {
                                continue;
                            }
                            dx[(cc * h + y) * w + ix] += grad[j * cols + (cc * h + y) * stride + s];
                        }
                    }
                }
            }
            dx
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;

    #[test]
    fn conv_identity_kernel_center_tap() {
        // Single 3x3 kernel with a 1 at the center copies the input.
        let input =
            Tensor::<f64>::from_vec(vec![1, 3, 4], (0..12).map(|v| v as f64).collect()).unwrap();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let kernel = Tensor::from_vec(vec![1, 1, 3, 3], k).unwrap();
        let bias = Tensor::from_vec(vec![1], vec![0.0]).unwrap();
        let out = conv2d(&input, &kernel, &bias, (1, 1), (1, 1)).unwrap();
        assert_eq!(out.shape(), &[1, 3, 4]);
        assert_eq!(out.values(), input.values());
    }

    #[test]
    fn conv_output_geometry_halves_height() {
        let input = Tensor::<f64>::zeros(vec![1, 16, 64]);
        let kernel = Tensor::zeros(vec![4, 1, 3, 3]);
        let bias = Tensor::zeros(vec![4]);
        let out = conv2d(&input, &kernel, &bias, (2, 1), (1, 1)).unwrap();
        assert_eq!(out.shape(), &[4, 8, 64]);
    }

    #[test]
    fn conv_bias_gradient_counts_positions() {
        let input = Tensor::<f64>::zeros(vec![1, 4, 4]);
        let kernel = Tensor::param(vec![2, 1, 3, 3], vec![0.0; 18]).unwrap();
        let bias = Tensor::param(vec![2], vec![0.0, 0.0]).unwrap();
        let out = conv2d(&input, &kernel, &bias, (1, 1), (1, 1)).unwrap();
        backward(&out.sum()).unwrap();
        // Every one of the 4x4 output positions adds 1 to its channel bias.
        assert_eq!(bias.grad().unwrap(), vec![16.0, 16.0]);
    }

    #[test]
    fn column_groups_layout_and_grad() {
        // [1, 2, 4] map, stride 2 -> two groups of shape [1*2*2].
        let input =
            Tensor::param(vec![1, 2, 4], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]).unwrap();
        let g = column_groups(&input, 2).unwrap();
        assert_eq!(g.shape(), &[2, 4]);
        // Group 0: columns 0..2 of both rows; group 1: columns 2..4.
        assert_eq!(g.values(), vec![0.0, 1.0, 4.0, 5.0, 2.0, 3.0, 6.0, 7.0]);
        backward(&g.sum()).unwrap();
        assert_eq!(input.grad().unwrap(), vec![1.0; 8]);
    }

    #[test]
    fn column_groups_pads_ragged_width() {
        let input = Tensor::<f64>::from_vec(vec![1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let g = column_groups(&input, 2).unwrap();
        assert_eq!(g.shape(), &[2, 2]);
        assert_eq!(g.values(), vec![1.0, 2.0, 3.0, 0.0]);
    }
}
