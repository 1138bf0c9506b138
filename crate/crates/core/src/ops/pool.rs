//! Average pooling, windowed and global.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{expect_rank, offset4, Tensor};

fn pooled_extent(input: usize, window: usize, stride: usize) -> Result<usize> {
    if window == 0 || stride == 0 {
        return Err(Error::ShapeMismatch("pool window/stride must be >= 1".into()));
    }
    if input < window || (input - window) % stride != 0 {
        return Err(Error::ShapeMismatch(format!(
            "pool window {window} stride {stride} does not tile extent {input}"
        )));
    }
    Ok((input - window) / stride + 1)
}

pub fn avgpool2d<T: Scalar>(input: &Tensor<T>, window: usize, stride: usize) -> Result<Tensor<T>> {
    expect_rank(input, 4, "avgpool input")?;
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let oh = pooled_extent(h, window, stride)?;
    let ow = pooled_extent(w, window, stride)?;
    let norm = T::from_usize(window * window);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let in_shape = [n, c, h, w];
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for ky in 0..window {
                        for kx in 0..window {
                            acc = acc
                                + input.data()
                                    [offset4(&in_shape, ni, ci, oy * stride + ky, ox * stride + kx)];
                        }
                    }
                    out.data_mut()[offset4(&[n, c, oh, ow], ni, ci, oy, ox)] = acc / norm;
                }
            }
        }
    }
    Ok(out)
}

/// Spreads each output gradient uniformly (1/window^2) over its window.
pub fn avgpool2d_backward<T: Scalar>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let oh = pooled_extent(h, window, stride)?;
    let ow = pooled_extent(w, window, stride)?;
    if grad_out.shape() != [n, c, oh, ow] {
        return Err(Error::ShapeMismatch(format!(
            "avgpool grad_out shape {:?}, expected {:?}",
            grad_out.shape(),
            [n, c, oh, ow]
        )));
    }
    let norm = T::from_usize(window * window);
    let mut grad_input = Tensor::zeros(input_shape);
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = grad_out.data()[offset4(&[n, c, oh, ow], ni, ci, oy, ox)] / norm;
                    for ky in 0..window {
                        for kx in 0..window {
                            let idx = offset4(
                                input_shape,
                                ni,
                                ci,
                                oy * stride + ky,
                                ox * stride + kx,
                            );
                            grad_input.data_mut()[idx] = grad_input.data()[idx] + g;
                        }
                    }
                }
            }
        }
    }
    Ok(grad_input)
}

/// Mean over all spatial positions: `(N,C,H,W)` -> `(N,C)`.
pub fn global_avgpool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(input, 4, "global_avgpool input")?;
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let plane = h * w;
    let mut out = Tensor::zeros(&[n, c]);
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let mut acc = 0.0f64;
            for v in &input.data()[base..base + plane] {
                acc += v.as_f64();
            }
            out.data_mut()[ni * c + ci] = T::from_f64(acc / plane as f64);
        }
    }
    Ok(out)
}

pub fn global_avgpool_backward<T: Scalar>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    if grad_out.shape() != [n, c] {
        return Err(Error::ShapeMismatch(format!(
            "global_avgpool grad_out shape {:?}, expected {:?}",
            grad_out.shape(),
            [n, c]
        )));
    }
    let plane = T::from_usize(h * w);
    let mut grad_input = Tensor::zeros(input_shape);
    for ni in 0..n {
        for ci in 0..c {
            let g = grad_out.data()[ni * c + ci] / plane;
            let base = (ni * c + ci) * (h * w);
            for v in &mut grad_input.data_mut()[base..base + h * w] {
                *v = g;
            }
        }
    }
    Ok(grad_input)
}
