//! 2-D cross-correlation with zero padding, no bias.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{expect_rank, Tensor};

/// Output spatial extent, checked for integral division.
fn out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::ShapeMismatch(format!(
            "kernel {kernel} larger than padded input {padded}"
        )));
    }
    if (padded - kernel) % stride != 0 {
        return Err(Error::ShapeMismatch(format!(
            "stride {stride} does not divide padded extent {padded} - kernel {kernel}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn check_dims<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvDims> {
    expect_rank(input, 4, "conv2d input")?;
    expect_rank(weight, 4, "conv2d weight")?;
    if stride == 0 {
        return Err(Error::ShapeMismatch("conv2d stride must be >= 1".into()));
    }
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (o, wc, kh, kw) = (weight.dim(0), weight.dim(1), weight.dim(2), weight.dim(3));
    if wc != c {
        return Err(Error::ShapeMismatch(format!(
            "conv2d channel mismatch: input has {c}, weight expects {wc}"
        )));
    }
    let oh = out_extent(h, kh, stride, padding)?;
    let ow = out_extent(w, kw, stride, padding)?;
    Ok(ConvDims { n, c, h, w, o, kh, kw, oh, ow })
}

/// Unfold one sample into a `(c*kh*kw) x (oh*ow)` patch matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    sample: &[T],
    d: &ConvDims,
    stride: usize,
    padding: usize,
    cols: &mut [T],
) {
    let (h, w, oh, ow) = (d.h, d.w, d.oh, d.ow);
    let plane = h * w;
    let mut row = 0;
    for ci in 0..d.c {
        let src = &sample[ci * plane..(ci + 1) * plane];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let dst = &mut cols[row * (oh * ow)..(row + 1) * (oh * ow)];
                row += 1;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let srow = &src[(iy as usize) * w..(iy as usize + 1) * w];
                    for (ox, dv) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        *dv = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add the patch matrix back onto an input-shaped sample.
#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    cols: &[T],
    d: &ConvDims,
    stride: usize,
    padding: usize,
    sample: &mut [T],
) {
    let (h, w, oh, ow) = (d.h, d.w, d.oh, d.ow);
    let plane = h * w;
    let mut row = 0;
    for ci in 0..d.c {
        let dst = &mut sample[ci * plane..(ci + 1) * plane];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let src = &cols[row * (oh * ow)..(row + 1) * (oh * ow)];
                row += 1;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[(iy as usize) * w..(iy as usize + 1) * w];
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    for (ox, &sv) in srow.iter().enumerate() {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        if ix >= 0 && (ix as usize) < w {
                            drow[ix as usize] = drow[ix as usize] + sv;
                        }
                    }
                }
            }
        }
    }
}

/// `out[m][p] += a[m][k] * b[k][p]`, row-major flat buffers.
fn matmul_add<T: Scalar>(a: &[T], rows: usize, inner: usize, b: &[T], cols: usize, out: &mut [T]) {
    for i in 0..rows {
        let arow = &a[i * inner..(i + 1) * inner];
        let orow = &mut out[i * cols..(i + 1) * cols];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * cols..(kk + 1) * cols];
            for (ov, &bv) in orow.iter_mut().zip(brow.iter()) {
                *ov = *ov + av * bv;
            }
        }
    }
}

/// `out[k][p] += a[m][k]^T • b[m][p]` (accumulates A-transposed times B).
fn matmul_tn_add<T: Scalar>(
    a: &[T],
    rows: usize,
    inner: usize,
    b: &[T],
    cols: usize,
    out: &mut [T],
) {
    for m in 0..rows {
        let arow = &a[m * inner..(m + 1) * inner];
        let brow = &b[m * cols..(m + 1) * cols];
        for (kk, &av) in arow.iter().enumerate() {
            let orow = &mut out[kk * cols..(kk + 1) * cols];
            for (ov, &bv) in orow.iter_mut().zip(brow.iter()) {
                *ov = *ov + av * bv;
            }
        }
    }
}

/// `out[m][k] += a[m][p] • b[k][p]^T`.
fn matmul_nt_add<T: Scalar>(
    a: &[T],
    rows: usize,
    cols: usize,
    b: &[T],
    inner: usize,
    out: &mut [T],
) {
    for m in 0..rows {
        let arow = &a[m * cols..(m + 1) * cols];
        let orow = &mut out[m * inner..(m + 1) * inner];
        for (kk, ov) in orow.iter_mut().enumerate() {
            let brow = &b[kk * cols..(kk + 1) * cols];
            let mut acc = T::zero();
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc = acc + av * bv;
            }
            *ov = *ov + acc;
        }
    }
}

/// Standard cross-correlation of `(N,C,H,W)` input with `(O,C,kh,kw)` weight.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let d = check_dims(input, weight, stride, padding)?;
    let patch = d.c * d.kh * d.kw;
    let out_plane = d.oh * d.ow;
    let mut output = Tensor::zeros(&[d.n, d.o, d.oh, d.ow]);
    let in_sample = d.c * d.h * d.w;
    let in_data = input.data();
    let w_data = weight.data();

    output
        .data_mut()
        .par_chunks_mut(d.o * out_plane)
        .enumerate()
        .for_each(|(i, out_sample)| {
            let mut cols = vec![T::zero(); patch * out_plane];
            im2col(&in_data[i * in_sample..(i + 1) * in_sample], &d, stride, padding, &mut cols);
            matmul_add(w_data, d.o, patch, &cols, out_plane, out_sample);
        });
    Ok(output)
}

pub struct Conv2dGrads<T: Scalar> {
    pub grad_input: Tensor<T>,
    pub grad_weight: Tensor<T>,
}

/// Exact gradients of [`conv2d_forward`] with respect to input and weight.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Conv2dGrads<T>> {
    let d = check_dims(input, weight, stride, padding)?;
    if grad_out.shape() != [d.n, d.o, d.oh, d.ow] {
        return Err(Error::ShapeMismatch(format!(
            "conv2d grad_out shape {:?}, expected {:?}",
            grad_out.shape(),
            [d.n, d.o, d.oh, d.ow]
        )));
    }
    let patch = d.c * d.kh * d.kw;
    let out_plane = d.oh * d.ow;
    let in_sample = d.c * d.h * d.w;
    let in_data = input.data();
    let w_data = weight.data();
    let go_data = grad_out.data();

    // Per-sample pieces computed in parallel, then reduced in sample order so
    // the result does not depend on thread scheduling.
    let per_sample: Vec<(Vec<T>, Vec<T>)> = (0..d.n)
        .into_par_iter()
        .map(|i| {
            let mut cols = vec![T::zero(); patch * out_plane];
            im2col(&in_data[i * in_sample..(i + 1) * in_sample], &d, stride, padding, &mut cols);
            let go_sample = &go_data[i * d.o * out_plane..(i + 1) * d.o * out_plane];

            let mut gw = vec![T::zero(); d.o * patch];
            matmul_nt_add(go_sample, d.o, out_plane, &cols, patch, &mut gw);

            let mut gcols = vec![T::zero(); patch * out_plane];
            matmul_tn_add(w_data, d.o, patch, go_sample, out_plane, &mut gcols);
            let mut gin = vec![T::zero(); in_sample];
            col2im_add(&gcols, &d, stride, padding, &mut gin);
            (gin, gw)
        })
        .collect();

    let mut grad_input = Tensor::zeros(&[d.n, d.c, d.h, d.w]);
    let mut grad_weight = Tensor::zeros(&[d.o, d.c, d.kh, d.kw]);
    for (i, (gin, gw)) in per_sample.into_iter().enumerate() {
        grad_input.data_mut()[i * in_sample..(i + 1) * in_sample].copy_from_slice(&gin);
        for (acc, v) in grad_weight.data_mut().iter_mut().zip(gw.iter()) {
            *acc = *acc + *v;
        }
    }
    Ok(Conv2dGrads { grad_input, grad_weight })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_ones_overlap_counts() {
        let input = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let weight = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let out = conv2d_forward(&input, &weight, 1, 1).unwrap();
        assert_eq!(out.shape(), &[1, 1, 3, 3]);
        let d = out.data();
        assert_eq!(d[4], 9.0); // center
        assert_eq!(d[1], 6.0); // edge-center
        assert_eq!(d[0], 4.0); // corner
        assert_eq!(d[8], 4.0);
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let input = Tensor::<f32>::from_fn(&[2, 1, 4, 4], |i| i as f32 * 0.5 - 3.0);
        let weight = Tensor::<f32>::full(&[1, 1, 1, 1], 1.0);
        let out = conv2d_forward(&input, &weight, 1, 0).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn output_shape_arithmetic() {
        let input = Tensor::<f32>::zeros(&[2, 3, 8, 8]);
        let weight = Tensor::<f32>::zeros(&[4, 3, 3, 3]);
        let out = conv2d_forward(&input, &weight, 1, 1).unwrap();
        assert_eq!(out.shape(), &[2, 4, 8, 8]);
    }

    #[test]
    fn channel_mismatch_is_error() {
        let input = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let weight = Tensor::<f32>::zeros(&[1, 3, 3, 3]);
        assert!(conv2d_forward(&input, &weight, 1, 1).is_err());
    }

    #[test]
    fn non_integral_stride_is_error() {
        let input = Tensor::<f32>::zeros(&[1, 1, 5, 5]);
        let weight = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        assert!(conv2d_forward(&input, &weight, 2, 0).is_err());
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let input = Tensor::<f32>::from_fn(&[1, 2, 4, 4], |i| (i as f32).sin());
        let weight = Tensor::<f32>::from_fn(&[3, 2, 3, 3], |i| (i as f32).cos());
        let go = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
        let g = conv2d_backward(&input, &weight, &go, 1, 1).unwrap();
        assert!(g.grad_input.data().iter().all(|&v| v == 0.0));
        assert!(g.grad_weight.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_kernel_backward_passes_grad_through() {
        let input = Tensor::<f32>::from_fn(&[1, 1, 3, 3], |i| i as f32);
        let weight = Tensor::<f32>::full(&[1, 1, 1, 1], 1.0);
        let go = Tensor::<f32>::from_fn(&[1, 1, 3, 3], |i| 0.25 * i as f32 - 1.0);
        let g = conv2d_backward(&input, &weight, &go, 1, 0).unwrap();
        assert_eq!(g.grad_input.data(), go.data());
    }
}
