//! Channel concatenation of `(N,Ci,H,W)` tensors and its slicing inverse.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{expect_rank, Tensor};

pub fn concat_channels<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if inputs.is_empty() {
        return Err(Error::ShapeMismatch("concat of zero tensors".into()));
    }
    for t in inputs {
        expect_rank(t, 4, "concat input")?;
    }
    let (n, h, w) = (inputs[0].dim(0), inputs[0].dim(2), inputs[0].dim(3));
    for t in &inputs[1..] {
        if t.dim(0) != n || t.dim(2) != h || t.dim(3) != w {
            return Err(Error::ShapeMismatch(format!(
                "concat N/H/W mismatch: {:?} vs {:?}",
                inputs[0].shape(),
                t.shape()
            )));
        }
    }
    let c_total: usize = inputs.iter().map(|t| t.dim(1)).sum();
    let plane = h * w;
    let mut out = Tensor::zeros(&[n, c_total, h, w]);
    for ni in 0..n {
        let mut c_off = 0;
        for t in inputs {
            let ci = t.dim(1);
            let src = &t.data()[ni * ci * plane..(ni + 1) * ci * plane];
            let dst_base = (ni * c_total + c_off) * plane;
            out.data_mut()[dst_base..dst_base + ci * plane].copy_from_slice(src);
            c_off += ci;
        }
    }
    Ok(out)
}

/// Slices the output gradient back into per-input gradients.
pub fn concat_channels_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    channel_counts: &[usize],
) -> Result<Vec<Tensor<T>>> {
    expect_rank(grad_out, 4, "concat grad_out")?;
    let c_total: usize = channel_counts.iter().sum();
    if grad_out.dim(1) != c_total {
        return Err(Error::ShapeMismatch(format!(
            "concat grad_out has {} channels, inputs sum to {c_total}",
            grad_out.dim(1)
        )));
    }
    let (n, h, w) = (grad_out.dim(0), grad_out.dim(2), grad_out.dim(3));
    let plane = h * w;
    let mut grads = Vec::with_capacity(channel_counts.len());
    let mut c_off = 0;
    for &ci in channel_counts {
        let mut g = Tensor::zeros(&[n, ci, h, w]);
        for ni in 0..n {
            let src_base = (ni * c_total + c_off) * plane;
            let dst = &mut g.data_mut()[ni * ci * plane..(ni + 1) * ci * plane];
            dst.copy_from_slice(&grad_out.data()[src_base..src_base + ci * plane]);
        }
        c_off += ci;
        grads.push(g);
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_input_is_identity() {
        let t = Tensor::<f32>::from_fn(&[2, 3, 2, 2], |i| i as f32);
        let out = concat_channels(&[&t]).unwrap();
        assert_eq!(out, t);
    }

    #[test]
    fn channel_counts_add() {
        let a = Tensor::<f32>::full(&[2, 3, 4, 4], 1.0);
        let b = Tensor::<f32>::full(&[2, 5, 4, 4], 2.0);
        let out = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(out.shape(), &[2, 8, 4, 4]);
    }

    #[test]
    fn backward_slices_exactly() {
        let a = Tensor::<f32>::from_fn(&[2, 2, 3, 3], |i| i as f32);
        let b = Tensor::<f32>::from_fn(&[2, 1, 3, 3], |i| -(i as f32));
        let out = concat_channels(&[&a, &b]).unwrap();
        let parts = concat_channels_backward(&out, &[2, 1]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn spatial_mismatch_is_error() {
        let a = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let b = Tensor::<f32>::zeros(&[1, 2, 2, 2]);
        assert!(concat_channels(&[&a, &b]).is_err());
    }
}
