//! Affine map: `(N,D) x (D,M) + (M,)`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{expect_rank, Tensor};

pub fn fully_connected<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    expect_rank(input, 2, "fc input")?;
    expect_rank(weight, 2, "fc weight")?;
    let (n, d) = (input.dim(0), input.dim(1));
    let (wd, m) = (weight.dim(0), weight.dim(1));
    if wd != d {
        return Err(Error::ShapeMismatch(format!(
            "fc inner dimensions: input {d}, weight {wd}"
        )));
    }
    if bias.shape() != [m] {
        return Err(Error::ShapeMismatch(format!(
            "fc bias shape {:?}, expected [{m}]",
            bias.shape()
        )));
    }
    let mut out = Tensor::zeros(&[n, m]);
    for ni in 0..n {
        let xrow = &input.data()[ni * d..(ni + 1) * d];
        let orow = &mut out.data_mut()[ni * m..(ni + 1) * m];
        orow.copy_from_slice(bias.data());
        for (di, &x) in xrow.iter().enumerate() {
            let wrow = &weight.data()[di * m..(di + 1) * m];
            for (ov, &wv) in orow.iter_mut().zip(wrow.iter()) {
                *ov = *ov + x * wv;
            }
        }
    }
    Ok(out)
}

pub struct LinearGrads<T: Scalar> {
    pub grad_input: Tensor<T>,
    pub grad_weight: Tensor<T>,
    pub grad_bias: Tensor<T>,
}

pub fn fully_connected_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let (n, d) = (input.dim(0), input.dim(1));
    let m = weight.dim(1);
    if grad_out.shape() != [n, m] {
        return Err(Error::ShapeMismatch(format!(
            "fc grad_out shape {:?}, expected {:?}",
            grad_out.shape(),
            [n, m]
        )));
    }
    let mut grad_input = Tensor::zeros(&[n, d]);
    let mut grad_weight = Tensor::zeros(&[d, m]);
    let mut grad_bias = Tensor::zeros(&[m]);

    for ni in 0..n {
        let grow = &grad_out.data()[ni * m..(ni + 1) * m];
        let xrow = &input.data()[ni * d..(ni + 1) * d];
        for (bv, &g) in grad_bias.data_mut().iter_mut().zip(grow.iter()) {
            *bv = *bv + g;
        }
        let girow = &mut grad_input.data_mut()[ni * d..(ni + 1) * d];
        for di in 0..d {
            let wrow = &weight.data()[di * m..(di + 1) * m];
            let mut acc = T::zero();
            for (&wv, &g) in wrow.iter().zip(grow.iter()) {
                acc = acc + wv * g;
            }
            girow[di] = acc;
            let x = xrow[di];
            let gwrow = &mut grad_weight.data_mut()[di * m..(di + 1) * m];
            for (gw, &g) in gwrow.iter_mut().zip(grow.iter()) {
                *gw = *gw + x * g;
            }
        }
    }
    Ok(LinearGrads { grad_input, grad_weight, grad_bias })
}
