//! Per-channel batch normalization over `(N,C,H,W)`.
//!
//! Train mode normalizes by batch statistics (population variance) and
//! returns updated running statistics; eval mode normalizes by the running
//! statistics. Channel reductions accumulate in double precision.

use crate::error::{Error, Result};
use crate::ops::Mode;
use crate::scalar::Scalar;
use crate::tensor::{expect_rank, Tensor};

pub struct BnCache<T: Scalar> {
    /// Normalized activations, before the affine transform.
    x_hat: Tensor<T>,
    /// Per-channel 1/sqrt(var + eps) actually used by the forward pass.
    inv_std: Vec<T>,
    mode: Mode,
}

pub struct BnForward<T: Scalar> {
    pub output: Tensor<T>,
    pub new_running_mean: Tensor<T>,
    pub new_running_var: Tensor<T>,
    pub cache: BnCache<T>,
}

pub struct BnGrads<T: Scalar> {
    pub grad_input: Tensor<T>,
    pub grad_gamma: Tensor<T>,
    pub grad_beta: Tensor<T>,
}

fn check_channel_vec<T: Scalar>(t: &Tensor<T>, c: usize, what: &str) -> Result<()> {
    if t.shape() != [c] {
        return Err(Error::ShapeMismatch(format!(
            "{what}: expected shape [{c}], got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn batchnorm2d_forward<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    mode: Mode,
    eps: f64,
    momentum: f64,
) -> Result<BnForward<T>> {
    expect_rank(input, 4, "batchnorm input")?;
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    check_channel_vec(gamma, c, "batchnorm gamma")?;
    check_channel_vec(beta, c, "batchnorm beta")?;
    check_channel_vec(running_mean, c, "batchnorm running_mean")?;
    check_channel_vec(running_var, c, "batchnorm running_var")?;

    let m = n * h * w;
    if mode == Mode::Train && m < 2 {
        return Err(Error::DegenerateBatch(format!(
            "batchnorm train mode needs N*H*W >= 2, got {m}"
        )));
    }

    let plane = h * w;
    let sample = c * plane;
    let data = input.data();

    // Per-channel statistics used for normalization.
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    if mode == Mode::Train {
        for ci in 0..c {
            let mut acc = 0.0f64;
            for ni in 0..n {
                let base = ni * sample + ci * plane;
                for v in &data[base..base + plane] {
                    acc += v.as_f64();
                }
            }
            mean[ci] = acc / m as f64;
            let mut vacc = 0.0f64;
            for ni in 0..n {
                let base = ni * sample + ci * plane;
                for v in &data[base..base + plane] {
                    let d = v.as_f64() - mean[ci];
                    vacc += d * d;
                }
            }
            var[ci] = vacc / m as f64;
        }
    } else {
        for ci in 0..c {
            mean[ci] = running_mean.data()[ci].as_f64();
            var[ci] = running_var.data()[ci].as_f64();
        }
    }

    let inv_std: Vec<T> = var
        .iter()
        .map(|&v| T::from_f64(1.0 / (v + eps).sqrt()))
        .collect();

    let mut x_hat = Tensor::zeros(input.shape());
    let mut output = Tensor::zeros(input.shape());
    {
        let xh = x_hat.data_mut();
        let out = output.data_mut();
        for ni in 0..n {
            for ci in 0..c {
                let mu = T::from_f64(mean[ci]);
                let s = inv_std[ci];
                let g = gamma.data()[ci];
                let b = beta.data()[ci];
                let base = ni * sample + ci * plane;
                for i in base..base + plane {
                    let xh_i = (data[i] - mu) * s;
                    xh[i] = xh_i;
                    out[i] = g * xh_i + b;
                }
            }
        }
    }

    let (new_running_mean, new_running_var) = if mode == Mode::Train {
        let mom = T::from_f64(momentum);
        let one_minus = T::from_f64(1.0 - momentum);
        let nm = Tensor::from_fn(&[c], |ci| {
            mom * running_mean.data()[ci] + one_minus * T::from_f64(mean[ci])
        });
        let nv = Tensor::from_fn(&[c], |ci| {
            mom * running_var.data()[ci] + one_minus * T::from_f64(var[ci])
        });
        (nm, nv)
    } else {
        (running_mean.clone(), running_var.clone())
    };

    Ok(BnForward {
        output,
        new_running_mean,
        new_running_var,
        cache: BnCache { x_hat, inv_std, mode },
    })
}

pub fn batchnorm2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cache: &BnCache<T>,
    gamma: &Tensor<T>,
) -> Result<BnGrads<T>> {
    let x_hat = &cache.x_hat;
    if grad_out.shape() != x_hat.shape() {
        return Err(Error::ShapeMismatch(format!(
            "batchnorm grad_out shape {:?}, expected {:?}",
            grad_out.shape(),
            x_hat.shape()
        )));
    }
    let (n, c, h, w) = (x_hat.dim(0), x_hat.dim(1), x_hat.dim(2), x_hat.dim(3));
    let plane = h * w;
    let sample = c * plane;
    let m = (n * plane) as f64;
    let go = grad_out.data();
    let xh = x_hat.data();

    let mut grad_gamma = Tensor::zeros(&[c]);
    let mut grad_beta = Tensor::zeros(&[c]);
    let mut grad_input = Tensor::zeros(x_hat.shape());

    for ci in 0..c {
        let mut sum_g = 0.0f64;
        let mut sum_gx = 0.0f64;
        for ni in 0..n {
            let base = ni * sample + ci * plane;
            for i in base..base + plane {
                sum_g += go[i].as_f64();
                sum_gx += go[i].as_f64() * xh[i].as_f64();
            }
        }
        grad_beta.data_mut()[ci] = T::from_f64(sum_g);
        grad_gamma.data_mut()[ci] = T::from_f64(sum_gx);

        let g = gamma.data()[ci];
        let s = cache.inv_std[ci];
        match cache.mode {
            Mode::Train => {
                let mean_g = T::from_f64(sum_g / m);
                let mean_gx = T::from_f64(sum_gx / m);
                let gi = grad_input.data_mut();
                for ni in 0..n {
                    let base = ni * sample + ci * plane;
                    for i in base..base + plane {
                        gi[i] = g * s * (go[i] - mean_g - xh[i] * mean_gx);
                    }
                }
            }
            Mode::Eval => {
                // Running statistics are constants: d/dx is a plain scale.
                let gi = grad_input.data_mut();
                for ni in 0..n {
                    let base = ni * sample + ci * plane;
                    for i in base..base + plane {
                        gi[i] = g * s * go[i];
                    }
                }
            }
        }
    }

    Ok(BnGrads { grad_input, grad_gamma, grad_beta })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bn_train(
        input: &Tensor<f32>,
        gamma: &Tensor<f32>,
        beta: &Tensor<f32>,
    ) -> BnForward<f32> {
        let c = input.dim(1);
        let rm = Tensor::zeros(&[c]);
        let rv = Tensor::full(&[c], 1.0);
        batchnorm2d_forward(input, gamma, beta, &rm, &rv, Mode::Train, 1e-5, 0.9).unwrap()
    }

    #[test]
    fn constant_input_normalizes_to_near_zero() {
        let input = Tensor::<f32>::full(&[2, 3, 4, 4], 7.5);
        let gamma = Tensor::full(&[3], 1.0);
        let beta = Tensor::zeros(&[3]);
        let fwd = bn_train(&input, &gamma, &beta);
        assert!(fwd.output.data().iter().all(|v| v.abs() <= 1e-2));
    }

    #[test]
    fn zero_gamma_broadcasts_beta() {
        let input = Tensor::<f32>::from_fn(&[2, 2, 3, 3], |i| i as f32);
        let gamma = Tensor::zeros(&[2]);
        let beta = Tensor::new(&[2], vec![1.5, -2.0]).unwrap();
        let fwd = bn_train(&input, &gamma, &beta);
        let out = fwd.output.data();
        let plane = 9;
        for ni in 0..2 {
            for i in 0..plane {
                assert_eq!(out[ni * 18 + i], 1.5);
                assert_eq!(out[ni * 18 + plane + i], -2.0);
            }
        }
    }

    #[test]
    fn three_value_channel_matches_hand_computation() {
        // Values {1,2,3} as N=3, H=W=1: population variance 2/3.
        let input = Tensor::<f32>::new(&[3, 1, 1, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let gamma = Tensor::full(&[1], 1.0);
        let beta = Tensor::zeros(&[1]);
        let fwd = bn_train(&input, &gamma, &beta);
        let out = fwd.output.data();
        assert!((out[0] + 1.2247).abs() < 1e-3, "got {}", out[0]);
        assert!(out[1].abs() < 1e-3);
        assert!((out[2] - 1.2247).abs() < 1e-3);
    }

    #[test]
    fn running_stats_blend_with_momentum() {
        let input = Tensor::<f32>::new(&[4, 1, 1, 1], vec![0.0, 2.0, 4.0, 6.0]).unwrap();
        let gamma = Tensor::full(&[1], 1.0);
        let beta = Tensor::zeros(&[1]);
        let rm = Tensor::full(&[1], 10.0);
        let rv = Tensor::full(&[1], 1.0);
        let fwd =
            batchnorm2d_forward(&input, &gamma, &beta, &rm, &rv, Mode::Train, 1e-5, 0.9).unwrap();
        // batch mean 3, population variance 5
        assert!((fwd.new_running_mean.data()[0] - (0.9 * 10.0 + 0.1 * 3.0)).abs() < 1e-5);
        assert!((fwd.new_running_var.data()[0] - (0.9 * 1.0 + 0.1 * 5.0)).abs() < 1e-5);
    }

    #[test]
    fn eval_mode_uses_running_stats_per_sample() {
        let gamma = Tensor::full(&[1], 2.0);
        let beta = Tensor::full(&[1], 1.0);
        let rm = Tensor::full(&[1], 5.0);
        let rv = Tensor::full(&[1], 4.0);
        let one = Tensor::<f32>::new(&[1, 1, 1, 1], vec![7.0]).unwrap();
        let fwd =
            batchnorm2d_forward(&one, &gamma, &beta, &rm, &rv, Mode::Eval, 0.0, 0.9).unwrap();
        // (7-5)/2 * 2 + 1 = 3
        assert!((fwd.output.data()[0] - 3.0).abs() < 1e-5);
    }

    #[test]
    fn train_mode_rejects_single_element_batch() {
        let input = Tensor::<f32>::zeros(&[1, 2, 1, 1]);
        let gamma = Tensor::full(&[2], 1.0);
        let beta = Tensor::zeros(&[2]);
        let rm = Tensor::zeros(&[2]);
        let rv = Tensor::full(&[2], 1.0);
        let err = batchnorm2d_forward(&input, &gamma, &beta, &rm, &rv, Mode::Train, 1e-5, 0.9);
        assert!(matches!(err, Err(Error::DegenerateBatch(_))));
    }
}
