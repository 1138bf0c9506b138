//! Central finite-difference verification of every backward kernel.
//!
//! Checks run entirely in double precision: analytic gradients from the
//! reverse-mode kernels are compared against `(f(x+h) - f(x-h)) / 2h` with
//! `h = 1e-4`, element by element, on randomized small shapes. The CLI
//! `gradcheck` subcommand and the acceptance suite both run this module.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::ops::{self, Mode};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct OpReport {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub trials: usize,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

/// Standard normal shifted away from zero, for kink-free ReLU checks.
fn randn_nonzero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    Tensor::from_fn(shape, |_| {
        let v: f64 = normal.sample(rng);
        v + v.signum() * 0.2
    })
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn max_rel_err(analytic: &Tensor<f64>, fd: &Tensor<f64>) -> f64 {
    analytic
        .data()
        .iter()
        .zip(fd.data().iter())
        .map(|(&a, &f)| rel_err(a, f))
        .fold(0.0, f64::max)
}

/// Central finite differences of a scalar-valued function at `x`.
fn fd_grad(x: &Tensor<f64>, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - FD_STEP;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (fp - fm) / (2.0 * FD_STEP);
    }
    grad
}

/// Scalar projection `sum(r * t)` turning tensor outputs into a loss.
fn project(t: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    t.data().iter().zip(r.data().iter()).map(|(a, b)| a * b).sum()
}

fn check_conv(rng: &mut ChaCha8Rng, ksize: usize, trials: usize) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let input = randn(rng, &[1, 2, 4, 4]);
        let out_c = 3;
        let weight = randn(rng, &[out_c, 2, ksize, ksize]);
        let padding = ksize / 2;
        let out = ops::conv2d_forward(&input, &weight, 1, padding).unwrap();
        let r = randn(rng, out.shape());
        let grads = ops::conv2d_backward(&input, &weight, &r, 1, padding).unwrap();

        let fd_in = fd_grad(&input, |x| {
            project(&ops::conv2d_forward(x, &weight, 1, padding).unwrap(), &r)
        });
        let fd_w = fd_grad(&weight, |w| {
            project(&ops::conv2d_forward(&input, w, 1, padding).unwrap(), &r)
        });
        worst = worst
            .max(max_rel_err(&grads.grad_input, &fd_in))
            .max(max_rel_err(&grads.grad_weight, &fd_w));
    }
    worst
}

fn check_batchnorm(rng: &mut ChaCha8Rng, trials: usize) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let c = 3;
        let input = randn(rng, &[2, c, 3, 3]);
        let gamma = randn(rng, &[c]);
        let beta = randn(rng, &[c]);
        let rm = Tensor::zeros(&[c]);
        let rv = Tensor::full(&[c], 1.0);
        let run = |x: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>| {
            ops::batchnorm2d_forward(x, g, b, &rm, &rv, Mode::Train, 1e-5, 0.9)
                .unwrap()
                .output
        };
        let out = run(&input, &gamma, &beta);
        let r = randn(rng, out.shape());
        let fwd = ops::batchnorm2d_forward(
            &input, &gamma, &beta, &rm, &rv, Mode::Train, 1e-5, 0.9,
        )
        .unwrap();
        let grads = ops::batchnorm2d_backward(&r, &fwd.cache, &gamma).unwrap();

        let fd_in = fd_grad(&input, |x| project(&run(x, &gamma, &beta), &r));
        let fd_gamma = fd_grad(&gamma, |g| project(&run(&input, g, &beta), &r));
        let fd_beta = fd_grad(&beta, |b| project(&run(&input, &gamma, b), &r));
        worst = worst
            .max(max_rel_err(&grads.grad_input, &fd_in))
            .max(max_rel_err(&grads.grad_gamma, &fd_gamma))
            .max(max_rel_err(&grads.grad_beta, &fd_beta));
    }
    worst
}

fn check_relu(rng: &mut ChaCha8Rng, trials: usize) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let input = randn_nonzero(rng, &[2, 3, 4, 4]);
        let r = randn(rng, input.shape());
        let analytic = ops::relu_backward(&input, &r);
        let fd = fd_grad(&input, |x| project(&ops::relu(x), &r));
        worst = worst.max(max_rel_err(&analytic, &fd));
    }
    worst
}

fn check_avgpool(rng: &mut ChaCha8Rng, trials: usize) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let input = randn(rng, &[2, 2, 4, 4]);
        let out = ops::avgpool2d(&input, 2, 2).unwrap();
        let r = randn(rng, out.shape());
        let analytic = ops::avgpool2d_backward(input.shape(), &r, 2, 2).unwrap();
        let fd = fd_grad(&input, |x| project(&ops::avgpool2d(x, 2, 2).unwrap(), &r));
        worst = worst.max(max_rel_err(&analytic, &fd));
    }
    worst
}

fn check_global_avgpool(rng: &mut ChaCha8Rng, trials: usize) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let input = randn(rng, &[2, 3, 4, 4]);
        let out = ops::global_avgpool(&input).unwrap();
        let r = randn(rng, out.shape());
        let analytic = ops::global_avgpool_backward(input.shape(), &r).unwrap();
        let fd = fd_grad(&input, |x| project(&ops::global_avgpool(x).unwrap(), &r));
        worst = worst.max(max_rel_err(&analytic, &fd));
    }
    worst
}

fn check_concat(rng: &mut ChaCha8Rng, trials: usize) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let a = randn(rng, &[2, 2, 3, 3]);
        let b = randn(rng, &[2, 3, 3, 3]);
        let out = ops::concat_channels(&[&a, &b]).unwrap();
        let r = randn(rng, out.shape());
        let grads = ops::concat_channels_backward(&r, &[2, 3]).unwrap();

        let fd_a = fd_grad(&a, |x| project(&ops::concat_channels(&[x, &b]).unwrap(), &r));
        let fd_b = fd_grad(&b, |x| project(&ops::concat_channels(&[&a, x]).unwrap(), &r));
        worst = worst
            .max(max_rel_err(&grads[0], &fd_a))
            .max(max_rel_err(&grads[1], &fd_b));
    }
    worst
}

fn check_fully_connected(rng: &mut ChaCha8Rng, trials: usize) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let input = randn(rng, &[2, 3]);
        let weight = randn(rng, &[3, 4]);
        let bias = randn(rng, &[4]);
        let out = ops::fully_connected(&input, &weight, &bias).unwrap();
        let r = randn(rng, out.shape());
        let grads = ops::fully_connected_backward(&input, &weight, &r).unwrap();

        let fd_in = fd_grad(&input, |x| {
            project(&ops::fully_connected(x, &weight, &bias).unwrap(), &r)
        });
        let fd_w = fd_grad(&weight, |w| {
            project(&ops::fully_connected(&input, w, &bias).unwrap(), &r)
        });
        let fd_b = fd_grad(&bias, |b| {
            project(&ops::fully_connected(&input, &weight, b).unwrap(), &r)
        });
        worst = worst
            .max(max_rel_err(&grads.grad_input, &fd_in))
            .max(max_rel_err(&grads.grad_weight, &fd_w))
            .max(max_rel_err(&grads.grad_bias, &fd_b));
    }
    worst
}

fn check_softmax_cross_entropy(rng: &mut ChaCha8Rng, trials: usize) -> f64 {
    let mut worst = 0.0f64;
    for t in 0..trials {
        let logits = randn(rng, &[3, 2]);
        let labels = [t % 2, (t + 1) % 2, t % 2];
        let (_, cache) = ops::softmax_cross_entropy(&logits, &labels).unwrap();
        let analytic = ops::softmax_cross_entropy_backward(&cache);
        let fd = fd_grad(&logits, |x| {
            ops::softmax_cross_entropy(x, &labels).unwrap().0
        });
        worst = worst.max(max_rel_err(&analytic, &fd));
    }
    worst
}

/// Runs the whole per-op finite-difference suite.
pub fn run_suite(seed: u64, trials: usize) -> Vec<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let checks: Vec<(&'static str, Box<dyn FnMut(&mut ChaCha8Rng) -> f64>)> = vec![
        ("conv2d_1x1", Box::new(move |r| check_conv(r, 1, trials))),
        ("conv2d_3x3", Box::new(move |r| check_conv(r, 3, trials))),
        ("batchnorm2d_train", Box::new(move |r| check_batchnorm(r, trials))),
        ("relu", Box::new(move |r| check_relu(r, trials))),
        ("avgpool2d", Box::new(move |r| check_avgpool(r, trials))),
        ("global_avgpool", Box::new(move |r| check_global_avgpool(r, trials))),
        ("concat_channels", Box::new(move |r| check_concat(r, trials))),
        ("fully_connected", Box::new(move |r| check_fully_connected(r, trials))),
        (
            "softmax_cross_entropy",
            Box::new(move |r| check_softmax_cross_entropy(r, trials)),
        ),
    ];
    checks
        .into_iter()
        .map(|(name, mut f)| OpReport { name, max_rel_err: f(&mut rng), trials })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_at_tolerance() {
        for report in run_suite(7, 10) {
            assert!(
                report.passed(),
                "{}: max rel err {:.3e}",
                report.name,
                report.max_rel_err
            );
        }
    }
}
