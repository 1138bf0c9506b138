//! The multi-level densely connected classifier.
//!
//! Stem -> three dense blocks with channel/spatial-halving transitions
//! between them -> a decision module fed by skip connections from the end of
//! every block. Each dense layer is pre-activation (BN -> ReLU -> 3x3 conv,
//! no bias); each transition is BN -> ReLU -> 1x1 conv to half the channels
//! -> 2x2 average pool. The decision module reduces each tapped level to a
//! third of its channels with a 1x1 conv, pools globally, applies a per-level
//! FC + ReLU, concatenates the three vectors and maps them to two logits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ops::{self, BnCache, Mode};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub growth_rate: usize,
    pub layers_per_block: [usize; 3],
    pub stem_channels: usize,
    pub input_size: (usize, usize),
    pub level_fc_dim: usize,
    pub num_classes: usize,
}

impl NetConfig {
    /// Standard configuration for a given growth rate: stem width 2k,
    /// (6,6,6) layers, 224x224 input, 128-wide level vectors, 2 classes.
    pub fn with_growth_rate(k: usize) -> Self {
        NetConfig {
            growth_rate: k,
            layers_per_block: [6, 6, 6],
            stem_channels: 2 * k,
            input_size: (224, 224),
            level_fc_dim: 128,
            num_classes: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.growth_rate == 0
            || self.stem_channels == 0
            || self.level_fc_dim == 0
            || self.input_size.0 == 0
            || self.input_size.1 == 0
        {
            return Err(Error::InvalidConfig(
                "network extents must be positive".into(),
            ));
        }
        if self.num_classes != 2 {
            return Err(Error::InvalidConfig(format!(
                "num_classes must be 2, got {}",
                self.num_classes
            )));
        }
        // Two 2x2/2 poolings sit between the blocks.
        if self.input_size.0 % 4 != 0 || self.input_size.1 % 4 != 0 {
            return Err(Error::InvalidConfig(format!(
                "input_size {}x{} must be divisible by 4",
                self.input_size.0, self.input_size.1
            )));
        }
        for (i, &c) in self.block_output_channels().iter().enumerate() {
            if c / 3 == 0 {
                return Err(Error::InvalidConfig(format!(
                    "block {} output ({c} channels) too thin for a 1/3 reduction",
                    i + 1
                )));
            }
        }
        for &c in &self.transition_input_channels() {
            if c < 2 {
                return Err(Error::InvalidConfig(format!(
                    "transition input ({c} channels) cannot be halved"
                )));
            }
        }
        Ok(())
    }

    /// Channel bookkeeping: DB1 = S + L1*k; T halves; DB_{i+1} grows again.
    pub fn block_output_channels(&self) -> [usize; 3] {
        let k = self.growth_rate;
        let db1 = self.stem_channels + self.layers_per_block[0] * k;
        let db2 = db1 / 2 + self.layers_per_block[1] * k;
        let db3 = db2 / 2 + self.layers_per_block[2] * k;
        [db1, db2, db3]
    }

    fn transition_input_channels(&self) -> [usize; 2] {
        let outs = self.block_output_channels();
        [outs[0], outs[1]]
    }
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig::with_growth_rate(12)
    }
}

fn he_normal<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).unwrap();
    let mut t = Tensor::from_fn(shape, |_| T::from_f64(normal.sample(rng)));
    t.ensure_grad();
    t
}

pub(crate) struct ConvLayer<T: Scalar> {
    pub weight: Tensor<T>,
    stride: usize,
    padding: usize,
}

impl<T: Scalar> ConvLayer<T> {
    fn new(
        in_c: usize,
        out_c: usize,
        ksize: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = he_normal(&[out_c, in_c, ksize, ksize], in_c * ksize * ksize, rng);
        ConvLayer { weight, stride, padding }
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::conv2d_forward(x, &self.weight, self.stride, self.padding)
    }

    fn backward(&mut self, input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let grads =
            ops::conv2d_backward(input, &self.weight, grad_out, self.stride, self.padding)?;
        self.weight.accumulate_grad(&grads.grad_weight);
        Ok(grads.grad_input)
    }
}

pub(crate) struct BnLayer<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    eps: f64,
    momentum: f64,
}

impl<T: Scalar> BnLayer<T> {
    fn new(channels: usize) -> Self {
        let mut gamma = Tensor::full(&[channels], T::one());
        gamma.ensure_grad();
        let mut beta = Tensor::zeros(&[channels]);
        beta.ensure_grad();
        BnLayer {
            gamma,
            beta,
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            eps: 1e-5,
            momentum: 0.9,
        }
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, BnCache<T>)> {
        let fwd = ops::batchnorm2d_forward(
            x,
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            Mode::Train,
            self.eps,
            self.momentum,
        )?;
        self.running_mean = fwd.new_running_mean;
        self.running_var = fwd.new_running_var;
        Ok((fwd.output, fwd.cache))
    }

    fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(ops::batchnorm2d_forward(
            x,
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            Mode::Eval,
            self.eps,
            self.momentum,
        )?
        .output)
    }

    fn backward(&mut self, grad_out: &Tensor<T>, cache: &BnCache<T>) -> Result<Tensor<T>> {
        let grads = ops::batchnorm2d_backward(grad_out, cache, &self.gamma)?;
        self.gamma.accumulate_grad(&grads.grad_gamma);
        self.beta.accumulate_grad(&grads.grad_beta);
        Ok(grads.grad_input)
    }
}

pub(crate) struct LinearLayer<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> LinearLayer<T> {
    fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = he_normal(&[in_dim, out_dim], in_dim, rng);
        let mut bias = Tensor::zeros(&[out_dim]);
        bias.ensure_grad();
        LinearLayer { weight, bias }
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::fully_connected(x, &self.weight, &self.bias)
    }

    fn backward(&mut self, input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let grads = ops::fully_connected_backward(input, &self.weight, grad_out)?;
        self.weight.accumulate_grad(&grads.grad_weight);
        self.bias.accumulate_grad(&grads.grad_bias);
        Ok(grads.grad_input)
    }
}

struct DenseLayer<T: Scalar> {
    bn: BnLayer<T>,
    conv: ConvLayer<T>,
}

pub(crate) struct DenseLayerCache<T: Scalar> {
    bn_cache: BnCache<T>,
    bn_out: Tensor<T>,
}

impl<T: Scalar> DenseLayer<T> {
    fn new(in_c: usize, growth: usize, rng: &mut ChaCha8Rng) -> Self {
        DenseLayer {
            bn: BnLayer::new(in_c),
            conv: ConvLayer::new(in_c, growth, 3, 1, 1, rng),
        }
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, DenseLayerCache<T>)> {
        let (bn_out, bn_cache) = self.bn.forward_train(x)?;
        let y = self.conv.forward(&ops::relu(&bn_out))?;
        Ok((y, DenseLayerCache { bn_cache, bn_out }))
    }

    fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.conv.forward(&ops::relu(&self.bn.forward_eval(x)?))
    }

    fn backward(
        &mut self,
        grad_y: &Tensor<T>,
        cache: &DenseLayerCache<T>,
    ) -> Result<Tensor<T>> {
        let relu_out = ops::relu(&cache.bn_out);
        let grad_relu = self.conv.backward(&relu_out, grad_y)?;
        let grad_bn_out = ops::relu_backward(&cache.bn_out, &grad_relu);
        self.bn.backward(&grad_bn_out, &cache.bn_cache)
    }
}

pub struct DenseBlock<T: Scalar> {
    layers: Vec<DenseLayer<T>>,
    in_channels: usize,
    growth: usize,
}

pub struct DenseBlockCache<T: Scalar> {
    layer_caches: Vec<DenseLayerCache<T>>,
}

impl<T: Scalar> DenseBlock<T> {
    pub fn new(in_channels: usize, growth: usize, layers: usize, rng: &mut ChaCha8Rng) -> Self {
        let layers = (0..layers)
            .map(|i| DenseLayer::new(in_channels + i * growth, growth, rng))
            .collect();
        DenseBlock { layers, in_channels, growth }
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels + self.layers.len() * self.growth
    }

    /// Channel count each layer consumes: in_channels + i*growth.
    pub fn layer_input_channels(&self) -> Vec<usize> {
        (0..self.layers.len())
            .map(|i| self.in_channels + i * self.growth)
            .collect()
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, DenseBlockCache<T>)> {
        let mut acc = x.clone();
        let mut layer_caches = Vec::with_capacity(self.layers.len());
        for layer in &mut self.layers {
            let (y, cache) = layer.forward_train(&acc)?;
            layer_caches.push(cache);
            acc = ops::concat_channels(&[&acc, &y])?;
        }
        Ok((acc, DenseBlockCache { layer_caches }))
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut acc = x.clone();
        for layer in &self.layers {
            let y = layer.forward_eval(&acc)?;
            acc = ops::concat_channels(&[&acc, &y])?;
        }
        Ok(acc)
    }

    pub fn backward(
        &mut self,
        grad_out: &Tensor<T>,
        cache: &DenseBlockCache<T>,
    ) -> Result<Tensor<T>> {
        let mut buf = grad_out.clone();
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            let c_in = self.in_channels + i * self.growth;
            let mut parts = ops::concat_channels_backward(&buf, &[c_in, self.growth])?;
            let grad_y = parts.pop().unwrap();
            let mut prefix = parts.pop().unwrap();
            let grad_x = layer.backward(&grad_y, &cache.layer_caches[i])?;
            prefix.add_in_place(&grad_x);
            buf = prefix;
        }
        Ok(buf)
    }
}

pub struct Transition<T: Scalar> {
    bn: BnLayer<T>,
    conv: ConvLayer<T>,
}

pub struct TransitionCache<T: Scalar> {
    bn_cache: BnCache<T>,
    bn_out: Tensor<T>,
    conv_out_shape: Vec<usize>,
}

impl<T: Scalar> Transition<T> {
    pub fn new(in_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        Transition {
            bn: BnLayer::new(in_channels),
            conv: ConvLayer::new(in_channels, in_channels / 2, 1, 1, 0, rng),
        }
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, TransitionCache<T>)> {
        let (bn_out, bn_cache) = self.bn.forward_train(x)?;
        let conv_out = self.conv.forward(&ops::relu(&bn_out))?;
        let pooled = ops::avgpool2d(&conv_out, 2, 2)?;
        let conv_out_shape = conv_out.shape().to_vec();
        Ok((pooled, TransitionCache { bn_cache, bn_out, conv_out_shape }))
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let conv_out = self.conv.forward(&ops::relu(&self.bn.forward_eval(x)?))?;
        ops::avgpool2d(&conv_out, 2, 2)
    }

    pub fn backward(
        &mut self,
        grad_out: &Tensor<T>,
        cache: &TransitionCache<T>,
    ) -> Result<Tensor<T>> {
        let grad_conv = ops::avgpool2d_backward(&cache.conv_out_shape, grad_out, 2, 2)?;
        let relu_out = ops::relu(&cache.bn_out);
        let grad_relu = self.conv.backward(&relu_out, &grad_conv)?;
        let grad_bn_out = ops::relu_backward(&cache.bn_out, &grad_relu);
        self.bn.backward(&grad_bn_out, &cache.bn_cache)
    }
}

struct LevelHead<T: Scalar> {
    reduce: ConvLayer<T>,
    fc: LinearLayer<T>,
}

struct LevelCache<T: Scalar> {
    input: Tensor<T>,
    reduced_shape: Vec<usize>,
    pooled: Tensor<T>,
    fc_out: Tensor<T>,
}

impl<T: Scalar> LevelHead<T> {
    fn new(in_channels: usize, fc_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        LevelHead {
            reduce: ConvLayer::new(in_channels, in_channels / 3, 1, 1, 0, rng),
            fc: LinearLayer::new(in_channels / 3, fc_dim, rng),
        }
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, LevelCache<T>)> {
        let reduced = self.reduce.forward(x)?;
        let pooled = ops::global_avgpool(&reduced)?;
        let fc_out = self.fc.forward(&pooled)?;
        let out = ops::relu(&fc_out);
        Ok((
            out,
            LevelCache {
                input: x.clone(),
                reduced_shape: reduced.shape().to_vec(),
                pooled,
                fc_out,
            },
        ))
    }

    /// Eval forward; also reports the reduced feature-map shape for shape
    /// inspection.
    fn forward_eval(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
        let reduced = self.reduce.forward(x)?;
        let pooled = ops::global_avgpool(&reduced)?;
        let shape = reduced.shape().to_vec();
        Ok((ops::relu(&self.fc.forward(&pooled)?), shape))
    }

    fn backward(&mut self, grad: &Tensor<T>, cache: &LevelCache<T>) -> Result<Tensor<T>> {
        let grad_fc_out = ops::relu_backward(&cache.fc_out, grad);
        let grad_pooled = self.fc.backward(&cache.pooled, &grad_fc_out)?;
        let grad_reduced = ops::global_avgpool_backward(&cache.reduced_shape, &grad_pooled)?;
        self.reduce.backward(&cache.input, &grad_reduced)
    }
}

/// Concatenate `(N,Di)` matrices along columns.
fn concat_cols<T: Scalar>(inputs: &[&Tensor<T>]) -> Tensor<T> {
    let n = inputs[0].dim(0);
    let d_total: usize = inputs.iter().map(|t| t.dim(1)).sum();
    let mut out = Tensor::zeros(&[n, d_total]);
    for ni in 0..n {
        let mut off = 0;
        for t in inputs {
            let d = t.dim(1);
            out.data_mut()[ni * d_total + off..ni * d_total + off + d]
                .copy_from_slice(&t.data()[ni * d..(ni + 1) * d]);
            off += d;
        }
    }
    out
}

fn split_cols<T: Scalar>(t: &Tensor<T>, widths: &[usize]) -> Vec<Tensor<T>> {
    let n = t.dim(0);
    let d_total = t.dim(1);
    let mut parts = Vec::with_capacity(widths.len());
    let mut off = 0;
    for &d in widths {
        let mut p = Tensor::zeros(&[n, d]);
        for ni in 0..n {
            p.data_mut()[ni * d..(ni + 1) * d]
                .copy_from_slice(&t.data()[ni * d_total + off..ni * d_total + off + d]);
        }
        off += d;
        parts.push(p);
    }
    parts
}

struct DecisionModule<T: Scalar> {
    levels: Vec<LevelHead<T>>,
    final_fc: LinearLayer<T>,
}

struct DecisionCache<T: Scalar> {
    level_caches: Vec<LevelCache<T>>,
    concat_input: Tensor<T>,
}

impl<T: Scalar> DecisionModule<T> {
    fn new(level_channels: &[usize; 3], fc_dim: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let levels = level_channels
            .iter()
            .map(|&c| LevelHead::new(c, fc_dim, rng))
            .collect();
        DecisionModule { levels, final_fc: LinearLayer::new(3 * fc_dim, classes, rng) }
    }

    fn forward_train(
        &mut self,
        xs: [&Tensor<T>; 3],
    ) -> Result<(Tensor<T>, DecisionCache<T>)> {
        let mut vecs = Vec::with_capacity(3);
        let mut level_caches = Vec::with_capacity(3);
        for (head, x) in self.levels.iter_mut().zip(xs.iter()) {
            let (v, cache) = head.forward_train(x)?;
            vecs.push(v);
            level_caches.push(cache);
        }
        let concat_input = concat_cols(&[&vecs[0], &vecs[1], &vecs[2]]);
        let logits = self.final_fc.forward(&concat_input)?;
        Ok((logits, DecisionCache { level_caches, concat_input }))
    }

    fn forward_eval(&self, xs: [&Tensor<T>; 3]) -> Result<(Tensor<T>, [Vec<usize>; 3])> {
        let mut vecs = Vec::with_capacity(3);
        let mut reduced_shapes = Vec::with_capacity(3);
        for (head, x) in self.levels.iter().zip(xs.iter()) {
            let (v, shape) = head.forward_eval(x)?;
            vecs.push(v);
            reduced_shapes.push(shape);
        }
        let logits = self.final_fc.forward(&concat_cols(&[&vecs[0], &vecs[1], &vecs[2]]))?;
        let shapes: [Vec<usize>; 3] = [
            reduced_shapes[0].clone(),
            reduced_shapes[1].clone(),
            reduced_shapes[2].clone(),
        ];
        Ok((logits, shapes))
    }

    fn backward(
        &mut self,
        grad_logits: &Tensor<T>,
        cache: &DecisionCache<T>,
    ) -> Result<Vec<Tensor<T>>> {
        let grad_concat = self.final_fc.backward(&cache.concat_input, grad_logits)?;
        let fc_dim = cache.concat_input.dim(1) / 3;
        let grads = split_cols(&grad_concat, &[fc_dim, fc_dim, fc_dim]);
        let mut level_grads = Vec::with_capacity(3);
        for ((head, g), lc) in self
            .levels
            .iter_mut()
            .zip(grads.iter())
            .zip(cache.level_caches.iter())
        {
            level_grads.push(head.backward(g, lc)?);
        }
        Ok(level_grads)
    }
}

pub struct AestheticNet<T: Scalar> {
    cfg: NetConfig,
    stem_conv: ConvLayer<T>,
    stem_bn: BnLayer<T>,
    blocks: Vec<DenseBlock<T>>,
    transitions: Vec<Transition<T>>,
    decision: DecisionModule<T>,
}

pub struct NetCache<T: Scalar> {
    input: Tensor<T>,
    stem_bn_out: Tensor<T>,
    stem_bn_cache: BnCache<T>,
    block_caches: Vec<DenseBlockCache<T>>,
    transition_caches: Vec<TransitionCache<T>>,
    decision_cache: DecisionCache<T>,
}

/// Stage output shapes observed during one eval forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub stem_out: Vec<usize>,
    pub block_outs: [Vec<usize>; 3],
    pub transition_outs: [Vec<usize>; 2],
    pub level_reduced: [Vec<usize>; 3],
    pub logits: Vec<usize>,
}

impl<T: Scalar> AestheticNet<T> {
    /// Deterministic seeded construction; He-normal conv/FC weights, unit
    /// gammas, zero biases and betas.
    pub fn build(cfg: NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = cfg.growth_rate;

        let stem_conv = ConvLayer::new(3, cfg.stem_channels, 3, 1, 1, &mut rng);
        let stem_bn = BnLayer::new(cfg.stem_channels);

        let mut blocks = Vec::with_capacity(3);
        let mut transitions = Vec::with_capacity(2);
        let mut c = cfg.stem_channels;
        for (bi, &layers) in cfg.layers_per_block.iter().enumerate() {
            let block = DenseBlock::new(c, k, layers, &mut rng);
            c = block.out_channels();
            blocks.push(block);
            if bi < 2 {
                transitions.push(Transition::new(c, &mut rng));
                c /= 2;
            }
        }

        let outs = cfg.block_output_channels();
        let decision = DecisionModule::new(&outs, cfg.level_fc_dim, cfg.num_classes, &mut rng);

        Ok(AestheticNet { cfg, stem_conv, stem_bn, blocks, transitions, decision })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (h, w) = self.cfg.input_size;
        if x.rank() != 4 || x.dim(1) != 3 || x.dim(2) != h || x.dim(3) != w {
            return Err(Error::ShapeMismatch(format!(
                "network input shape {:?}, expected [N, 3, {h}, {w}]",
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, NetCache<T>)> {
        self.check_input(x)?;
        let conv_out = self.stem_conv.forward(x)?;
        let (stem_bn_out, stem_bn_cache) = self.stem_bn.forward_train(&conv_out)?;
        let stem_act = ops::relu(&stem_bn_out);

        let mut block_caches = Vec::with_capacity(3);
        let mut transition_caches = Vec::with_capacity(2);
        let mut level_outs: Vec<Tensor<T>> = Vec::with_capacity(3);
        let mut cur = stem_act;
        for bi in 0..3 {
            let (out, cache) = self.blocks[bi].forward_train(&cur)?;
            block_caches.push(cache);
            if bi < 2 {
                let (t_out, t_cache) = self.transitions[bi].forward_train(&out)?;
                transition_caches.push(t_cache);
                cur = t_out;
            }
            level_outs.push(out);
        }

        let (logits, decision_cache) = self
            .decision
            .forward_train([&level_outs[0], &level_outs[1], &level_outs[2]])?;
        Ok((
            logits,
            NetCache {
                input: x.clone(),
                stem_bn_out,
                stem_bn_cache,
                block_caches,
                transition_caches,
                decision_cache,
            },
        ))
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_trace(x)?.0)
    }

    pub fn forward_trace(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ForwardTrace)> {
        self.check_input(x)?;
        let stem_act = ops::relu(&self.stem_bn.forward_eval(&self.stem_conv.forward(x)?)?);
        let stem_out = stem_act.shape().to_vec();

        let mut level_outs: Vec<Tensor<T>> = Vec::with_capacity(3);
        let mut transition_outs: Vec<Vec<usize>> = Vec::with_capacity(2);
        let mut cur = stem_act;
        for bi in 0..3 {
            let out = self.blocks[bi].forward_eval(&cur)?;
            if bi < 2 {
                let t_out = self.transitions[bi].forward_eval(&out)?;
                transition_outs.push(t_out.shape().to_vec());
                cur = t_out;
            }
            level_outs.push(out);
        }

        let (logits, level_reduced) = self
            .decision
            .forward_eval([&level_outs[0], &level_outs[1], &level_outs[2]])?;
        let trace = ForwardTrace {
            stem_out,
            block_outs: [
                level_outs[0].shape().to_vec(),
                level_outs[1].shape().to_vec(),
                level_outs[2].shape().to_vec(),
            ],
            transition_outs: [transition_outs[0].clone(), transition_outs[1].clone()],
            level_reduced,
            logits: logits.shape().to_vec(),
        };
        Ok((logits, trace))
    }

    /// Accumulates parameter gradients for one batch; parameters themselves
    /// are untouched.
    pub fn backward(&mut self, grad_logits: &Tensor<T>, cache: &NetCache<T>) -> Result<()> {
        let level_grads = self.decision.backward(grad_logits, &cache.decision_cache)?;

        let mut grad = self.blocks[2].backward(&level_grads[2], &cache.block_caches[2])?;
        grad = self.transitions[1].backward(&grad, &cache.transition_caches[1])?;
        grad.add_in_place(&level_grads[1]);
        grad = self.blocks[1].backward(&grad, &cache.block_caches[1])?;
        grad = self.transitions[0].backward(&grad, &cache.transition_caches[0])?;
        grad.add_in_place(&level_grads[0]);
        grad = self.blocks[0].backward(&grad, &cache.block_caches[0])?;

        let grad_bn_out = ops::relu_backward(&cache.stem_bn_out, &grad);
        let grad_conv = self.stem_bn.backward(&grad_bn_out, &cache.stem_bn_cache)?;
        self.stem_conv.backward(&cache.input, &grad_conv)?;
        Ok(())
    }

    /// Visits every learnable parameter in a fixed, stable order.
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("stem/conv/weight", &mut self.stem_conv.weight);
        f("stem/bn/gamma", &mut self.stem_bn.gamma);
        f("stem/bn/beta", &mut self.stem_bn.beta);
        for (bi, block) in self.blocks.iter_mut().enumerate() {
            for (li, layer) in block.layers.iter_mut().enumerate() {
                let p = format!("db{}/layer{}", bi + 1, li);
                f(&format!("{p}/bn/gamma"), &mut layer.bn.gamma);
                f(&format!("{p}/bn/beta"), &mut layer.bn.beta);
                f(&format!("{p}/conv/weight"), &mut layer.conv.weight);
            }
        }
        for (ti, t) in self.transitions.iter_mut().enumerate() {
            let p = format!("t{}", ti + 1);
            f(&format!("{p}/bn/gamma"), &mut t.bn.gamma);
            f(&format!("{p}/bn/beta"), &mut t.bn.beta);
            f(&format!("{p}/conv/weight"), &mut t.conv.weight);
        }
        for (li, head) in self.decision.levels.iter_mut().enumerate() {
            let p = format!("decision/level{}", li + 1);
            f(&format!("{p}/reduce/weight"), &mut head.reduce.weight);
            f(&format!("{p}/fc/weight"), &mut head.fc.weight);
            f(&format!("{p}/fc/bias"), &mut head.fc.bias);
        }
        f("decision/final/weight", &mut self.decision.final_fc.weight);
        f("decision/final/bias", &mut self.decision.final_fc.bias);
    }

    /// Visits non-learnable state (batch-norm running statistics).
    pub fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("stem/bn/running_mean", &mut self.stem_bn.running_mean);
        f("stem/bn/running_var", &mut self.stem_bn.running_var);
        for (bi, block) in self.blocks.iter_mut().enumerate() {
            for (li, layer) in block.layers.iter_mut().enumerate() {
                let p = format!("db{}/layer{}", bi + 1, li);
                f(&format!("{p}/bn/running_mean"), &mut layer.bn.running_mean);
                f(&format!("{p}/bn/running_var"), &mut layer.bn.running_var);
            }
        }
        for (ti, t) in self.transitions.iter_mut().enumerate() {
            let p = format!("t{}", ti + 1);
            f(&format!("{p}/bn/running_mean"), &mut t.bn.running_mean);
            f(&format!("{p}/bn/running_var"), &mut t.bn.running_var);
        }
    }

    pub fn named_param_shapes(&mut self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit_params_mut(&mut |name, t| out.push((name.to_string(), t.shape().to_vec())));
        out
    }

    /// Sum of extents of all learnable tensors (running statistics excluded).
    pub fn count_parameters(&mut self) -> usize {
        let mut total = 0;
        self.visit_params_mut(&mut |_, t| total += t.numel());
        total
    }

    pub fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |_, t| t.zero_grad());
    }
}
