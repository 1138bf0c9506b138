//! SGD-with-momentum training loop over coherent (or seeded-random) batch
//! plans, with a step-decay learning-rate schedule.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use crate::coherence::{plan_epoch, plan_epoch_random, BatchPlan, EmbeddingIndex};
use crate::dataset::{ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::imageio::load_input_tensor;
use crate::net::AestheticNet;
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One momentum-SGD update: `v <- mu*v - lr*g; w <- w + v`.
///
/// `weight_decay`, when nonzero, adds `wd*w` to the raw gradient first.
pub fn sgd_momentum_step<T: Scalar>(
    param: &mut Tensor<T>,
    velocity: &mut Tensor<T>,
    momentum: f64,
    lr: f64,
    weight_decay: f64,
) {
    debug_assert!(param.same_shape(velocity));
    let mu = T::from_f64(momentum);
    let lr_t = T::from_f64(lr);
    let wd = T::from_f64(weight_decay);
    let grads = param.grad().to_vec();
    for ((w, v), g) in param
        .data_mut()
        .iter_mut()
        .zip(velocity.data_mut().iter_mut())
        .zip(grads.iter())
    {
        let g_eff = if weight_decay != 0.0 { *g + wd * *w } else { *g };
        *v = mu * *v - lr_t * g_eff;
        *w = *w + *v;
    }
}

/// Step decay: `base_lr * gamma^(epoch / step_epochs)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub gamma: f64,
    pub step_epochs: usize,
}

impl LrSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.base_lr * self.gamma.powi((epoch / self.step_epochs) as i32)
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub base_lr: f64,
    pub lr_gamma: f64,
    pub lr_step_epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub coherent: bool,
    /// Write a checkpoint every N epochs (0 = only at the end).
    pub checkpoint_every: usize,
    /// Keep decoded inputs in memory keyed by image id.
    pub cache_images: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 90,
            batch_size: 32,
            momentum: 0.9,
            base_lr: 0.01,
            lr_gamma: 0.1,
            lr_step_epochs: 30,
            weight_decay: 0.0,
            seed: 0,
            coherent: true,
            checkpoint_every: 0,
            cache_images: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::InvalidBatchSize(format!(
                "batch size must be even and >= 2, got {}",
                self.batch_size
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must lie in [0,1), got {}",
                self.momentum
            )));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::InvalidConfig("base_lr must be positive".into()));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return Err(Error::InvalidConfig("lr_gamma must lie in (0,1]".into()));
        }
        if self.lr_step_epochs == 0 {
            return Err(Error::InvalidConfig("lr_step_epochs must be >= 1".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("weight_decay must be >= 0".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.base_lr,
            gamma: self.lr_gamma,
            step_epochs: self.lr_step_epochs,
        }
    }
}

/// Per-parameter velocity buffers plus the optimizer hyperparameters.
pub struct OptimizerState<T: Scalar> {
    pub momentum: f64,
    pub base_lr: f64,
    velocities: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(net: &mut AestheticNet<T>, momentum: f64, base_lr: f64) -> Self {
        let mut velocities = Vec::new();
        net.visit_params_mut(&mut |name, t| {
            velocities.push((name.to_string(), Tensor::zeros(t.shape())));
        });
        OptimizerState { momentum, base_lr, velocities }
    }

    pub fn from_parts(
        momentum: f64,
        base_lr: f64,
        velocities: Vec<(String, Tensor<T>)>,
    ) -> Self {
        OptimizerState { momentum, base_lr, velocities }
    }

    pub fn velocities(&self) -> &[(String, Tensor<T>)] {
        &self.velocities
    }

    /// Applies one update to every parameter from its accumulated gradient.
    pub fn step(&mut self, net: &mut AestheticNet<T>, lr: f64, weight_decay: f64) {
        let momentum = self.momentum;
        let mut it = self.velocities.iter_mut();
        net.visit_params_mut(&mut |name, param| {
            let (vname, velocity) = it.next().expect("velocity per parameter");
            debug_assert_eq!(vname, name);
            sgd_momentum_step(param, velocity, momentum, lr, weight_decay);
        });
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

impl EpochMetrics {
    pub fn format_line(&self) -> String {
        format!(
            "epoch={} loss={:.6} acc={:.4} lr={:.6}",
            self.epoch, self.loss, self.accuracy, self.lr
        )
    }
}

pub struct Trainer<T: Scalar> {
    net: AestheticNet<T>,
    opt: OptimizerState<T>,
    cfg: TrainConfig,
    schedule: LrSchedule,
    train_entries: Vec<ManifestEntry>,
    train_ids: HashSet<String>,
    images_dir: PathBuf,
    embeddings: Option<EmbeddingIndex>,
    cache: HashMap<String, Tensor<T>>,
    paths: HashMap<String, String>,
    labels: HashMap<String, usize>,
}

impl<T: Scalar> Trainer<T> {
    /// `entries` may be a whole manifest; only its train split is used.
    pub fn new(
        net: AestheticNet<T>,
        cfg: TrainConfig,
        entries: &[ManifestEntry],
        images_dir: &Path,
        embeddings: Option<EmbeddingIndex>,
    ) -> Result<Self> {
        cfg.validate()?;
        let train_entries: Vec<ManifestEntry> = entries
            .iter()
            .filter(|e| e.split == Split::Train)
            .cloned()
            .collect();
        if train_entries.is_empty() {
            return Err(Error::EmptyInput("manifest has no train entries".into()));
        }
        if cfg.coherent && embeddings.is_none() {
            return Err(Error::InvalidConfig(
                "coherent training requires an embedding index".into(),
            ));
        }
        let mut net = net;
        let opt = OptimizerState::new(&mut net, cfg.momentum, cfg.base_lr);
        let schedule = cfg.schedule();
        let train_ids = train_entries.iter().map(|e| e.image_id.clone()).collect();
        let paths = train_entries
            .iter()
            .map(|e| (e.image_id.clone(), e.path.clone()))
            .collect();
        let labels = train_entries
            .iter()
            .map(|e| (e.image_id.clone(), e.label.class_index()))
            .collect();
        Ok(Trainer {
            net,
            opt,
            cfg,
            schedule,
            train_entries,
            train_ids,
            images_dir: images_dir.to_path_buf(),
            embeddings,
            cache: HashMap::new(),
            paths,
            labels,
        })
    }

    pub fn net(&self) -> &AestheticNet<T> {
        &self.net
    }

    pub fn parts_mut(&mut self) -> (&mut AestheticNet<T>, &mut OptimizerState<T>) {
        (&mut self.net, &mut self.opt)
    }

    pub fn into_parts(self) -> (AestheticNet<T>, OptimizerState<T>) {
        (self.net, self.opt)
    }

    /// Coherent mode re-plans each epoch from `seed + epoch`; the ablation
    /// baseline shuffles with the same offset seed.
    pub fn plan_for_epoch(&self, epoch: usize) -> Result<BatchPlan> {
        let seed = self.cfg.seed.wrapping_add(epoch as u64);
        if self.cfg.coherent {
            plan_epoch(
                self.embeddings.as_ref().expect("validated in new"),
                &self.train_entries,
                self.cfg.batch_size,
                seed,
            )
        } else {
            plan_epoch_random(&self.train_entries, self.cfg.batch_size, seed)
        }
    }

    fn input_for(&mut self, id: &str) -> Result<Tensor<T>> {
        if let Some(t) = self.cache.get(id) {
            return Ok(t.clone());
        }
        let rel = self.paths.get(id).ok_or_else(|| Error::UnknownId(id.to_string()))?;
        let path = crate::dataset::resolve_image_path(&self.images_dir, rel);
        let tensor = load_input_tensor::<T>(&path, self.net.config().input_size).map_err(
            |e| match e {
                Error::IoFailure { .. } => Error::MissingImage {
                    id: id.to_string(),
                    path: path.display().to_string(),
                },
                other => other,
            },
        )?;
        if self.cfg.cache_images {
            self.cache.insert(id.to_string(), tensor.clone());
        }
        Ok(tensor)
    }

    fn batch_inputs(&mut self, ids: &[String]) -> Result<(Tensor<T>, Vec<usize>)> {
        let (h, w) = self.net.config().input_size;
        let sample = 3 * h * w;
        let mut batch = Tensor::zeros(&[ids.len(), 3, h, w]);
        let mut labels = Vec::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            let t = self.input_for(id)?;
            batch.data_mut()[i * sample..(i + 1) * sample].copy_from_slice(t.data());
            labels.push(self.labels[id]);
        }
        Ok((batch, labels))
    }

    pub fn run_epoch(&mut self, epoch: usize) -> Result<EpochMetrics> {
        let plan = self.plan_for_epoch(epoch)?;
        self.run_epoch_with_plan(epoch, &plan)
    }

    /// Runs one epoch over an externally supplied plan. The plan must only
    /// reference train images; this is checked before any optimizer step.
    pub fn run_epoch_with_plan(&mut self, epoch: usize, plan: &BatchPlan) -> Result<EpochMetrics> {
        for id in plan.all_ids() {
            if !self.train_ids.contains(id) {
                return Err(Error::PlanMismatch(format!(
                    "plan references `{id}` which is not in the manifest train split"
                )));
            }
        }
        let lr = self.schedule.lr_at(epoch);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        let mut total = 0usize;
        for (bi, ids) in plan.batches.iter().enumerate() {
            let (batch, labels) = self.batch_inputs(ids)?;
            self.net.zero_grads();
            let (logits, cache) = self.net.forward_train(&batch)?;
            let (loss, sce) = ops::softmax_cross_entropy(&logits, &labels)?;
            let loss = loss.as_f64();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss(format!(
                    "epoch {epoch} batch {bi}: loss = {loss}"
                )));
            }
            let grad = ops::softmax_cross_entropy_backward(&sce);
            self.net.backward(&grad, &cache)?;
            self.opt.step(&mut self.net, lr, self.cfg.weight_decay);

            loss_sum += loss * ids.len() as f64;
            total += ids.len();
            for (ni, &label) in labels.iter().enumerate() {
                let l0 = logits.data()[ni * 2];
                let l1 = logits.data()[ni * 2 + 1];
                let pred = if l1 > l0 { 1 } else { 0 };
                if pred == label {
                    correct += 1;
                }
            }
        }
        Ok(EpochMetrics {
            epoch,
            loss: loss_sum / total as f64,
            accuracy: correct as f64 / total as f64,
            lr,
        })
    }

    /// Full training run; returns per-epoch metrics in order.
    pub fn train(&mut self) -> Result<Vec<EpochMetrics>> {
        let mut metrics = Vec::with_capacity(self.cfg.epochs);
        for epoch in 0..self.cfg.epochs {
            metrics.push(self.run_epoch(epoch)?);
        }
        Ok(metrics)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coherence::{fallback_embed, Embedding};
    use crate::colorspace::srgb_to_lab;
    use crate::dataset::Label;
    use crate::net::NetConfig;

    #[test]
    fn sgd_single_step_algebra() {
        let mut w = Tensor::<f64>::new(&[1], vec![1.0]).unwrap();
        w.ensure_grad();
        w.grad_mut()[0] = 0.5;
        let mut v = Tensor::<f64>::zeros(&[1]);
        sgd_momentum_step(&mut w, &mut v, 0.9, 0.1, 0.0);
        assert!((v.data()[0] + 0.05).abs() < 1e-12);
        assert!((w.data()[0] - 0.95).abs() < 1e-12);

        w.grad_mut()[0] = 0.5;
        sgd_momentum_step(&mut w, &mut v, 0.9, 0.1, 0.0);
        assert!((v.data()[0] + 0.095).abs() < 1e-12);
        assert!((w.data()[0] - 0.855).abs() < 1e-12);
    }

    #[test]
    fn zero_momentum_reduces_to_plain_sgd() {
        let mut w = Tensor::<f64>::new(&[2], vec![1.0, -2.0]).unwrap();
        w.ensure_grad();
        w.grad_mut().copy_from_slice(&[0.25, -1.0]);
        let mut v = Tensor::<f64>::zeros(&[2]);
        sgd_momentum_step(&mut w, &mut v, 0.0, 0.5, 0.0);
        assert_eq!(w.data(), &[1.0 - 0.5 * 0.25, -2.0 + 0.5]);
    }

    #[test]
    fn zero_gradient_step_scales_velocity_only() {
        let mut w = Tensor::<f64>::new(&[1], vec![3.0]).unwrap();
        w.ensure_grad();
        let mut v = Tensor::<f64>::new(&[1], vec![0.4]).unwrap();
        sgd_momentum_step(&mut w, &mut v, 0.5, 0.1, 0.0);
        assert!((v.data()[0] - 0.2).abs() < 1e-12);
        assert!((w.data()[0] - 3.2).abs() < 1e-12);
    }

    #[test]
    fn lr_schedule_examples() {
        let s = LrSchedule { base_lr: 0.01, gamma: 0.1, step_epochs: 10 };
        assert_eq!(s.lr_at(0), 0.01);
        assert!((s.lr_at(12) - 0.001).abs() < 1e-12);
        assert!((s.lr_at(25) - 0.0001).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for e in 0..100 {
            let lr = s.lr_at(e);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    fn tiny_cfg() -> NetConfig {
        NetConfig {
            growth_rate: 2,
            layers_per_block: [1, 1, 1],
            stem_channels: 4,
            input_size: (8, 8),
            level_fc_dim: 4,
            num_classes: 2,
        }
    }

    /// Writes `n` small two-class PNGs and returns manifest + embeddings.
    fn toy_data(dir: &Path, n: usize) -> (Vec<ManifestEntry>, EmbeddingIndex) {
        let mut entries = Vec::new();
        let mut index = EmbeddingIndex::new(64);
        for i in 0..n {
            let label = if i % 2 == 0 { Label::Attractive } else { Label::Unattractive };
            let base = if label == Label::Attractive { 200u8 } else { 60u8 };
            let img = image::RgbImage::from_fn(8, 8, |x, y| {
                let jitter = ((x * 13 + y * 7 + i as u32 * 3) % 31) as u8;
                image::Rgb([base.saturating_add(jitter), base, 255 - base])
            });
            let id = format!("toy{i:03}");
            let path = dir.join(format!("{id}.png"));
            img.save(&path).unwrap();

            let rgb = crate::imageio::load_rgb(&path).unwrap();
            index.insert(fallback_embed(&id, &srgb_to_lab(&rgb))).unwrap();
            entries.push(ManifestEntry {
                image_id: id.clone(),
                path: format!("{id}.png"),
                mean_score: 5.0,
                label,
                split: Split::Train,
            });
        }
        (entries, index)
    }

    #[test]
    fn fixed_seed_runs_are_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (entries, index) = toy_data(dir.path(), 8);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            seed: 5,
            ..TrainConfig::default()
        };
        let run = || {
            let net = AestheticNet::<f32>::build(tiny_cfg(), 7).unwrap();
            let mut tr =
                Trainer::new(net, cfg.clone(), &entries, dir.path(), Some(index.clone()))
                    .unwrap();
            tr.run_epoch(0).unwrap()
        };
        let m1 = run();
        let m2 = run();
        assert_eq!(m1, m2);
        assert_eq!(m1.format_line(), m2.format_line());
    }

    #[test]
    fn foreign_plan_id_is_plan_mismatch_before_stepping() {
        let dir = tempfile::tempdir().unwrap();
        let (entries, index) = toy_data(dir.path(), 4);
        let net = AestheticNet::<f32>::build(tiny_cfg(), 1).unwrap();
        let cfg = TrainConfig { epochs: 1, batch_size: 2, ..TrainConfig::default() };
        let mut tr = Trainer::new(net, cfg, &entries, dir.path(), Some(index)).unwrap();
        let plan = BatchPlan {
            batch_size: 2,
            seed: 0,
            batches: vec![vec!["toy000".into(), "ghost".into()]],
            warnings: Vec::new(),
        };
        assert!(matches!(
            tr.run_epoch_with_plan(0, &plan),
            Err(Error::PlanMismatch(_))
        ));
    }

    #[test]
    fn missing_image_file_is_reported_with_id() {
        let dir = tempfile::tempdir().unwrap();
        let (mut entries, index) = toy_data(dir.path(), 4);
        entries[0].path = "vanished.png".into();
        let net = AestheticNet::<f32>::build(tiny_cfg(), 1).unwrap();
        let cfg = TrainConfig { epochs: 1, batch_size: 2, ..TrainConfig::default() };
        let mut tr = Trainer::new(net, cfg, &entries, dir.path(), Some(index)).unwrap();
        let err = tr.run_epoch(0);
        assert!(matches!(err, Err(Error::MissingImage { .. })));
    }

    #[test]
    fn absurd_learning_rate_aborts_with_non_finite_loss() {
        let dir = tempfile::tempdir().unwrap();
        let (entries, index) = toy_data(dir.path(), 8);
        let net = AestheticNet::<f32>::build(tiny_cfg(), 2).unwrap();
        let cfg = TrainConfig {
            epochs: 10,
            batch_size: 4,
            base_lr: 1e25,
            ..TrainConfig::default()
        };
        let mut tr = Trainer::new(net, cfg, &entries, dir.path(), Some(index)).unwrap();
        let mut saw_abort = false;
        for epoch in 0..10 {
            match tr.run_epoch(epoch) {
                Ok(_) => continue,
                Err(Error::NonFiniteLoss(_)) => {
                    saw_abort = true;
                    break;
                }
                Err(e) => panic!("unexpected error {e}"),
            }
        }
        assert!(saw_abort, "training never aborted");
    }

    #[test]
    fn coherent_mode_requires_embeddings() {
        let dir = tempfile::tempdir().unwrap();
        let (entries, _) = toy_data(dir.path(), 4);
        let net = AestheticNet::<f32>::build(tiny_cfg(), 1).unwrap();
        let cfg = TrainConfig { coherent: true, ..TrainConfig::default() };
        assert!(matches!(
            Trainer::new(net, cfg, &entries, dir.path(), None),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn invalid_train_config_is_rejected() {
        assert!(TrainConfig { batch_size: 3, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { momentum: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr_gamma: 0.0, ..TrainConfig::default() }.validate().is_err());
    }
}
