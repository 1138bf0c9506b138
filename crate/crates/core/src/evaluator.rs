//! Eval-mode inference over a manifest split: accuracy, confusion counts,
//! per-image probabilities, and single-image prediction.

use std::path::Path;

use crate::dataset::{resolve_image_path, Label, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::imageio::load_input_tensor;
use crate::net::AestheticNet;
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Evaluation summary; confusion rows are true labels, columns predictions,
/// both indexed unattractive = 0, attractive = 1.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub split: Split,
    pub n: usize,
    pub accuracy: f64,
    pub confusion: [[usize; 2]; 2],
    pub per_image: Vec<(String, f64)>,
}

impl EvalReport {
    pub fn true_positives(&self) -> usize {
        self.confusion[1][1]
    }
    pub fn true_negatives(&self) -> usize {
        self.confusion[0][0]
    }
    pub fn false_positives(&self) -> usize {
        self.confusion[0][1]
    }
    pub fn false_negatives(&self) -> usize {
        self.confusion[1][0]
    }
}

/// Exact float ties predict unattractive (class 0).
fn predict_from_logits(l0: f64, l1: f64) -> usize {
    usize::from(l1 > l0)
}

const EVAL_CHUNK: usize = 16;

/// Eval-mode forward over every entry of `split`; deterministic and
/// order-invariant (each image is scored independently against running
/// statistics).
pub fn evaluate<T: Scalar>(
    net: &AestheticNet<T>,
    entries: &[ManifestEntry],
    split: Split,
    images_dir: &Path,
) -> Result<EvalReport> {
    let selected: Vec<&ManifestEntry> = entries.iter().filter(|e| e.split == split).collect();
    if selected.is_empty() {
        return Err(Error::EmptySplit(format!("no entries with split={}", split.as_str())));
    }

    let (h, w) = net.config().input_size;
    let sample = 3 * h * w;
    let mut confusion = [[0usize; 2]; 2];
    let mut per_image = Vec::with_capacity(selected.len());

    for chunk in selected.chunks(EVAL_CHUNK) {
        let mut batch = Tensor::zeros(&[chunk.len(), 3, h, w]);
        for (i, entry) in chunk.iter().enumerate() {
            let path = resolve_image_path(images_dir, &entry.path);
            let t = load_input_tensor::<T>(&path, (h, w)).map_err(|e| match e {
                Error::IoFailure { .. } => Error::MissingImage {
                    id: entry.image_id.clone(),
                    path: path.display().to_string(),
                },
                other => other,
            })?;
            batch.data_mut()[i * sample..(i + 1) * sample].copy_from_slice(t.data());
        }
        let logits = net.forward_eval(&batch)?;
        let probs = ops::softmax_rows(&logits)?;
        for (i, entry) in chunk.iter().enumerate() {
            let l0 = logits.data()[i * 2].as_f64();
            let l1 = logits.data()[i * 2 + 1].as_f64();
            let pred = predict_from_logits(l0, l1);
            confusion[entry.label.class_index()][pred] += 1;
            per_image.push((entry.image_id.clone(), probs.data()[i * 2 + 1].as_f64()));
        }
    }

    let n = selected.len();
    let accuracy = (confusion[0][0] + confusion[1][1]) as f64 / n as f64;
    Ok(EvalReport { split, n, accuracy, confusion, per_image })
}

/// Softmax over the two logits for one image file.
pub fn predict_one<T: Scalar>(
    net: &AestheticNet<T>,
    image_path: &Path,
) -> Result<(Label, f64)> {
    let t = load_input_tensor::<T>(image_path, net.config().input_size).map_err(|e| match e {
        Error::IoFailure { .. } => Error::MissingImage {
            id: image_path.display().to_string(),
            path: image_path.display().to_string(),
        },
        other => other,
    })?;
    let (c, h, w) = (t.dim(0), t.dim(1), t.dim(2));
    let batch = Tensor::new(&[1, c, h, w], t.into_data())?;
    let logits = net.forward_eval(&batch)?;
    let probs = ops::softmax_rows(&logits)?;
    let p_attractive = probs.data()[1].as_f64();
    let label = match predict_from_logits(logits.data()[0].as_f64(), logits.data()[1].as_f64())
    {
        1 => Label::Attractive,
        _ => Label::Unattractive,
    };
    Ok((label, p_attractive))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetConfig;

    fn tiny_net(seed: u64) -> AestheticNet<f32> {
        let cfg = NetConfig {
            growth_rate: 2,
            layers_per_block: [1, 1, 1],
            stem_channels: 4,
            input_size: (8, 8),
            level_fc_dim: 4,
            num_classes: 2,
        };
        AestheticNet::build(cfg, seed).unwrap()
    }

    fn zero_params(net: &mut AestheticNet<f32>) {
        net.visit_params_mut(&mut |_, t| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
    }

    /// Zeroed network with the final bias forced so class `class` always wins.
    fn forced_net(class: usize) -> AestheticNet<f32> {
        let mut net = tiny_net(0);
        zero_params(&mut net);
        net.visit_params_mut(&mut |name, t| {
            if name == "decision/final/bias" {
                t.data_mut()[class] = 30.0;
            }
        });
        net
    }

    fn toy_split(dir: &Path, labels: &[Label]) -> Vec<ManifestEntry> {
        labels
            .iter()
            .enumerate()
            .map(|(i, &label)| {
                let id = format!("e{i}");
                let img = image::RgbImage::from_fn(8, 8, |x, y| {
                    image::Rgb([(x * 20 + i as u32) as u8, (y * 20) as u8, 99])
                });
                img.save(dir.join(format!("{id}.png"))).unwrap();
                ManifestEntry {
                    image_id: id.clone(),
                    path: format!("{id}.png"),
                    mean_score: 5.0,
                    label,
                    split: Split::Test,
                }
            })
            .collect()
    }

    #[test]
    fn forced_classifier_confusion() {
        let dir = tempfile::tempdir().unwrap();
        let entries = toy_split(
            dir.path(),
            &[Label::Attractive, Label::Attractive, Label::Attractive, Label::Unattractive],
        );
        let net = forced_net(1);
        let report = evaluate(&net, &entries, Split::Test, dir.path()).unwrap();
        assert_eq!(report.n, 4);
        assert!((report.accuracy - 0.75).abs() < 1e-12);
        assert_eq!(report.confusion, [[0, 1], [0, 3]]);
        assert_eq!(report.true_positives(), 3);
        assert_eq!(report.false_positives(), 1);
    }

    #[test]
    fn tied_logits_predict_unattractive() {
        let dir = tempfile::tempdir().unwrap();
        let entries = toy_split(dir.path(), &[Label::Attractive, Label::Unattractive]);
        let mut net = tiny_net(1);
        zero_params(&mut net);
        let report = evaluate(&net, &entries, Split::Test, dir.path()).unwrap();
        // Everything lands in the unattractive column.
        assert_eq!(report.confusion[0][1] + report.confusion[1][1], 0);
        assert_eq!(report.n, 2);

        let (label, p) = predict_one(&net, &dir.path().join("e0.png")).unwrap();
        assert_eq!(label, Label::Unattractive);
        assert!((p - 0.5).abs() < 1e-6);
    }

    #[test]
    fn accuracy_matches_recount_from_per_image() {
        let dir = tempfile::tempdir().unwrap();
        let entries = toy_split(
            dir.path(),
            &[Label::Attractive, Label::Unattractive, Label::Attractive, Label::Unattractive],
        );
        let net = tiny_net(5);
        let report = evaluate(&net, &entries, Split::Test, dir.path()).unwrap();
        // Independent recount: threshold each per-image probability at 1/2
        // (ties resolve to unattractive, matching the logit rule).
        let mut correct = 0;
        for (id, p) in &report.per_image {
            let entry = entries.iter().find(|e| &e.image_id == id).unwrap();
            let pred = if *p > 0.5 { Label::Attractive } else { Label::Unattractive };
            if pred == entry.label {
                correct += 1;
            }
        }
        assert!((report.accuracy - correct as f64 / report.n as f64).abs() < 1e-12);
        let marginal0: usize = report.confusion[0].iter().sum();
        assert_eq!(marginal0, 2);
    }

    #[test]
    fn evaluation_is_order_invariant() {
        let dir = tempfile::tempdir().unwrap();
        let mut entries = toy_split(
            dir.path(),
            &[Label::Attractive, Label::Unattractive, Label::Attractive, Label::Unattractive],
        );
        let net = tiny_net(6);
        let r1 = evaluate(&net, &entries, Split::Test, dir.path()).unwrap();
        entries.reverse();
        let r2 = evaluate(&net, &entries, Split::Test, dir.path()).unwrap();
        assert_eq!(r1.accuracy, r2.accuracy);
        assert_eq!(r1.confusion, r2.confusion);
        let mut p1 = r1.per_image.clone();
        let mut p2 = r2.per_image.clone();
        p1.sort_by(|a, b| a.0.cmp(&b.0));
        p2.sort_by(|a, b| a.0.cmp(&b.0));
        assert_eq!(p1, p2);
    }

    #[test]
    fn predict_one_matches_evaluate_row() {
        let dir = tempfile::tempdir().unwrap();
        let entries = toy_split(dir.path(), &[Label::Attractive, Label::Unattractive]);
        let net = tiny_net(7);
        let report = evaluate(&net, &entries, Split::Test, dir.path()).unwrap();
        for (id, p) in &report.per_image {
            let (_, p_one) = predict_one(&net, &dir.path().join(format!("{id}.png"))).unwrap();
            assert_eq!(*p, p_one);
        }
    }

    #[test]
    fn empty_split_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let entries = toy_split(dir.path(), &[Label::Attractive]);
        let net = tiny_net(8);
        assert!(matches!(
            evaluate(&net, &entries, Split::Train, dir.path()),
            Err(Error::EmptySplit(_))
        ));
    }
}
