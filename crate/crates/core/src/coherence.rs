//! Coherent minibatch planning: per-image embeddings, exact nearest-neighbor
//! search, and deterministic epoch-exhaustive batch construction that packs
//! mutually similar images of both classes into each minibatch.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::colorspace::LabImage;
use crate::dataset::{Label, ManifestEntry};
use crate::error::{Error, Result};
use crate::imageio::area_resize_plane;

pub const FALLBACK_DIM: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub image_id: String,
    pub vector: Vec<f32>,
}

/// Immutable map from image id to a fixed-dimension vector, with exact
/// nearest-neighbor queries. Iteration follows insertion order.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingIndex {
    dim: usize,
    ids: Vec<String>,
    by_id: HashMap<String, usize>,
    vectors: Vec<Vec<f32>>,
}

impl EmbeddingIndex {
    pub fn new(dim: usize) -> Self {
        EmbeddingIndex { dim, ids: Vec::new(), by_id: HashMap::new(), vectors: Vec::new() }
    }

    pub fn insert(&mut self, embedding: Embedding) -> Result<()> {
        if embedding.vector.len() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "embedding for {} has dimension {}, index expects {}",
                embedding.image_id,
                embedding.vector.len(),
                self.dim
            )));
        }
        if !embedding.vector.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "embedding for {} contains non-finite values",
                embedding.image_id
            )));
        }
        if self.by_id.contains_key(&embedding.image_id) {
            return Err(Error::InvalidConfig(format!(
                "duplicate embedding id {}",
                embedding.image_id
            )));
        }
        self.by_id.insert(embedding.image_id.clone(), self.vectors.len());
        self.ids.push(embedding.image_id);
        self.vectors.push(embedding.vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.by_id.get(id).map(|&i| self.vectors[i].as_slice())
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.ids.iter().map(String::as_str)
    }
}

/// Deterministic substitute for a pretrained extractor: the L plane is
/// area-averaged down to 8x8 and scaled to [0,1], giving a 64-dim vector.
pub fn fallback_embed(image_id: &str, img: &LabImage) -> Embedding {
    let plane = img.l_plane();
    let pooled = area_resize_plane(&plane, img.width(), img.height(), 8, 8);
    Embedding {
        image_id: image_id.to_string(),
        vector: pooled.iter().map(|&v| v / 100.0).collect(),
    }
}

fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

#[derive(PartialEq)]
struct Candidate {
    d2: f64,
    id: String,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.d2.total_cmp(&other.d2).then_with(|| self.id.cmp(&other.id))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// The k ids nearest to `query_id` in Euclidean distance, excluding the
/// query itself, ties broken by ascending id. With `restrict_to`, only ids
/// in that set are candidates. Returns fewer than k only when candidates
/// run out.
pub fn knn(
    index: &EmbeddingIndex,
    query_id: &str,
    k: usize,
    restrict_to: Option<&HashSet<String>>,
) -> Result<Vec<String>> {
    let query = index
        .get(query_id)
        .ok_or_else(|| Error::UnknownId(query_id.to_string()))?;
    if k == 0 {
        return Ok(Vec::new());
    }
    // Bounded max-heap: the worst kept candidate sits on top.
    let mut heap = std::collections::BinaryHeap::with_capacity(k + 1);
    for (i, id) in index.ids.iter().enumerate() {
        if id == query_id {
            continue;
        }
        if let Some(allowed) = restrict_to {
            if !allowed.contains(id) {
                continue;
            }
        }
        let cand = Candidate { d2: squared_distance(query, &index.vectors[i]), id: id.clone() };
        if heap.len() < k {
            heap.push(cand);
        } else if cand < *heap.peek().unwrap() {
            heap.pop();
            heap.push(cand);
        }
    }
    let mut result: Vec<Candidate> = heap.into_vec();
    result.sort();
    Ok(result.into_iter().map(|c| c.id).collect())
}

/// Deterministic, epoch-exhaustive sequence of minibatches.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seed: u64,
    pub batches: Vec<Vec<String>>,
    /// Warning-level notes recorded while planning (not serialized).
    pub warnings: Vec<String>,
}

impl BatchPlan {
    pub fn all_ids(&self) -> impl Iterator<Item = &str> {
        self.batches.iter().flatten().map(String::as_str)
    }
}

fn check_batch_size(batch_size: usize) -> Result<()> {
    if batch_size < 2 || batch_size % 2 != 0 {
        return Err(Error::InvalidBatchSize(format!(
            "batch size must be even and >= 2, got {batch_size}"
        )));
    }
    Ok(())
}

/// Coherent plan: repeatedly draw a seed image uniformly from the unconsumed
/// pool, then fill the batch with the seed's nearest unconsumed neighbors,
/// up to B/2 per class (backfilling from the other class when one pool runs
/// short); everything chosen is consumed. Every train image appears exactly
/// once per epoch; the final batch may be partial.
pub fn plan_epoch(
    index: &EmbeddingIndex,
    train_entries: &[ManifestEntry],
    batch_size: usize,
    seed: u64,
) -> Result<BatchPlan> {
    check_batch_size(batch_size)?;
    if train_entries.is_empty() {
        return Err(Error::EmptyInput("no train entries to plan".into()));
    }
    let mut label_by_id: HashMap<String, Label> = HashMap::new();
    for e in train_entries {
        if !index.contains(&e.image_id) {
            return Err(Error::UnknownId(format!(
                "{} has no embedding",
                e.image_id
            )));
        }
        label_by_id.insert(e.image_id.clone(), e.label);
    }

    let mut all_ids: Vec<String> = label_by_id.keys().cloned().collect();
    all_ids.sort_unstable();

    let mut warnings = Vec::new();
    let n_attractive = train_entries.iter().filter(|e| e.label == Label::Attractive).count();
    if n_attractive == 0 || n_attractive == train_entries.len() {
        warnings.push("EmptyClass: planning proceeds single-class".to_string());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut consumed: HashSet<String> = HashSet::new();
    let mut batches = Vec::new();
    let half = batch_size / 2;

    while consumed.len() < all_ids.len() {
        let unconsumed: Vec<&String> =
            all_ids.iter().filter(|id| !consumed.contains(*id)).collect();
        let seed_id = unconsumed[rng.random_range(0..unconsumed.len())].clone();
        let seed_label = label_by_id[&seed_id];

        let pool_of = |label: Label, consumed: &HashSet<String>| -> HashSet<String> {
            all_ids
                .iter()
                .filter(|id| {
                    !consumed.contains(*id) && **id != seed_id && label_by_id[*id] == label
                })
                .cloned()
                .collect()
        };
        let attr_pool = pool_of(Label::Attractive, &consumed);
        let unattr_pool = pool_of(Label::Unattractive, &consumed);

        // Nearest unconsumed neighbors of the seed, one ranked list per class.
        let near_attr = knn(index, &seed_id, batch_size, Some(&attr_pool))?;
        let near_unattr = knn(index, &seed_id, batch_size, Some(&unattr_pool))?;

        let mut quota_attr = half;
        let mut quota_unattr = half;
        match seed_label {
            Label::Attractive => quota_attr -= 1,
            Label::Unattractive => quota_unattr -= 1,
        }

        let mut batch: Vec<String> = vec![seed_id.clone()];
        let take_attr = quota_attr.min(near_attr.len());
        let take_unattr = quota_unattr.min(near_unattr.len());
        batch.extend(near_attr[..take_attr].iter().cloned());
        batch.extend(near_unattr[..take_unattr].iter().cloned());

        // Backfill a short class from the other class's remaining neighbors.
        let mut need = batch_size - batch.len().min(batch_size);
        if need > 0 {
            let spare_attr = &near_attr[take_attr..];
            let spare_unattr = &near_unattr[take_unattr..];
            for id in spare_attr.iter().chain(spare_unattr.iter()) {
                if need == 0 {
                    break;
                }
                batch.push(id.clone());
                need -= 1;
            }
        }

        for id in &batch {
            consumed.insert(id.clone());
        }
        batches.push(batch);
    }

    Ok(BatchPlan { batch_size, seed, batches, warnings })
}

/// Ablation baseline: a seeded shuffle chunked into batches.
pub fn plan_epoch_random(
    train_entries: &[ManifestEntry],
    batch_size: usize,
    seed: u64,
) -> Result<BatchPlan> {
    check_batch_size(batch_size)?;
    if train_entries.is_empty() {
        return Err(Error::EmptyInput("no train entries to plan".into()));
    }
    let mut ids: Vec<String> = train_entries.iter().map(|e| e.image_id.clone()).collect();
    ids.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand::seq::SliceRandom;
    ids.shuffle(&mut rng);
    let batches = ids.chunks(batch_size).map(|c| c.to_vec()).collect();
    Ok(BatchPlan { batch_size, seed, batches, warnings: Vec::new() })
}

/// Text format: first line `#dim=<d>`, then `image_id,v0,...,v{d-1}` rows.
pub fn write_embeddings(index: &EmbeddingIndex, path: &Path) -> Result<()> {
    let display = path.display().to_string();
    let mut out = String::new();
    out.push_str(&format!("#dim={}\n", index.dim()));
    for (id, vec) in index.ids.iter().zip(index.vectors.iter()) {
        out.push_str(id);
        for v in vec {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(display.clone(), e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(display, e))
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingIndex> {
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(display, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::FormatViolation("empty embeddings file".into()))?;
    let dim: usize = header
        .strip_prefix("#dim=")
        .and_then(|d| d.parse().ok())
        .ok_or_else(|| Error::FormatViolation(format!("bad embeddings header `{header}`")))?;
    let mut index = EmbeddingIndex::new(dim);
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let id = parts.next().unwrap_or_default().to_string();
        let values: Vec<&str> = parts.collect();
        if values.len() != dim {
            return Err(Error::DimensionMismatch {
                line: line_no,
                reason: format!("row has {} values, expected {dim}", values.len()),
            });
        }
        let mut vector = Vec::with_capacity(dim);
        for v in values {
            vector.push(v.parse::<f32>().map_err(|_| Error::ParseFailure {
                line: line_no,
                reason: format!("unparseable embedding value `{v}`"),
            })?);
        }
        index.insert(Embedding { image_id: id, vector }).map_err(|e| match e {
            Error::InvalidConfig(msg) => Error::SchemaViolation { line: line_no, reason: msg },
            other => other,
        })?;
    }
    Ok(index)
}

/// Text format: first line `#batch_size=<B> seed=<s>`, then one
/// comma-separated batch per line.
pub fn write_batch_plan(plan: &BatchPlan, path: &Path) -> Result<()> {
    let display = path.display().to_string();
    let mut out = String::new();
    out.push_str(&format!("#batch_size={} seed={}\n", plan.batch_size, plan.seed));
    for batch in &plan.batches {
        out.push_str(&batch.join(","));
        out.push('\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(display.clone(), e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(display, e))
}

pub fn read_batch_plan(path: &Path) -> Result<BatchPlan> {
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(display, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::FormatViolation("empty batch plan file".into()))?;
    let parse_header = || -> Option<(usize, u64)> {
        let rest = header.strip_prefix("#batch_size=")?;
        let (b, s) = rest.split_once(" seed=")?;
        Some((b.parse().ok()?, s.parse().ok()?))
    };
    let (batch_size, seed) = parse_header()
        .ok_or_else(|| Error::FormatViolation(format!("bad plan header `{header}`")))?;
    let batches = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    Ok(BatchPlan { batch_size, seed, batches, warnings: Vec::new() })
}
