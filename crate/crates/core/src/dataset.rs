//! AVA-style vote metadata, mean scores, the AVA2 top/bottom split with its
//! percentile extension, and manifest persistence.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One image's vote histogram over scores 1..10.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteRecord {
    pub image_id: String,
    pub votes: [u64; 10],
}

impl VoteRecord {
    pub fn total_votes(&self) -> u64 {
        self.votes.iter().sum()
    }

    /// Weighted mean of the histogram: sum(s * votes[s]) / sum(votes).
    pub fn mean_score(&self) -> Result<f64> {
        let total = self.total_votes();
        if total == 0 {
            return Err(Error::EmptyVotes(self.image_id.clone()));
        }
        let weighted: u64 = self
            .votes
            .iter()
            .enumerate()
            .map(|(i, &v)| (i as u64 + 1) * v)
            .sum();
        Ok(weighted as f64 / total as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Unattractive,
    Attractive,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Unattractive => "unattractive",
            Label::Attractive => "attractive",
        }
    }

    /// Class index used by the network: unattractive = 0, attractive = 1.
    pub fn class_index(self) -> usize {
        match self {
            Label::Unattractive => 0,
            Label::Attractive => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub image_id: String,
    pub path: String,
    pub mean_score: f64,
    pub label: Label,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct SplitConfig {
    pub top_frac: f64,
    pub bottom_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
    pub extend_percentile: Option<f64>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            top_frac: 0.1,
            bottom_frac: 0.1,
            test_frac: 0.5,
            seed: 0,
            extend_percentile: None,
        }
    }
}

impl SplitConfig {
    fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| v > 0.0 && v < 1.0;
        if !in_unit(self.top_frac) || !in_unit(self.bottom_frac) || !in_unit(self.test_frac) {
            return Err(Error::InvalidConfig(
                "split fractions must lie in (0,1)".into(),
            ));
        }
        if self.top_frac + self.bottom_frac > 1.0 {
            return Err(Error::InvalidConfig(
                "top_frac + bottom_frac must not exceed 1".into(),
            ));
        }
        if let Some(p) = self.extend_percentile {
            if !(p > 0.0 && p <= 0.5) {
                return Err(Error::InvalidConfig(format!(
                    "extend_percentile must lie in (0, 0.5], got {p}"
                )));
            }
        }
        Ok(())
    }
}

/// Manifest paths may be absolute or relative; relative ones resolve
/// against the images directory handed to the command.
pub fn resolve_image_path(images_dir: &Path, entry_path: &str) -> std::path::PathBuf {
    let p = Path::new(entry_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        images_dir.join(p)
    }
}

#[derive(Debug, Clone)]
pub struct MalformedLine {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct ParseOutcome {
    pub records: Vec<VoteRecord>,
    pub malformed: Vec<MalformedLine>,
}

/// Parses whitespace-separated lines: row index, image id, ten vote counts;
/// any further columns are ignored. Malformed lines are collected with their
/// line numbers and parsing continues.
pub fn parse_ava_metadata(reader: impl BufRead) -> Result<ParseOutcome> {
    let mut outcome = ParseOutcome::default();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(format!("line {line_no}"), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() < 12 {
            outcome.malformed.push(MalformedLine {
                line: line_no,
                reason: format!("MalformedLine: {} tokens, need at least 12", tokens.len()),
            });
            continue;
        }
        let mut votes = [0u64; 10];
        let mut ok = true;
        for (i, v) in votes.iter_mut().enumerate() {
            match tokens[2 + i].parse::<u64>() {
                Ok(n) => *v = n,
                Err(_) => {
                    outcome.malformed.push(MalformedLine {
                        line: line_no,
                        reason: format!(
                            "MalformedLine: vote token `{}` is not a non-negative integer",
                            tokens[2 + i]
                        ),
                    });
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            outcome.records.push(VoteRecord { image_id: tokens[1].to_string(), votes });
        }
    }
    Ok(outcome)
}

#[derive(Debug)]
pub struct Ava2Build {
    pub entries: Vec<ManifestEntry>,
    pub dropped_zero_votes: usize,
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

/// Builds the binary split: records sorted ascending by (mean score, id);
/// the bottom `bottom_frac` labeled unattractive and the top `top_frac`
/// attractive; a seeded shuffle assigns `test_frac` of each label to test.
/// With `extend_percentile = p`, records at or beyond the p / (1-p)
/// quantiles that are not already included join the train split.
pub fn build_ava2(
    records: &[VoteRecord],
    cfg: &SplitConfig,
    image_dir: &Path,
) -> Result<Ava2Build> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::EmptyInput("no vote records".into()));
    }

    let mut usable: Vec<(&VoteRecord, f64)> = Vec::with_capacity(records.len());
    let mut dropped = 0usize;
    for r in records {
        match r.mean_score() {
            Ok(m) => usable.push((r, m)),
            Err(_) => dropped += 1,
        }
    }
    if usable.is_empty() {
        return Err(Error::EmptyInput("all records have zero votes".into()));
    }
    usable.sort_by(|a, b| {
        a.1.total_cmp(&b.1).then_with(|| a.0.image_id.cmp(&b.0.image_id))
    });

    let n = usable.len();
    let n_bottom = (cfg.bottom_frac * n as f64).floor() as usize;
    let n_top = (cfg.top_frac * n as f64).floor() as usize;

    let make_entry = |rec: &VoteRecord, mean: f64, label: Label, split: Split| ManifestEntry {
        image_id: rec.image_id.clone(),
        path: image_dir.join(format!("{}.jpg", rec.image_id)).display().to_string(),
        mean_score: round6(mean),
        label,
        split,
    };

    // Seeded test/train assignment within each label group; the unattractive
    // group is shuffled first, then the attractive group, from one stream.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut assign = |group: &[(usize, f64)], label: Label| -> Vec<(usize, f64, Label, Split)> {
        let mut order: Vec<usize> = (0..group.len()).collect();
        order.shuffle(&mut rng);
        let n_test = (cfg.test_frac * group.len() as f64).floor() as usize;
        let test_set: HashSet<usize> = order[..n_test].iter().copied().collect();
        group
            .iter()
            .enumerate()
            .map(|(i, &(idx, mean))| {
                let split = if test_set.contains(&i) { Split::Test } else { Split::Train };
                (idx, mean, label, split)
            })
            .collect()
    };

    let bottom: Vec<(usize, f64)> = (0..n_bottom).map(|i| (i, usable[i].1)).collect();
    let top: Vec<(usize, f64)> = (n - n_top..n).map(|i| (i, usable[i].1)).collect();
    let mut assigned = assign(&bottom, Label::Unattractive);
    assigned.extend(assign(&top, Label::Attractive));
    assigned.sort_by_key(|&(idx, ..)| idx);

    let mut entries: Vec<ManifestEntry> = assigned
        .iter()
        .map(|&(idx, mean, label, split)| make_entry(usable[idx].0, mean, label, split))
        .collect();
    let ava2_ids: HashSet<String> =
        entries.iter().map(|e| e.image_id.clone()).collect();

    if let Some(p) = cfg.extend_percentile {
        // Thresholds follow the same floor rule as the split counts: the
        // m-th smallest and m-th largest mean, m = floor(p*N).
        let m = (p * n as f64).floor() as usize;
        if m >= 1 {
            let low_cut = usable[m - 1].1;
            let high_cut = usable[n - m].1;
            for &(rec, mean) in &usable {
                if ava2_ids.contains(&rec.image_id) {
                    continue;
                }
                if mean <= low_cut {
                    entries.push(make_entry(rec, mean, Label::Unattractive, Split::Train));
                } else if mean >= high_cut {
                    entries.push(make_entry(rec, mean, Label::Attractive, Split::Train));
                }
            }
        }
    }

    Ok(Ava2Build { entries, dropped_zero_votes: dropped })
}

/// One record per line: tab-separated `key=value` pairs in fixed order
/// (image_id, path, mean_score at 6 decimals, label, split).
pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    let display = path.display().to_string();
    let mut out = String::new();
    for e in entries {
        out.push_str(&format!(
            "image_id={}\tpath={}\tmean_score={:.6}\tlabel={}\tsplit={}\n",
            e.image_id,
            e.path,
            e.mean_score,
            e.label.as_str(),
            e.split.as_str()
        ));
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(display.clone(), e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(display, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(display, e))?;
    let mut entries = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::SchemaViolation {
                line: line_no,
                reason: format!("{} fields, expected 5", fields.len()),
            });
        }
        let take = |i: usize, key: &str| -> Result<String> {
            let prefix = format!("{key}=");
            fields[i].strip_prefix(&prefix).map(str::to_string).ok_or_else(|| {
                Error::SchemaViolation {
                    line: line_no,
                    reason: format!("field {} must start with `{prefix}`", i + 1),
                }
            })
        };
        let image_id = take(0, "image_id")?;
        let path = take(1, "path")?;
        let mean_score: f64 = take(2, "mean_score")?.parse().map_err(|_| {
            Error::SchemaViolation { line: line_no, reason: "unparseable mean_score".into() }
        })?;
        let label = match take(3, "label")?.as_str() {
            "attractive" => Label::Attractive,
            "unattractive" => Label::Unattractive,
            other => {
                return Err(Error::SchemaViolation {
                    line: line_no,
                    reason: format!("unknown label `{other}`"),
                })
            }
        };
        let split = match take(4, "split")?.as_str() {
            "train" => Split::Train,
            "test" => Split::Test,
            other => {
                return Err(Error::SchemaViolation {
                    line: line_no,
                    reason: format!("unknown split `{other}`"),
                })
            }
        };
        entries.push(ManifestEntry { image_id, path, mean_score, label, split });
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn record(id: &str, votes: [u64; 10]) -> VoteRecord {
        VoteRecord { image_id: id.to_string(), votes }
    }

    /// `n` records with strictly increasing, distinct mean scores: record i
    /// mixes scores 1 and 10 with weights (n-i, i+1).
    fn ladder(n: usize) -> Vec<VoteRecord> {
        (0..n)
            .map(|i| {
                let mut votes = [0u64; 10];
                votes[0] = (n - i) as u64;
                votes[9] = i as u64 + 1;
                record(&format!("img{i:04}"), votes)
            })
            .collect()
    }

    #[test]
    fn parse_real_ava_line() {
        let text = "1 953619 0 1 5 17 38 36 15 6 5 1 1 22 1396\n";
        let out = parse_ava_metadata(Cursor::new(text)).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.records[0].image_id, "953619");
        assert_eq!(out.records[0].votes, [0, 1, 5, 17, 38, 36, 15, 6, 5, 1]);
        assert!(out.malformed.is_empty());
    }

    #[test]
    fn parse_minimal_line() {
        let out = parse_ava_metadata(Cursor::new("7 42 0 0 0 0 0 10 0 0 0 0")).unwrap();
        assert_eq!(out.records[0].votes, [0, 0, 0, 0, 0, 10, 0, 0, 0, 0]);
    }

    #[test]
    fn malformed_lines_are_reported_with_numbers() {
        let text = "abc\n1 10 0 0 0 0 0 1 0 0 0 0\n2 11 0 0 x 0 0 1 0 0 0 0\n";
        let out = parse_ava_metadata(Cursor::new(text)).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.malformed.len(), 2);
        assert_eq!(out.malformed[0].line, 1);
        assert_eq!(out.malformed[1].line, 3);
    }

    #[test]
    fn mean_score_examples() {
        assert_eq!(record("a", [0, 0, 0, 0, 0, 10, 0, 0, 0, 0]).mean_score().unwrap(), 6.0);
        assert_eq!(record("b", [5, 0, 0, 0, 0, 0, 0, 0, 0, 5]).mean_score().unwrap(), 5.5);
        // 699/124, fixed by independent recomputation.
        let m = record("c", [0, 1, 5, 17, 38, 36, 15, 6, 5, 1]).mean_score().unwrap();
        assert_eq!(m, 699.0 / 124.0);
        assert!((m - 5.6371).abs() < 1e-4);
    }

    #[test]
    fn zero_votes_is_error() {
        assert!(matches!(
            record("z", [0; 10]).mean_score(),
            Err(Error::EmptyVotes(_))
        ));
    }

    #[test]
    fn hundred_records_make_twenty_entries() {
        let records = ladder(100);
        let cfg = SplitConfig::default();
        let build = build_ava2(&records, &cfg, Path::new("imgs")).unwrap();
        let entries = &build.entries;
        assert_eq!(entries.len(), 20);
        let attractive = entries.iter().filter(|e| e.label == Label::Attractive).count();
        let test = entries.iter().filter(|e| e.split == Split::Test).count();
        assert_eq!(attractive, 10);
        assert_eq!(entries.len() - attractive, 10);
        assert_eq!(test, 10);
        assert_eq!(entries.len() - test, 10);
    }

    #[test]
    fn paper_scale_fraction_arithmetic() {
        // 250k records with 10% + 10% yield 50k entries, 25k per class.
        let n = 250_000usize;
        let records: Vec<VoteRecord> = (0..n)
            .map(|i| {
                let mut votes = [0u64; 10];
                votes[0] = (n - 1 - i) as u64 + 1;
                votes[9] = i as u64 + 1;
                record(&format!("img{i:06}"), votes)
            })
            .collect();
        let build = build_ava2(&records, &SplitConfig::default(), Path::new("d")).unwrap();
        assert_eq!(build.entries.len(), 50_000);
        let attractive =
            build.entries.iter().filter(|e| e.label == Label::Attractive).count();
        assert_eq!(attractive, 25_000);
    }

    #[test]
    fn extension_adds_quartile_tails_as_train_only() {
        // Ten records with means exactly 1..10.
        let records: Vec<VoteRecord> = (0..10)
            .map(|i| {
                let mut votes = [0u64; 10];
                votes[i] = 3;
                record(&format!("img{i}"), votes)
            })
            .collect();
        let cfg = SplitConfig { extend_percentile: Some(0.25), ..SplitConfig::default() };
        let build = build_ava2(&records, &cfg, Path::new("d")).unwrap();
        let mut means: Vec<i64> =
            build.entries.iter().map(|e| e.mean_score.round() as i64).collect();
        means.sort_unstable();
        assert_eq!(means, vec![1, 2, 9, 10]);
        // The added quartile entries (means 2 and 9) are train-only.
        for e in &build.entries {
            let m = e.mean_score.round() as i64;
            if m == 2 || m == 9 {
                assert_eq!(e.split, Split::Train);
            }
        }
    }

    #[test]
    fn zero_vote_records_are_dropped_with_count() {
        let mut records = ladder(20);
        records.push(record("dead", [0; 10]));
        let build = build_ava2(&records, &SplitConfig::default(), Path::new("d")).unwrap();
        assert_eq!(build.dropped_zero_votes, 1);
        assert!(build.entries.iter().all(|e| e.image_id != "dead"));
    }

    #[test]
    fn train_test_disjoint_and_rebuild_identical() {
        let records = ladder(60);
        let cfg = SplitConfig { seed: 99, ..SplitConfig::default() };
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("m1"), dir.path().join("m2"));
        let b1 = build_ava2(&records, &cfg, Path::new("d")).unwrap();
        let b2 = build_ava2(&records, &cfg, Path::new("d")).unwrap();
        write_manifest(&b1.entries, &p1).unwrap();
        write_manifest(&b2.entries, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let train: HashSet<_> = b1
            .entries
            .iter()
            .filter(|e| e.split == Split::Train)
            .map(|e| e.image_id.clone())
            .collect();
        let test: HashSet<_> = b1
            .entries
            .iter()
            .filter(|e| e.split == Split::Test)
            .map(|e| e.image_id.clone())
            .collect();
        assert!(train.is_disjoint(&test));
    }

    #[test]
    fn invalid_config_and_empty_input() {
        let records = ladder(10);
        let bad = SplitConfig { top_frac: 0.0, ..SplitConfig::default() };
        assert!(matches!(
            build_ava2(&records, &bad, Path::new("d")),
            Err(Error::InvalidConfig(_))
        ));
        let overlap = SplitConfig { top_frac: 0.6, bottom_frac: 0.6, ..SplitConfig::default() };
        assert!(build_ava2(&records, &overlap, Path::new("d")).is_err());
        assert!(matches!(
            build_ava2(&[], &SplitConfig::default(), Path::new("d")),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn manifest_roundtrips_field_for_field() {
        let records = ladder(40);
        let build = build_ava2(&records, &SplitConfig::default(), Path::new("d")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.tsv");
        write_manifest(&build.entries, &path).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(build.entries, back);
    }

    #[test]
    fn empty_manifest_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.tsv");
        write_manifest(&[], &path).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), vec![]);
    }

    #[test]
    fn unknown_label_is_schema_violation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        std::fs::write(
            &path,
            "image_id=1\tpath=p\tmean_score=5.000000\tlabel=neutral\tsplit=train\n",
        )
        .unwrap();
        assert!(matches!(
            read_manifest(&path),
            Err(Error::SchemaViolation { line: 1, .. })
        ));
    }
}
