use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{read_labels, read_volume, LabelMap, Volume};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Subject {
    pub id: String,
    /// Paths are relative to the manifest's directory.
    pub image: PathBuf,
    pub labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelEntry {
    pub id: usize,
    pub name: String,
    /// Voxel fraction over the whole dataset.
    pub frequency: f64,
}

/// Train and validation subject ids of one experiment set, stored as a
/// two-element array `[train_ids, val_ids]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(Vec<String>, Vec<String>)", into = "(Vec<String>, Vec<String>)")]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

impl From<(Vec<String>, Vec<String>)> for Split {
    fn from((train, val): (Vec<String>, Vec<String>)) -> Self {
        Self { train, val }
    }
}

impl From<Split> for (Vec<String>, Vec<String>) {
    fn from(s: Split) -> Self {
        (s.train, s.val)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub subjects: Vec<Subject>,
    pub labels: Vec<LabelEntry>,
    pub splits: Vec<Split>,
    pub seed: u64,
    #[serde(skip)]
    root: PathBuf,
}

/// Why a file was read; lets tests audit that training never opens validation data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Validation,
    Evaluation,
}

/// Shared record of every subject file read, in order.
#[derive(Debug, Clone, Default)]
pub struct AccessLog(Arc<Mutex<Vec<(Phase, PathBuf)>>>);

impl AccessLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, phase: Phase, path: &Path) {
        self.0.lock().expect("access log poisoned").push((phase, path.to_path_buf()));
    }

    pub fn entries(&self) -> Vec<(Phase, PathBuf)> {
        self.0.lock().expect("access log poisoned").clone()
    }
}

impl Manifest {
    pub fn new(subjects: Vec<Subject>, labels: Vec<LabelEntry>, splits: Vec<Split>, seed: u64, root: impl Into<PathBuf>) -> Self {
        Self {
            subjects,
            labels,
            splits,
            seed,
            root: root.into(),
        }
    }

    /// Parses and fully validates a manifest; relative paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile { path: path.to_path_buf() },
            _ => Error::Io(e),
        })?;
        let mut m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn frequencies(&self) -> Vec<f64> {
        self.labels.iter().map(|l| l.frequency).collect()
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn subject(&self, id: &str) -> Result<&Subject> {
        self.subjects
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::Manifest(format!("unknown subject `{id}`")))
    }

    pub fn split(&self, set: usize) -> Result<&Split> {
        self.splits.get(set).ok_or_else(|| {
            Error::Manifest(format!("split set {set} requested but the manifest has {}", self.splits.len()))
        })
    }

    /// Reads one subject's image and labels, recording the access.
    pub fn load_subject(&self, id: &str, phase: Phase, log: Option<&AccessLog>) -> Result<(Volume, LabelMap)> {
        let s = self.subject(id)?;
        let (ip, lp) = (self.resolve(&s.image), self.resolve(&s.labels));
        if let Some(log) = log {
            log.record(phase, &ip);
            log.record(phase, &lp);
        }
        let v = read_volume(&ip)?;
        let m = read_labels(&lp)?;
        if v.extents() != m.extents() {
            return Err(Error::Manifest(format!(
                "subject `{id}`: image extents {:?} differ from label extents {:?}",
                v.extents(),
                m.extents()
            )));
        }
        if m.num_labels() != self.num_labels() {
            return Err(Error::Manifest(format!(
                "subject `{id}`: label file declares {} labels, manifest {}",
                m.num_labels(),
                self.num_labels()
            )));
        }
        Ok((v, m))
    }

    /// Checks the label table, the split assignments and that every referenced
    /// file exists and decodes.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Manifest(m));
        if self.labels.len() < 2 {
            return bad(format!("{} labels listed; at least 2 required", self.labels.len()));
        }
        for (i, l) in self.labels.iter().enumerate() {
            if l.id != i {
                return bad(format!("label table entry {i} has id {}", l.id));
            }
            if !(l.frequency >= 0.0 && l.frequency.is_finite()) {
                return bad(format!("label {i} has invalid frequency {}", l.frequency));
            }
        }
        let total: f64 = self.frequencies().iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return bad(format!("label frequencies sum to {total}, expected 1"));
        }
        let mut ids = HashSet::new();
        for s in &self.subjects {
            if !ids.insert(s.id.as_str()) {
                return bad(format!("duplicate subject id `{}`", s.id));
            }
        }
        for (k, split) in self.splits.iter().enumerate() {
            let train: BTreeSet<&str> = split.train.iter().map(String::as_str).collect();
            for id in split.train.iter().chain(&split.val) {
                if !ids.contains(id.as_str()) {
                    return bad(format!("split {k} references unknown subject `{id}`"));
                }
            }
            if let Some(id) = split.val.iter().find(|id| train.contains(id.as_str())) {
                return bad(format!("split {k} places `{id}` in both train and validation"));
            }
        }
        for s in &self.subjects {
            for rel in [&s.image, &s.labels] {
                let p = self.resolve(rel);
                if !p.is_file() {
                    return Err(Error::MissingFile { path: p });
                }
            }
            self.load_subject(&s.id, Phase::Evaluation, None)?;
        }
        Ok(())
    }
}

/// Voxel fraction of each label pooled over the given subjects. Labels that never
/// occur get frequency 0 and a warning; the losses reject such weights.
pub fn label_frequencies(manifest: &Manifest, subjects: &[String], log: Option<&AccessLog>) -> Result<Vec<f64>> {
    let mut counts = vec![0u64; manifest.num_labels()];
    for id in subjects {
        let (_, m) = manifest.load_subject(id, Phase::Train, log)?;
        for (c, n) in counts.iter_mut().zip(m.counts()) {
            *c += n;
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Manifest("no voxels in the requested subjects".into()));
    }
    for (label, &c) in counts.iter().enumerate() {
        if c == 0 {
            log::warn!("label {label} does not occur in the training subjects; merge or drop it before training");
        }
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

/// Subject indices of one experiment set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// `n_sets` independent shuffles of `0..n_subjects`; the first
/// `round(train_frac · n)` (half rounded up) of each shuffle train, the rest validate.
pub fn make_splits(n_subjects: usize, n_sets: usize, train_frac: f64, seed: u64) -> Result<Vec<SplitIndices>> {
    if n_subjects < 4 {
        return Err(Error::InvalidConfig(format!("at least 4 subjects are needed for splits, got {n_subjects}")));
    }
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::InvalidConfig(format!("train fraction {train_frac} outside (0, 1)")));
    }
    let n_train = ((train_frac * n_subjects as f64 + 0.5).floor() as usize).clamp(1, n_subjects - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_sets)
        .map(|_| {
            let mut order: Vec<usize> = (0..n_subjects).collect();
            order.shuffle(&mut rng);
            let val = order.split_off(n_train);
            SplitIndices { train: order, val }
        })
        .collect())
}
