//! Training loop, hard-Dice validation, prediction and the multi-set loss comparison.
//!
//! One run trains with batch size 1: every epoch visits the training subjects in a
//! freshly shuffled order, draws one augmentation per subject, takes one Nadam
//! step per subject, and then scores the validation subjects with hard Dice.

pub mod plot;
mod suite;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_transform, AugmentConfig};
use crate::dataio::{label_frequencies, preprocess, AccessLog, LabelMap, Manifest, Phase, Volume};
use crate::elnet::{read_checkpoint, write_checkpoint, Checkpoint, Network, NetworkConfig};
use crate::error::{Error, Result};
use crate::losses::{evaluate, label_weights, LossConfig, LossKind};
use crate::optim::{Nadam, NadamConfig};
use crate::seed;
use crate::volgrad::{Graph, Mode, Tensor};

pub use suite::{comparison_table, run_suite, write_suite_outputs, EvalReport, LossReport, RunResult, SuiteConfig};

// seed streams
const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_STEP: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub optimizer: NadamConfig,
    pub augment: AugmentConfig,
    pub epochs: usize,
    /// Index into the manifest's split sets.
    pub set: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale network, 30 epochs, split set 0.
    pub fn desk(loss: LossConfig) -> Self {
        Self {
            network: NetworkConfig::desk(),
            loss,
            optimizer: NadamConfig::default(),
            augment: AugmentConfig::default(),
            epochs: 30,
            set: 0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.optimizer.validate()?;
        self.augment.validate()?;
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        // weights may still be filled in from the training split
        let mut probe = self.loss.clone();
        if probe.label_weights.is_empty() {
            probe.label_weights = vec![1.0; self.network.num_labels];
        }
        probe.validate(self.network.num_labels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean over the epoch's steps of the loss before each step's update.
    pub train_loss: f64,
    /// Mean over foreground labels of `val_dice`.
    pub val_dice_mean: Option<f64>,
    /// Per label, mean hard Dice over validation subjects where the label occurs.
    pub val_dice: Vec<Option<f64>>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub optimizer: Nadam,
    pub best: Network,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
    /// Loss configuration actually used, with label weights filled in.
    pub loss: LossConfig,
    /// Final-epoch hard Dice of every validation subject.
    pub val_subjects: Vec<SubjectDice>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions<'a> {
    /// Directory receiving `config.json`, `log.csv`, `final.ckpt` and `best.ckpt`.
    pub out_dir: Option<&'a Path>,
    pub access_log: Option<&'a AccessLog>,
}

/// Per label: `2|P ∩ G| / (|P| + |G|)`, or `None` when the label occurs in neither map.
pub fn hard_dice(pred: &LabelMap, gt: &LabelMap) -> Result<Vec<Option<f64>>> {
    if pred.extents() != gt.extents() || pred.num_labels() != gt.num_labels() {
        return Err(Error::Shape {
            op: "hard_dice",
            detail: format!(
                "prediction {:?} with {} labels vs ground truth {:?} with {}",
                pred.extents(),
                pred.num_labels(),
                gt.extents(),
                gt.num_labels()
            ),
        });
    }
    let l = gt.num_labels();
    let (mut p, mut g, mut both) = (vec![0u64; l], vec![0u64; l], vec![0u64; l]);
    for (&a, &b) in pred.labels().iter().zip(gt.labels()) {
        p[a as usize] += 1;
        g[b as usize] += 1;
        if a == b {
            both[a as usize] += 1;
        }
    }
    Ok((0..l)
        .map(|i| match p[i] + g[i] {
            0 => None,
            n => Some(2.0 * both[i] as f64 / n as f64),
        })
        .collect())
}

/// Mean over labels `1..L` that are present; `None` if none are.
pub fn foreground_mean(dice: &[Option<f64>]) -> Option<f64> {
    let v: Vec<f64> = dice.iter().skip(1).flatten().copied().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Per-voxel argmax over the channels of an `L×D×H×W` tensor; ties go to the lowest label.
pub fn argmax_labels(probs: &Tensor, spacing: [f64; 3]) -> Result<LabelMap> {
    let shape = probs.shape();
    if shape.len() != 4 || shape[0] == 0 || shape[0] > 256 {
        return Err(Error::Shape {
            op: "argmax_labels",
            detail: format!("expected L×D×H×W with 1 ≤ L ≤ 256, got {shape:?}"),
        });
    }
    let l = shape[0];
    let n = shape[1] * shape[2] * shape[3];
    let data = probs.data();
    let labels = (0..n)
        .map(|v| {
            let mut best = 0;
            for c in 1..l {
                if data[c * n + v] > data[best * n + v] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new([shape[1], shape[2], shape[3]], spacing, labels, l)
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub labels: LabelMap,
    pub seconds: f64,
}

/// Infer-mode forward pass followed by argmax.
pub fn predict(network: &Network, volume: &Volume) -> Result<Prediction> {
    let start = Instant::now();
    let probs = network.infer(&volume.to_tensor())?;
    let labels = argmax_labels(&probs, volume.spacing())?;
    Ok(Prediction {
        labels,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectDice {
    pub subject: String,
    pub dice: Vec<Option<f64>>,
}

/// Loads and resamples one subject to the network grid.
pub fn load_prepared(manifest: &Manifest, id: &str, extent: usize, phase: Phase, log: Option<&AccessLog>) -> Result<(Volume, LabelMap)> {
    let (v, m) = manifest.load_subject(id, phase, log)?;
    preprocess(&v, &m, extent)
}

/// Predicts and scores each subject against its labels.
pub fn score_subjects(network: &Network, subjects: &[(String, Volume, LabelMap)]) -> Result<Vec<SubjectDice>> {
    subjects
        .iter()
        .map(|(id, v, m)| {
            let pred = predict(network, v)?;
            Ok(SubjectDice {
                subject: id.clone(),
                dice: hard_dice(&pred.labels, m)?,
            })
        })
        .collect()
}

/// Per label mean over subjects, skipping subjects where the label is absent.
pub fn label_means(subjects: &[SubjectDice], num_labels: usize) -> Vec<Option<f64>> {
    (0..num_labels)
        .map(|l| {
            let v: Vec<f64> = subjects.iter().filter_map(|s| s.dice[l]).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect()
}

fn preflight(manifest: &Manifest, ids: &[String]) -> Result<()> {
    for id in ids {
        let s = manifest.subject(id)?;
        for rel in [&s.image, &s.labels] {
            let p = manifest.resolve(rel);
            if !p.is_file() {
                return Err(Error::MissingFile { path: p });
            }
        }
    }
    Ok(())
}

fn load_all(manifest: &Manifest, ids: &[String], extent: usize, phase: Phase, log: Option<&AccessLog>) -> Result<Vec<(String, Volume, LabelMap)>> {
    ids.iter()
        .map(|id| {
            let (v, m) = load_prepared(manifest, id, extent, phase, log)?;
            Ok((id.clone(), v, m))
        })
        .collect()
}

pub fn train(config: &TrainConfig, manifest: &Manifest, options: TrainOptions<'_>) -> Result<TrainOutcome> {
    config.validate()?;
    let num_labels = config.network.num_labels;
    if manifest.num_labels() != num_labels {
        return Err(Error::InvalidConfig(format!(
            "network predicts {num_labels} labels but the manifest lists {}",
            manifest.num_labels()
        )));
    }
    let split = manifest.split(config.set)?.clone();
    if split.train.is_empty() {
        return Err(Error::Manifest(format!("split set {} has no training subjects", config.set)));
    }
    preflight(manifest, &split.train)?;
    preflight(manifest, &split.val)?;
    let log = options.access_log;

    let mut loss = config.loss.clone();
    if loss.uses_label_weights() && loss.label_weights.is_empty() {
        let freq = label_frequencies(manifest, &split.train, log)?;
        loss.label_weights = label_weights(&freq)?;
    }
    loss.validate(num_labels)?;

    let extent = config.network.extent;
    let train_set = load_all(manifest, &split.train, extent, Phase::Train, log)?;
    let val_set = load_all(manifest, &split.val, extent, Phase::Validation, log)?;

    if let Some(dir) = options.out_dir {
        fs::create_dir_all(dir)?;
        let mut stored = config.clone();
        stored.loss = loss.clone();
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(&stored)? + "\n")?;
    }

    let mut network = Network::new(config.network.clone(), seed::derive(config.seed, &[STREAM_INIT]))?;
    let mut optimizer = Nadam::new(config.optimizer.clone(), network.params())?;
    let mut best = network.clone();
    let mut best_score = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut records = Vec::with_capacity(config.epochs);
    let mut val_subjects = Vec::new();
    let mut csv = match options.out_dir {
        Some(dir) => Some(CsvLog::create(&dir.join("log.csv"), num_labels)?),
        None => None,
    };

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(config.seed, &[STREAM_SHUFFLE, epoch as u64])));

        let mut total = 0.0;
        for (k, &i) in order.iter().enumerate() {
            let (id, image, labels) = &train_set[i];
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(config.seed, &[STREAM_STEP, epoch as u64, k as u64]));
            let t = config.augment.sample(&mut rng);
            let (image, labels) = apply_transform(image, labels, &t)?;
            let mut graph = Graph::new();
            let probs = network.forward(&mut graph, &image.to_tensor(), Mode::Train, &mut rng)?;
            let non_finite = || Error::NonFiniteLoss {
                epoch,
                subject: id.clone(),
            };
            if graph.value(probs).data().iter().any(|p| !p.is_finite()) {
                return Err(non_finite());
            }
            let out = evaluate(graph.value(probs), &labels.ground_truth(), &loss)?;
            if !out.value.is_finite() {
                return Err(non_finite());
            }
            total += out.value;
            let grads = graph.backward_from(probs, out.grad)?;
            optimizer.step(network.params_mut(), &grads)?;
        }
        let train_loss = total / train_set.len() as f64;

        val_subjects = score_subjects(&network, &val_set)?;
        let val_dice = label_means(&val_subjects, num_labels);
        let val_dice_mean = foreground_mean(&val_dice);
        let record = EpochRecord {
            epoch,
            train_loss,
            val_dice_mean,
            val_dice,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "set {} {} epoch {epoch}/{}: loss {train_loss:.5}, val Dice {}",
            config.set,
            loss.label(),
            config.epochs,
            val_dice_mean.map_or("n/a".into(), |d| format!("{d:.4}"))
        );
        if let Some(csv) = csv.as_mut() {
            csv.append(&record)?;
        }
        // ties keep the earlier epoch
        if let Some(score) = val_dice_mean.filter(|&s| s > best_score) {
            best_score = score;
            best_epoch = epoch;
            best = network.clone();
        }
        records.push(record);
    }
    if best_epoch == 0 {
        best = network.clone();
        best_epoch = config.epochs;
    }

    if let Some(dir) = options.out_dir {
        save_checkpoint(&dir.join("final.ckpt"), &network, Some(&optimizer))?;
        save_checkpoint(&dir.join("best.ckpt"), &best, None)?;
    }
    Ok(TrainOutcome {
        network,
        optimizer,
        best,
        best_epoch,
        log: records,
        loss,
        val_subjects,
    })
}

pub fn save_checkpoint(path: &Path, network: &Network, optimizer: Option<&Nadam>) -> Result<()> {
    let section = optimizer.map(|o| o.to_section(network.params()));
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, network, section.as_ref())?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile { path: path.to_path_buf() },
        _ => Error::Io(e),
    })?;
    read_checkpoint(std::io::BufReader::new(file))
}

/// Header `epoch,train_loss,val_dice_mean,val_dice_label_0,…,seconds`; absent values are empty.
pub fn csv_header(num_labels: usize) -> String {
    let labels: Vec<String> = (0..num_labels).map(|l| format!("val_dice_label_{l}")).collect();
    format!("epoch,train_loss,val_dice_mean,{},seconds", labels.join(","))
}

pub fn csv_row(r: &EpochRecord) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    let labels: Vec<String> = r.val_dice.iter().map(|&d| opt(d)).collect();
    format!(
        "{},{},{},{},{:.3}",
        r.epoch,
        r.train_loss,
        opt(r.val_dice_mean),
        labels.join(","),
        r.seconds
    )
}

/// Appends and flushes one row per epoch so partial runs leave a usable log.
struct CsvLog {
    file: BufWriter<File>,
    path: PathBuf,
}

impl CsvLog {
    fn create(path: &Path, num_labels: usize) -> Result<Self> {
        let mut file = BufWriter::new(File::create(path)?);
        writeln!(file, "{}", csv_header(num_labels))?;
        file.flush()?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
        })
    }

    fn append(&mut self, r: &EpochRecord) -> Result<()> {
        writeln!(self.file, "{}", csv_row(r))?;
        self.file.flush().map_err(|e| {
            log::error!("writing {}: {e}", self.path.display());
            Error::Io(e)
        })
    }
}

/// Desk suite losses: linear Dice and the combined exponential logarithmic loss at each γ.
pub fn suite_losses(gammas: &[f64]) -> Vec<LossConfig> {
    std::iter::once(LossConfig::new(LossKind::LinearDice))
        .chain(gammas.iter().map(|&g| LossConfig::new(LossKind::ExpLogCombined).with_gamma(g)))
        .collect()
}
