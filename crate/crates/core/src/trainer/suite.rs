//! Loss-comparison matrix: every loss configuration trained on every split set,
//! scored on the validation subjects at the final epoch, and aggregated across sets.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::plot::{LinePlot, Series};
use super::{foreground_mean, label_means, train, EpochRecord, SubjectDice, TrainConfig, TrainOptions};
use crate::dataio::{AccessLog, Manifest};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    /// Shared settings; its `loss` and `set` fields are replaced per run.
    pub base: TrainConfig,
    pub losses: Vec<LossConfig>,
    pub sets: Vec<usize>,
    /// Runs trained concurrently.
    pub jobs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub loss: String,
    pub set: usize,
    pub seed: u64,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
    /// Final-epoch validation Dice per subject.
    pub subjects: Vec<SubjectDice>,
    pub label_dice: Vec<Option<f64>>,
    pub mean_dice: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss: String,
    pub config: LossConfig,
    /// Per label, mean and population std across sets of the per-set mean Dice.
    pub label_mean: Vec<Option<f64>>,
    pub label_std: Vec<Option<f64>>,
    /// Mean and population std across sets of the foreground-averaged Dice.
    pub overall_mean: Option<f64>,
    pub overall_std: Option<f64>,
    pub runs: Vec<RunResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_labels: usize,
    pub sets: Vec<usize>,
    pub losses: Vec<LossReport>,
}

fn mean_std(v: &[f64]) -> Option<(f64, f64)> {
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

fn run_cell(config: &SuiteConfig, loss: &LossConfig, set: usize, manifest: &Manifest, out_dir: Option<&Path>, log: Option<&AccessLog>) -> Result<RunResult> {
    // losses share a seed within a set, so they start from the same weights
    // and see the same augmentation stream
    let seed = seed::derive(config.base.seed, &[set as u64]);
    let run = TrainConfig {
        loss: loss.clone(),
        set,
        seed,
        ..config.base.clone()
    };
    let label = loss.label();
    let dir = out_dir.map(|d| d.join(&label).join(format!("set{set}")));
    let outcome = train(
        &run,
        manifest,
        TrainOptions {
            out_dir: dir.as_deref(),
            access_log: log,
        },
    )?;
    let label_dice = label_means(&outcome.val_subjects, run.network.num_labels);
    let result = RunResult {
        loss: label,
        set,
        seed,
        best_epoch: outcome.best_epoch,
        log: outcome.log,
        subjects: outcome.val_subjects,
        mean_dice: foreground_mean(&label_dice),
        label_dice,
    };
    if let Some(dir) = dir {
        fs::write(dir.join("result.json"), serde_json::to_string_pretty(&result)? + "\n")?;
    }
    log::info!(
        "finished {} on set {set}: final mean Dice {}",
        result.loss,
        result.mean_dice.map_or("n/a".into(), |d| format!("{d:.4}"))
    );
    Ok(result)
}

/// Trains every (loss, set) pair, `jobs` at a time. Each finished run leaves its
/// checkpoints, log and `result.json` under `out_dir/<loss>/set<k>/`.
pub fn run_suite(config: &SuiteConfig, manifest: &Manifest, out_dir: Option<&Path>, log: Option<&AccessLog>) -> Result<EvalReport> {
    config.base.validate()?;
    if config.losses.is_empty() || config.sets.is_empty() {
        return Err(Error::InvalidConfig("a suite needs at least one loss and one set".into()));
    }
    let mut seen = HashSet::new();
    for loss in &config.losses {
        loss.clone().with_label_weights(vec![1.0; config.base.network.num_labels]).validate(config.base.network.num_labels)?;
        if !seen.insert(loss.label()) {
            return Err(Error::InvalidConfig(format!("loss `{}` listed twice", loss.label())));
        }
    }
    for &set in &config.sets {
        manifest.split(set)?;
    }
    if config.jobs == 0 {
        return Err(Error::InvalidConfig("jobs must be at least 1".into()));
    }

    let cells: Vec<(usize, usize)> = (0..config.losses.len())
        .flat_map(|l| (0..config.sets.len()).map(move |s| (l, s)))
        .collect();
    let run = |&(l, s): &(usize, usize)| run_cell(config, &config.losses[l], config.sets[s], manifest, out_dir, log);
    let results: Vec<Result<RunResult>> = if config.jobs == 1 {
        cells.iter().map(run).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.jobs)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
        pool.install(|| cells.par_iter().map(run).collect())
    };
    let mut results = results.into_iter().collect::<Result<Vec<_>>>()?.into_iter();

    let num_labels = config.base.network.num_labels;
    let losses = config
        .losses
        .iter()
        .map(|loss| {
            let runs: Vec<RunResult> = results.by_ref().take(config.sets.len()).collect();
            let per_label: Vec<Option<(f64, f64)>> = (0..num_labels)
                .map(|l| mean_std(&runs.iter().filter_map(|r| r.label_dice[l]).collect::<Vec<_>>()))
                .collect();
            let overall = mean_std(&runs.iter().filter_map(|r| r.mean_dice).collect::<Vec<_>>());
            LossReport {
                loss: loss.label(),
                config: loss.clone(),
                label_mean: per_label.iter().map(|m| m.map(|m| m.0)).collect(),
                label_std: per_label.iter().map(|m| m.map(|m| m.1)).collect(),
                overall_mean: overall.map(|m| m.0),
                overall_std: overall.map(|m| m.1),
                runs,
            }
        })
        .collect();
    Ok(EvalReport {
        num_labels,
        sets: config.sets.clone(),
        losses,
    })
}

/// Markdown table: one row per loss, one column per foreground label plus the
/// average, cells `mean±std` in percent.
pub fn comparison_table(report: &EvalReport) -> String {
    let cell = |m: Option<f64>, s: Option<f64>| match (m, s) {
        (Some(m), Some(s)) => format!("{:.1}±{:.1}", 100.0 * m, 100.0 * s),
        _ => "n/a".into(),
    };
    let mut out = String::from("| loss |");
    for l in 1..report.num_labels {
        out.push_str(&format!(" label {l} |"));
    }
    out.push_str(" average |\n|---|");
    out.push_str(&"---|".repeat(report.num_labels));
    out.push('\n');
    for r in &report.losses {
        out.push_str(&format!("| {} |", r.loss));
        for l in 1..report.num_labels {
            out.push_str(&format!(" {} |", cell(r.label_mean[l], r.label_std[l])));
        }
        out.push_str(&format!(" {} |\n", cell(r.overall_mean, r.overall_std)));
    }
    out
}

fn curve(report: &LossReport, value: impl Fn(&EpochRecord) -> Option<f64>) -> Series {
    let epochs = report.runs.iter().map(|r| r.log.len()).max().unwrap_or(0);
    let points = (0..epochs)
        .map(|e| {
            let v: Vec<f64> = report.runs.iter().filter_map(|r| r.log.get(e).and_then(&value)).collect();
            let y = if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
            ((e + 1) as f64, y)
        })
        .collect();
    Series {
        name: report.loss.clone(),
        points,
    }
}

/// Writes `report.json`, `table.md`, `dice_curves.svg` and `loss_curves.svg`.
pub fn write_suite_outputs(report: &EvalReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)? + "\n")?;
    fs::write(dir.join("table.md"), comparison_table(report))?;
    let dice = LinePlot {
        title: "Validation Dice vs. epoch (mean over sets)".into(),
        x_label: "epoch".into(),
        y_label: "mean foreground hard Dice".into(),
        series: report.losses.iter().map(|r| curve(r, |e| e.val_dice_mean)).collect(),
        markers: Vec::new(),
    };
    fs::write(dir.join("dice_curves.svg"), dice.to_svg())?;
    let loss = LinePlot {
        title: "Training loss vs. epoch (mean over sets)".into(),
        x_label: "epoch".into(),
        y_label: "training loss".into(),
        series: report.losses.iter().map(|r| curve(r, |e| Some(e.train_loss))).collect(),
        markers: Vec::new(),
    };
    fs::write(dir.join("loss_curves.svg"), loss.to_svg())?;
    Ok(())
}
