//! `elseg`: generate phantoms, preprocess, train, evaluate, predict, run the
//! loss-comparison suite and plot the analytic loss curves.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use elseg_core::dataio::{self, Manifest, Phase};
use elseg_core::elnet::NetworkConfig;
use elseg_core::losses::{LossConfig, LossKind};
use elseg_core::synth::{self, PhantomSpec};
use elseg_core::trainer::{self, plot, SuiteConfig, TrainConfig, TrainOptions};

#[derive(Parser)]
#[command(name = "elseg", version, about = "Exponential logarithmic loss segmentation toolkit")]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset with a manifest and split sets.
    Gen(GenArgs),
    /// Resample an image/label pair to an isotropic cube of the given extent.
    Preprocess(PreprocessArgs),
    /// Train one network on one split set.
    Train(TrainArgs),
    /// Score a prediction (or a checkpoint's prediction) against ground truth.
    Eval(EvalArgs),
    /// Predict a label map with a checkpoint.
    Predict(PredictArgs),
    /// Train every loss on every split set and compare.
    Suite(SuiteArgs),
    /// Plot (-ln x)^γ for several γ next to the linear loss 1 - x.
    PlotLoss(PlotLossArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    subjects: usize,
    #[arg(long, default_value_t = 32)]
    extent: usize,
    #[arg(long, default_value_t = 5)]
    labels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated fractions of labels 1..L (default: desk fractions).
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
    /// Number of 70/30 split sets written to the manifest.
    #[arg(long, default_value_t = 5)]
    sets: usize,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 32)]
    extent: usize,
    #[arg(long)]
    out_image: PathBuf,
    #[arg(long)]
    out_labels: PathBuf,
}

fn positive_gamma(s: &str) -> Result<f64, String> {
    let g: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if g.is_finite() && g > 0.0 {
        Ok(g)
    } else {
        Err(format!("γ must be > 0, got {s}"))
    }
}

fn loss_kind(s: &str) -> Result<LossKind, String> {
    LossKind::from_short_name(s).ok_or_else(|| format!("unknown loss `{s}` (exp-log, log-dice, wce, linear-dice, focal)"))
}

/// Settings shared by `train` and `suite`. Unset flags leave the config file
/// (or the built-in desk defaults) in place.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// JSON training configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    wdice: Option<f64>,
    #[arg(long)]
    wcross: Option<f64>,
    /// Input cube extent of the network.
    #[arg(long)]
    extent: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    /// Start from the full-size network (base 24 channels, 128³ input).
    #[arg(long)]
    paper_scale: bool,
    #[arg(long)]
    lr: Option<f64>,
    /// Clip the gradient to this global L2 norm.
    #[arg(long)]
    clip_norm: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value_t = 0)]
    set: usize,
    #[arg(long, value_parser = loss_kind)]
    loss: Option<LossKind>,
    #[arg(long, value_parser = positive_gamma)]
    gamma: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Ground-truth label file.
    #[arg(long, required_unless_present = "manifest")]
    labels: Option<PathBuf>,
    /// Predicted label file.
    #[arg(long, conflicts_with = "checkpoint")]
    pred: Option<PathBuf>,
    /// Predict with this checkpoint instead of reading `--pred`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Image to predict from when `--checkpoint` is given.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Take image and labels of `--subject` from this manifest.
    #[arg(long, requires = "subject")]
    manifest: Option<PathBuf>,
    #[arg(long)]
    subject: Option<String>,
    /// Also write the Dice vector as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SuiteArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Losses to compare; `name:γ` sets the exponent (default `--gamma`).
    #[arg(long, value_delimiter = ',', default_value = "linear-dice,exp-log:0.3,exp-log:2")]
    losses: Vec<String>,
    #[arg(long, value_parser = positive_gamma, default_value_t = 0.3)]
    gamma: f64,
    /// Use split sets 0..N.
    #[arg(long, default_value_t = 5)]
    sets: usize,
    /// Runs trained in parallel.
    #[arg(long, env = "ELSEG_THREADS", default_value_t = 1)]
    jobs: usize,
    /// Train one run at a time. Results never depend on `--jobs`; this only
    /// pins the schedule.
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlotLossArgs {
    #[arg(long, value_delimiter = ',', value_parser = positive_gamma, default_value = "0.3,1,2")]
    gammas: Vec<f64>,
    #[arg(long, default_value_t = 400)]
    samples: usize,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match cli.command {
        Command::Gen(a) => gen(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Suite(a) => suite(a),
        Command::PlotLoss(a) => plot_loss(a),
    }
}

fn gen(a: GenArgs) -> Result<()> {
    let mut spec = PhantomSpec::desk(a.extent, a.labels, a.seed);
    if let Some(f) = a.fractions {
        spec.fractions = f;
    }
    spec.validate().context("invalid phantom specification")?;
    let m = synth::generate_dataset(&spec, a.subjects, a.sets, a.seed, &a.out)?;
    println!(
        "wrote {} subjects and {} split sets to {}",
        m.subjects.len(),
        m.splits.len(),
        a.out.display()
    );
    for l in &m.labels {
        let target = if l.id == 0 {
            1.0 - spec.fractions.iter().sum::<f64>()
        } else {
            spec.fractions[l.id - 1]
        };
        println!("  label {} ({}): measured {:.5}, target {:.5}", l.id, l.name, l.frequency, target);
    }
    Ok(())
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    let v = dataio::read_volume(&a.image)?;
    let m = dataio::read_labels(&a.labels)?;
    let (v, m) = dataio::preprocess(&v, &m, a.extent)?;
    dataio::write_volume(&a.out_image, &v)?;
    dataio::write_labels(&a.out_labels, &m)?;
    println!("wrote {}³ image and labels, spacing {:.4} mm", a.extent, v.spacing()[0]);
    Ok(())
}

/// Recursively overlays `patch` on `base`; objects merge, everything else replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

/// Built-in defaults < `--config` file < flags.
fn build_config(run: &RunArgs, manifest: &Manifest, loss: LossConfig) -> Result<TrainConfig> {
    let mut network = if run.paper_scale {
        NetworkConfig::paper_scale()
    } else {
        NetworkConfig::desk()
    };
    network.num_labels = manifest.num_labels();
    let mut value = serde_json::to_value(TrainConfig {
        network,
        ..TrainConfig::desk(loss)
    })?;
    if let Some(path) = &run.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let patch: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        merge(&mut value, patch);
    }
    let mut cfg: TrainConfig = serde_json::from_value(value).context("invalid training configuration")?;
    if let Some(e) = run.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = run.seed {
        cfg.seed = s;
    }
    if let Some(w) = run.wdice {
        cfg.loss.w_dice = w;
    }
    if let Some(w) = run.wcross {
        cfg.loss.w_cross = w;
    }
    if let Some(e) = run.extent {
        cfg.network.extent = e;
    }
    if let Some(c) = run.base_channels {
        cfg.network.base_channels = c;
    }
    if let Some(lr) = run.lr {
        cfg.optimizer.lr = lr;
    }
    if run.clip_norm.is_some() {
        cfg.optimizer.clip_norm = run.clip_norm;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    Manifest::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn train(a: TrainArgs) -> Result<()> {
    let manifest = load_manifest(&a.run.manifest)?;
    let mut loss = LossConfig::new(a.loss.unwrap_or(LossKind::ExpLogCombined));
    if let Some(g) = a.gamma {
        loss = loss.with_gamma(g);
    }
    let mut cfg = build_config(&a.run, &manifest, loss)?;
    // flags beat the config file for the loss as well
    if let Some(kind) = a.loss {
        cfg.loss.kind = kind;
    }
    if let Some(g) = a.gamma {
        cfg.loss = cfg.loss.with_gamma(g);
    }
    cfg.set = a.set;
    cfg.validate()?;
    let outcome = trainer::train(
        &cfg,
        &manifest,
        TrainOptions {
            out_dir: Some(&a.out),
            access_log: None,
        },
    )?;
    let last = outcome.log.last().expect("at least one epoch");
    println!(
        "trained {} on set {} for {} epochs: final loss {:.5}, validation Dice {}, best epoch {}",
        outcome.loss.label(),
        cfg.set,
        outcome.log.len(),
        last.train_loss,
        last.val_dice_mean.map_or("n/a".into(), |d| format!("{d:.4}")),
        outcome.best_epoch
    );
    println!("outputs in {}", a.out.display());
    Ok(())
}

fn print_dice(dice: &[Option<f64>]) {
    for (l, d) in dice.iter().enumerate() {
        match d {
            Some(d) => println!("label {l}: {d:.6}"),
            None => println!("label {l}: absent"),
        }
    }
    match trainer::foreground_mean(dice) {
        Some(m) => println!("mean (labels 1..): {m:.6}"),
        None => println!("mean (labels 1..): n/a"),
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let (image_path, labels_path, manifest) = match (&a.manifest, &a.subject) {
        (Some(mp), Some(id)) => {
            let m = load_manifest(mp)?;
            let s = m.subject(id)?;
            (Some(m.resolve(&s.image)), m.resolve(&s.labels), Some(m))
        }
        _ => (a.image.clone(), a.labels.clone().expect("clap requires --labels"), None),
    };
    let gt = dataio::read_labels(&labels_path)?;
    let pred = match (&a.pred, &a.checkpoint) {
        (Some(p), _) => dataio::read_labels(p)?,
        (None, Some(c)) => {
            let ckpt = trainer::load_checkpoint(c)?;
            let extent = ckpt.network.config().extent;
            let (image, gt_prepared) = match (&manifest, &a.subject) {
                (Some(m), Some(id)) => trainer::load_prepared(m, id, extent, Phase::Evaluation, None)?,
                _ => {
                    let path = image_path.context("--checkpoint needs --image or --manifest/--subject")?;
                    dataio::preprocess(&dataio::read_volume(&path)?, &gt, extent)?
                }
            };
            let p = trainer::predict(&ckpt.network, &image)?;
            let dice = trainer::hard_dice(&p.labels, &gt_prepared)?;
            return report_dice(&dice, a.json.as_deref());
        }
        (None, None) => bail!("give --pred or --checkpoint"),
    };
    let dice = trainer::hard_dice(&pred, &gt)?;
    report_dice(&dice, a.json.as_deref())
}

fn report_dice(dice: &[Option<f64>], json: Option<&Path>) -> Result<()> {
    print_dice(dice);
    if let Some(path) = json {
        fs::write(path, serde_json::to_string_pretty(dice)? + "\n")?;
    }
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let ckpt = trainer::load_checkpoint(&a.checkpoint)?;
    let image = dataio::read_volume(&a.image)?;
    let p = trainer::predict(&ckpt.network, &image)?;
    dataio::write_labels(&a.out, &p.labels)?;
    println!("predicted {} in {:.3} s", a.out.display(), p.seconds);
    Ok(())
}

fn parse_loss(spec: &str, default_gamma: f64) -> Result<LossConfig> {
    let (name, gamma) = match spec.split_once(':') {
        Some((n, g)) => (n, positive_gamma(g).map_err(anyhow::Error::msg)?),
        None => (spec, default_gamma),
    };
    let kind = loss_kind(name.trim()).map_err(anyhow::Error::msg)?;
    Ok(LossConfig::new(kind).with_gamma(gamma))
}

fn suite(a: SuiteArgs) -> Result<()> {
    let manifest = load_manifest(&a.run.manifest)?;
    let losses = a
        .losses
        .iter()
        .map(|s| parse_loss(s, a.gamma))
        .collect::<Result<Vec<_>>>()?;
    let base = build_config(&a.run, &manifest, losses[0].clone())?;
    let weights = (base.loss.w_dice, base.loss.w_cross);
    let losses = losses
        .into_iter()
        .map(|mut l| {
            (l.w_dice, l.w_cross) = weights;
            l
        })
        .collect();
    let config = SuiteConfig {
        base,
        losses,
        sets: (0..a.sets).collect(),
        jobs: if a.deterministic { 1 } else { a.jobs },
    };
    let report = trainer::run_suite(&config, &manifest, Some(&a.out), None)?;
    trainer::write_suite_outputs(&report, &a.out)?;
    print!("{}", trainer::comparison_table(&report));
    println!("report in {}", a.out.join("report.json").display());
    Ok(())
}

fn plot_loss(a: PlotLossArgs) -> Result<()> {
    let plot = plot::loss_curve_plot(&a.gammas, a.samples)?;
    fs::write(&a.out, plot.to_svg())?;
    for m in &plot.markers {
        println!("{}", m.label);
    }
    println!("wrote {}", a.out.display());
    Ok(())
}
