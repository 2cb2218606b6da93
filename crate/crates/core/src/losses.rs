//! Segmentation losses for highly unbalanced label sizes.
//!
//! Every loss is evaluated on a softmax probability tensor `L×D×H×W` against an
//! integer label map and returns both its value and its gradient with respect to
//! the probabilities. Reductions run in `f64`.
//!
//! The exponential logarithmic family applies `(-ln m)^γ` to a normalized metric
//! `m` (the soft Dice of a label, or the probability of the true label at a
//! voxel). With `0 < γ < 1` the gradient magnitude of `(-ln m)^γ` has an interior
//! minimum at `m = e^(γ-1)`, so both poorly and well segmented labels keep
//! receiving updates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrad::Tensor;

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-7;
/// Floor applied to `-ln x` inside backward passes when the exponent is below one.
pub const NEG_LOG_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `w_dice · L_dice + w_cross · L_cross`.
    ExpLogCombined,
    ExpLogDice,
    ExpCrossEntropy,
    LinearDice,
    Focal,
}

impl LossKind {
    pub fn short_name(self) -> &'static str {
        match self {
            LossKind::ExpLogCombined => "exp-log",
            LossKind::ExpLogDice => "log-dice",
            LossKind::ExpCrossEntropy => "wce",
            LossKind::LinearDice => "linear-dice",
            LossKind::Focal => "focal",
        }
    }

    pub fn from_short_name(name: &str) -> Option<Self> {
        Some(match name {
            "exp-log" => LossKind::ExpLogCombined,
            "log-dice" => LossKind::ExpLogDice,
            "wce" => LossKind::ExpCrossEntropy,
            "linear-dice" => LossKind::LinearDice,
            "focal" => LossKind::Focal,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    pub gamma_dice: f64,
    /// Exponent of the cross-entropy term; also the focusing exponent of the focal loss.
    pub gamma_cross: f64,
    /// Pseudocount added to numerator and denominator of every soft Dice.
    pub epsilon: f64,
    pub w_dice: f64,
    pub w_cross: f64,
    /// One weight per label; empty until training-set frequencies are known.
    pub label_weights: Vec<f64>,
    /// Whether the Dice mean runs over the background label as well.
    pub dice_include_background: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::ExpLogCombined,
            gamma_dice: 0.3,
            gamma_cross: 0.3,
            epsilon: 1.0,
            w_dice: 0.8,
            w_cross: 0.2,
            label_weights: Vec::new(),
            dice_include_background: true,
        }
    }
}

impl LossConfig {
    pub fn new(kind: LossKind) -> Self {
        let mut cfg = Self {
            kind,
            ..Self::default()
        };
        if matches!(kind, LossKind::Focal) {
            cfg.gamma_cross = 2.0;
        }
        cfg
    }

    /// Sets `gamma_dice` and `gamma_cross` together.
    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma_dice = gamma;
        self.gamma_cross = gamma;
        self
    }

    pub fn with_label_weights(mut self, weights: Vec<f64>) -> Self {
        self.label_weights = weights;
        self
    }

    /// Short identifier including the exponents that matter for this kind,
    /// e.g. `exp-log-g0.3` or `linear-dice`.
    pub fn label(&self) -> String {
        let name = self.kind.short_name();
        match self.kind {
            LossKind::LinearDice => name.to_string(),
            LossKind::ExpLogDice => format!("{name}-g{}", self.gamma_dice),
            LossKind::ExpLogCombined if self.gamma_dice != self.gamma_cross => {
                format!("{name}-g{}-{}", self.gamma_dice, self.gamma_cross)
            }
            _ => format!("{name}-g{}", self.gamma_cross),
        }
    }

    /// Whether the loss reads `label_weights`.
    pub fn uses_label_weights(&self) -> bool {
        matches!(
            self.kind,
            LossKind::ExpLogCombined | LossKind::ExpCrossEntropy | LossKind::Focal
        )
    }

    pub fn validate(&self, num_labels: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let gamma_ok = |g: f64| g.is_finite() && g > 0.0;
        match self.kind {
            LossKind::ExpLogCombined | LossKind::ExpLogDice if !gamma_ok(self.gamma_dice) => {
                return bad(format!("gamma_dice must be > 0, got {}", self.gamma_dice));
            }
            _ => {}
        }
        match self.kind {
            LossKind::ExpLogCombined | LossKind::ExpCrossEntropy if !gamma_ok(self.gamma_cross) => {
                return bad(format!("gamma_cross must be > 0, got {}", self.gamma_cross));
            }
            LossKind::Focal if !(self.gamma_cross.is_finite() && self.gamma_cross >= 0.0) => {
                return bad(format!("focal gamma must be >= 0, got {}", self.gamma_cross));
            }
            _ => {}
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return bad(format!("epsilon must be >= 0, got {}", self.epsilon));
        }
        if self.w_dice < 0.0 || self.w_cross < 0.0 || !self.w_dice.is_finite() || !self.w_cross.is_finite() {
            return bad("w_dice and w_cross must be finite and >= 0".into());
        }
        if self.kind == LossKind::ExpLogCombined && self.w_dice + self.w_cross <= 0.0 {
            return bad("w_dice + w_cross must be positive".into());
        }
        if self.uses_label_weights() {
            if self.label_weights.len() != num_labels {
                return bad(format!(
                    "{} label weights given for {num_labels} labels",
                    self.label_weights.len()
                ));
            }
            if self.label_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                return bad("label weights must be finite and >= 0".into());
            }
        }
        Ok(())
    }
}

/// Integer label field `D×H×W` with values in `[0, num_labels)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    extents: [usize; 3],
    labels: Vec<u8>,
    num_labels: usize,
}

impl GroundTruth {
    pub fn new(extents: [usize; 3], labels: Vec<u8>, num_labels: usize) -> Result<Self> {
        if extents.iter().product::<usize>() != labels.len() {
            return Err(Error::Shape {
                op: "ground_truth",
                detail: format!("extents {extents:?} vs {} labels", labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_labels) {
            return Err(Error::InvalidConfig(format!(
                "label value {bad} is not below num_labels {num_labels}"
            )));
        }
        Ok(Self {
            extents,
            labels,
            num_labels,
        })
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    /// The Kronecker-delta view `δ_il(x)` as an `L×D×H×W` tensor.
    pub fn one_hot(&self) -> Tensor {
        let n = self.labels.len();
        let mut t = Tensor::zeros(&[self.num_labels, self.extents[0], self.extents[1], self.extents[2]]);
        for (x, &l) in self.labels.iter().enumerate() {
            t.data_mut()[l as usize * n + x] = 1.0;
        }
        t
    }
}

/// Value of a loss and its gradient with respect to the probability tensor.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Tensor,
}

fn check_probs(probs: &Tensor, gt: &GroundTruth) -> Result<usize> {
    let (c, dims) = probs.dims4("loss")?;
    if c != gt.num_labels || dims != gt.extents {
        return Err(Error::Shape {
            op: "loss",
            detail: format!(
                "probabilities {:?} vs ground truth with {} labels on {:?}",
                probs.shape(),
                gt.num_labels,
                gt.extents
            ),
        });
    }
    Ok(dims.iter().product())
}

fn check_weights(weights: &[f64], num_labels: usize) -> Result<()> {
    if weights.len() != num_labels {
        return Err(Error::InvalidConfig(format!(
            "{} label weights given for {num_labels} labels",
            weights.len()
        )));
    }
    Ok(())
}

/// `w_l = ((Σ_k f_k) / f_l)^0.5`.
pub fn label_weights(frequencies: &[f64]) -> Result<Vec<f64>> {
    if let Some(label) = frequencies.iter().position(|&f| !(f > 0.0)) {
        return Err(Error::ZeroFrequency { label });
    }
    let total: f64 = frequencies.iter().sum();
    Ok(frequencies.iter().map(|&f| (total / f).sqrt()).collect())
}

/// `(-ln x)^γ`.
pub fn exp_log(x: f64, gamma: f64) -> f64 {
    (-x.ln()).max(0.0).powf(gamma)
}

/// `d/dx (-ln x)^γ = -γ (-ln x)^(γ-1) / x`.
pub fn exp_log_derivative(x: f64, gamma: f64) -> f64 {
    -gamma * (-x.ln()).powf(gamma - 1.0) / x
}

/// Derivative used by the backward passes: `-ln x` is floored at [`NEG_LOG_FLOOR`]
/// so the gradient stays bounded as `x → 1`.
fn exp_log_derivative_floored(x: f64, gamma: f64) -> f64 {
    let nl = (-x.ln()).max(NEG_LOG_FLOOR);
    -gamma * nl.powf(gamma - 1.0) / x
}

/// Per-label soft Dice sums: `numerator_i = 2 Σ δ p + ε`, `denominator_i = Σ (δ + p) + ε`.
struct SoftDiceSums {
    numer: Vec<f64>,
    denom: Vec<f64>,
}

impl SoftDiceSums {
    fn compute(probs: &Tensor, gt: &GroundTruth, epsilon: f64) -> Result<Self> {
        let n = check_probs(probs, gt)?;
        let l = gt.num_labels;
        let mut inter = vec![0.0f64; l];
        let mut count = vec![0.0f64; l];
        let mut psum = vec![0.0f64; l];
        for (x, &lab) in gt.labels.iter().enumerate() {
            inter[lab as usize] += probs.data()[lab as usize * n + x] as f64;
            count[lab as usize] += 1.0;
        }
        for (i, s) in psum.iter_mut().enumerate() {
            *s = probs.channel(i).iter().map(|&v| v as f64).sum();
        }
        Ok(Self {
            numer: inter.iter().map(|&v| 2.0 * v + epsilon).collect(),
            denom: count.iter().zip(&psum).map(|(c, p)| c + p + epsilon).collect(),
        })
    }

    fn dice(&self) -> Vec<f64> {
        self.numer.iter().zip(&self.denom).map(|(n, d)| n / d).collect()
    }

    /// Chains `dL/dDice_i` into `dL/dp_i(x) = dL/dDice_i · (2 δ_il(x) - Dice_i) / denom_i`.
    fn chain(&self, gt: &GroundTruth, dl_ddice: &[f64]) -> Tensor {
        let l = gt.num_labels;
        let n = gt.labels.len();
        let [d, h, w] = gt.extents;
        let dice = self.dice();
        let mut grad = vec![0.0f32; l * n];
        for i in 0..l {
            let base = -dl_ddice[i] * dice[i] / self.denom[i];
            grad[i * n..(i + 1) * n].fill(base as f32);
        }
        for (x, &lab) in gt.labels.iter().enumerate() {
            let i = lab as usize;
            grad[i * n + x] = (dl_ddice[i] * (2.0 - dice[i]) / self.denom[i]) as f32;
        }
        Tensor::new(vec![l, d, h, w], grad).expect("shape from ground truth")
    }
}

/// `Dice_i = (2 Σ_x δ_il(x) p_i(x) + ε) / (Σ_x (δ_il(x) + p_i(x)) + ε)` for every label,
/// including labels absent from `gt`.
pub fn soft_dice_per_label(probs: &Tensor, gt: &GroundTruth, epsilon: f64) -> Result<Vec<f64>> {
    Ok(SoftDiceSums::compute(probs, gt, epsilon)?.dice())
}

fn check_dice(dice: &[f64]) -> Result<()> {
    for (label, &value) in dice.iter().enumerate() {
        if !(value > 0.0 && value <= 1.0) {
            return Err(Error::DiceOutOfRange { label, value });
        }
    }
    Ok(())
}

/// Mean over labels of `(-ln Dice_i)^γ`.
pub fn exp_log_dice_loss(dice: &[f64], gamma_dice: f64) -> Result<f64> {
    check_dice(dice)?;
    Ok(dice.iter().map(|&d| exp_log(d, gamma_dice)).sum::<f64>() / dice.len() as f64)
}

/// `d/dDice_i` of [`exp_log_dice_loss`]. Zero at `Dice_i = 1` when `γ ≥ 1`;
/// floored as in [`NEG_LOG_FLOOR`] when `γ < 1`.
pub fn exp_log_dice_grad(dice: &[f64], gamma_dice: f64) -> Result<Vec<f64>> {
    check_dice(dice)?;
    let m = dice.len() as f64;
    Ok(dice
        .iter()
        .map(|&d| {
            if d == 1.0 && gamma_dice >= 1.0 {
                0.0
            } else {
                exp_log_derivative_floored(d, gamma_dice) / m
            }
        })
        .collect())
}

/// Indices of the labels averaged by the Dice terms.
fn dice_labels(num_labels: usize, include_background: bool) -> std::ops::Range<usize> {
    if include_background || num_labels < 2 {
        0..num_labels
    } else {
        1..num_labels
    }
}

/// Exponential logarithmic Dice loss evaluated from probabilities.
pub fn exp_log_dice(
    probs: &Tensor,
    gt: &GroundTruth,
    epsilon: f64,
    gamma_dice: f64,
    include_background: bool,
) -> Result<LossOutput> {
    let sums = SoftDiceSums::compute(probs, gt, epsilon)?;
    let dice = sums.dice();
    let range = dice_labels(gt.num_labels, include_background);
    let value = exp_log_dice_loss(&dice[range.clone()], gamma_dice)?;
    let sub = exp_log_dice_grad(&dice[range.clone()], gamma_dice)?;
    let mut dl = vec![0.0; gt.num_labels];
    dl[range].copy_from_slice(&sub);
    Ok(LossOutput {
        value,
        grad: sums.chain(gt, &dl),
    })
}

/// Mean over labels of `1 - Dice_i`, from precomputed Dice values.
pub fn linear_dice_value(dice: &[f64]) -> f64 {
    dice.iter().map(|d| 1.0 - d).sum::<f64>() / dice.len() as f64
}

/// Mean over labels of `1 - Dice_i`.
pub fn linear_dice_loss(probs: &Tensor, gt: &GroundTruth, epsilon: f64) -> Result<LossOutput> {
    linear_dice(probs, gt, epsilon, true)
}

fn linear_dice(probs: &Tensor, gt: &GroundTruth, epsilon: f64, include_background: bool) -> Result<LossOutput> {
    let sums = SoftDiceSums::compute(probs, gt, epsilon)?;
    let dice = sums.dice();
    let range = dice_labels(gt.num_labels, include_background);
    let m = range.len() as f64;
    let value = linear_dice_value(&dice[range.clone()]);
    let mut dl = vec![0.0; gt.num_labels];
    for i in range {
        dl[i] = -1.0 / m;
    }
    Ok(LossOutput {
        value,
        grad: sums.chain(gt, &dl),
    })
}

/// Per-voxel loss on the true-label probability, averaged over voxels.
/// `term(p, w)` returns the loss and its derivative with respect to `p`.
fn voxel_mean_loss(
    probs: &Tensor,
    gt: &GroundTruth,
    weights: &[f64],
    term: impl Fn(f64, f64) -> (f64, f64),
) -> Result<LossOutput> {
    let n = check_probs(probs, gt)?;
    check_weights(weights, gt.num_labels)?;
    let mut grad = Tensor::zeros(probs.shape());
    let g = grad.data_mut();
    let mut total = 0.0f64;
    for (x, &lab) in gt.labels.iter().enumerate() {
        let idx = lab as usize * n + x;
        let p = probs.data()[idx] as f64;
        let clamped = p.clamp(PROB_FLOOR, 1.0);
        let (v, dv) = term(clamped, weights[lab as usize]);
        total += v;
        if p == clamped {
            g[idx] = (dv / n as f64) as f32;
        }
    }
    Ok(LossOutput {
        value: total / n as f64,
        grad,
    })
}

/// Mean over voxels of `w_l(x) · (-ln p_l(x))^γ`, with `p` clamped to `[1e-7, 1]`.
pub fn weighted_exp_cross_entropy(
    probs: &Tensor,
    gt: &GroundTruth,
    weights: &[f64],
    gamma_cross: f64,
) -> Result<LossOutput> {
    voxel_mean_loss(probs, gt, weights, |p, w| {
        (w * exp_log(p, gamma_cross), w * exp_log_derivative_floored(p, gamma_cross))
    })
}

/// Mean over voxels of `w_l · (1 - p_l)^γ · (-ln p_l)`, with `p` clamped as above.
pub fn focal_loss(probs: &Tensor, gt: &GroundTruth, weights: &[f64], gamma: f64) -> Result<LossOutput> {
    voxel_mean_loss(probs, gt, weights, |p, w| {
        let q = 1.0 - p;
        let nl = -p.ln();
        let value = w * q.powf(gamma) * nl;
        let modulating_grad = if gamma == 0.0 {
            0.0
        } else if gamma < 1.0 {
            -gamma * q.max(NEG_LOG_FLOOR).powf(gamma - 1.0) * nl
        } else {
            -gamma * q.powf(gamma - 1.0) * nl
        };
        (value, w * (modulating_grad - q.powf(gamma) / p))
    })
}

/// `w_dice · L_dice + w_cross · L_cross`.
pub fn combined_loss(probs: &Tensor, gt: &GroundTruth, config: &LossConfig) -> Result<LossOutput> {
    if config.kind != LossKind::ExpLogCombined {
        return Err(Error::InvalidConfig(format!(
            "combined_loss needs kind exp_log_combined, got {:?}",
            config.kind
        )));
    }
    config.validate(gt.num_labels)?;
    let dice = exp_log_dice(
        probs,
        gt,
        config.epsilon,
        config.gamma_dice,
        config.dice_include_background,
    )?;
    let cross = weighted_exp_cross_entropy(probs, gt, &config.label_weights, config.gamma_cross)?;
    let mut grad = dice.grad;
    for (g, c) in grad.data_mut().iter_mut().zip(cross.grad.data()) {
        *g = (config.w_dice * *g as f64 + config.w_cross * *c as f64) as f32;
    }
    Ok(LossOutput {
        value: config.w_dice * dice.value + config.w_cross * cross.value,
        grad,
    })
}

/// Dispatches on `config.kind`.
pub fn evaluate(probs: &Tensor, gt: &GroundTruth, config: &LossConfig) -> Result<LossOutput> {
    config.validate(gt.num_labels)?;
    match config.kind {
        LossKind::ExpLogCombined => combined_loss(probs, gt, config),
        LossKind::ExpLogDice => exp_log_dice(
            probs,
            gt,
            config.epsilon,
            config.gamma_dice,
            config.dice_include_background,
        ),
        LossKind::ExpCrossEntropy => {
            weighted_exp_cross_entropy(probs, gt, &config.label_weights, config.gamma_cross)
        }
        LossKind::LinearDice => linear_dice(probs, gt, config.epsilon, config.dice_include_background),
        LossKind::Focal => focal_loss(probs, gt, &config.label_weights, config.gamma_cross),
    }
}
