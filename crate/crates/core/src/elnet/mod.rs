//! Skip-connected, deeply supervised 3D encoder-decoder.
//!
//! Level `l` runs at `E / 2^l` resolution with `base · 2^l` channels. The encoder
//! applies one residual block per level with max pooling in between; the decoder
//! upsamples, halves channels with a 1×1×1 convolution, concatenates the encoder
//! peer and applies another block. Deep-supervision heads map intermediate decoder
//! outputs to label logits at full resolution; all logits are summed before a
//! single softmax.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrad::{BatchNormConfig, BatchNormMode, Graph, Mode, NodeId, ParamId, ParamStore, RunningMoments, Tensor};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, Section};

/// Upper bound on convolutions per block.
pub const MAX_CONVS: usize = 8;

/// `Block(n, k)`: `k` cascaded 3³ conv → batchnorm → relu units plus a 1×1×1
/// projection of the block input, added together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub channels: usize,
    pub convs: usize,
}

impl BlockSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::InvalidConfig("block channels must be at least 1".into()));
        }
        if !(1..=MAX_CONVS).contains(&self.convs) {
            return Err(Error::InvalidConfig(format!(
                "block conv count {} outside 1..={MAX_CONVS}",
                self.convs
            )));
        }
        Ok(())
    }

    /// Trainable scalars when fed `in_channels` channels.
    pub fn param_count(&self, in_channels: usize) -> usize {
        let n = self.channels;
        let first = 27 * in_channels * n + n + 2 * n;
        let rest = (self.convs - 1) * (27 * n * n + n + 2 * n);
        let skip = in_channels * n + n;
        first + rest + skip
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub levels: usize,
    pub base_channels: usize,
    /// Convolutions per block at each level, shallowest first.
    pub convs: Vec<usize>,
    pub num_labels: usize,
    /// Cubic input extent.
    pub extent: usize,
    pub noise_sigma: f32,
    pub dropout_rate: f32,
    pub deep_supervision: bool,
    #[serde(default)]
    pub supervise_deepest: bool,
    #[serde(default)]
    pub batchnorm: BatchNormConfig,
}

impl NetworkConfig {
    /// CPU-trainable instance: channels 6/12/24/48 on a 32³ grid with 5 labels.
    pub fn desk() -> Self {
        Self {
            levels: 4,
            base_channels: 6,
            convs: vec![1, 2, 3, 3],
            num_labels: 5,
            extent: 32,
            noise_sigma: 0.01,
            dropout_rate: 0.25,
            deep_supervision: true,
            supervise_deepest: false,
            batchnorm: BatchNormConfig::default(),
        }
    }

    /// Full-size instance: channels 24/48/96/192 on a 128³ grid with 20 labels.
    pub fn paper_scale() -> Self {
        Self {
            base_channels: 24,
            num_labels: 20,
            extent: 128,
            ..Self::desk()
        }
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn block(&self, level: usize) -> BlockSpec {
        BlockSpec {
            channels: self.channels(level),
            convs: self.convs[level],
        }
    }

    /// Decoder levels carrying a supervision head, shallowest first.
    pub fn head_levels(&self) -> Vec<usize> {
        if !self.deep_supervision {
            return Vec::new();
        }
        let last = if self.supervise_deepest {
            self.levels
        } else {
            self.levels - 1
        };
        (1..last).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.levels < 2 {
            return bad(format!("levels must be at least 2, got {}", self.levels));
        }
        if self.base_channels == 0 {
            return bad("base_channels must be at least 1".into());
        }
        if self.convs.len() != self.levels {
            return bad(format!(
                "convs schedule has {} entries for {} levels",
                self.convs.len(),
                self.levels
            ));
        }
        for l in 0..self.levels {
            self.block(l).validate()?;
        }
        if self.convs.windows(2).any(|w| w[1] < w[0]) {
            return bad(format!("convs schedule {:?} must be non-decreasing with depth", self.convs));
        }
        if self.num_labels < 2 {
            return bad(format!("num_labels must be at least 2, got {}", self.num_labels));
        }
        let div = 1usize << (self.levels - 1);
        if self.extent == 0 || self.extent % div != 0 {
            return bad(format!(
                "extent {} must be a positive multiple of 2^(levels-1) = {div}",
                self.extent
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be finite and non-negative", self.noise_sigma));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if !(self.batchnorm.var_floor > 0.0) || !(0.0..=1.0).contains(&self.batchnorm.momentum) {
            return bad("batchnorm var_floor must be positive and momentum in [0, 1]".into());
        }
        Ok(())
    }
}

/// Exact number of trainable scalars (conv kernels and biases, batchnorm scale and shift).
pub fn param_count(config: &NetworkConfig) -> Result<usize> {
    config.validate()?;
    let l_count = config.num_labels;
    let mut total = 0;
    for l in 0..config.levels {
        let input = if l == 0 { 1 } else { config.channels(l - 1) };
        total += config.block(l).param_count(input);
    }
    for l in 0..config.levels - 1 {
        let n = config.channels(l);
        total += config.channels(l + 1) * n + n;
        total += config.block(l).param_count(2 * n);
    }
    for l in config.head_levels() {
        total += config.channels(l) * l_count + l_count;
    }
    total += config.channels(0) * l_count + l_count;
    Ok(total)
}

#[derive(Debug, Clone, Copy)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct BnIds {
    scale: ParamId,
    shift: ParamId,
    moments: usize,
}

#[derive(Debug, Clone)]
struct BlockIds {
    main: Vec<(ConvIds, BnIds)>,
    skip: ConvIds,
}

#[derive(Debug, Clone)]
struct Layout {
    encoder: Vec<BlockIds>,
    /// Channel-halving convolutions after upsampling, indexed by target level.
    up: Vec<ConvIds>,
    decoder: Vec<BlockIds>,
    heads: Vec<(usize, ConvIds)>,
    out: ConvIds,
}

// Kernel variance is gain / fan_in: He for convolutions feeding batchnorm and
// relu, unit for the linear skip and upsampling projections so activations do
// not double at every block, and small for the logit layers so the initial
// softmax is close to uniform.
const HE_GAIN: f32 = 2.0;
const LINEAR_GAIN: f32 = 1.0;
const OUTPUT_GAIN: f32 = 0.01;

struct Builder<'a> {
    params: ParamStore,
    moments: Vec<(String, RunningMoments)>,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    /// Normal kernel with variance `gain / fan_in`, zero bias.
    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, gain: f32) -> ConvIds {
        let fan_in = (c_in * k * k * k) as f32;
        let normal = Normal::new(0.0, (gain / fan_in).sqrt()).expect("positive std");
        let rng = &mut *self.rng;
        let w = Tensor::from_fn(&[c_out, c_in, k, k, k], |_| normal.sample(rng));
        ConvIds {
            w: self.params.insert(format!("{name}.w"), w),
            b: self.params.insert(format!("{name}.b"), Tensor::zeros(&[c_out])),
        }
    }

    fn bn(&mut self, name: &str, c: usize) -> BnIds {
        self.moments.push((name.to_string(), RunningMoments::new(c)));
        BnIds {
            scale: self.params.insert(format!("{name}.scale"), Tensor::full(&[c], 1.0)),
            shift: self.params.insert(format!("{name}.shift"), Tensor::zeros(&[c])),
            moments: self.moments.len() - 1,
        }
    }

    fn block(&mut self, name: &str, spec: BlockSpec, c_in: usize) -> BlockIds {
        let n = spec.channels;
        let main = (0..spec.convs)
            .map(|j| {
                let from = if j == 0 { c_in } else { n };
                (self.conv(&format!("{name}.conv{j}"), from, n, 3, HE_GAIN), self.bn(&format!("{name}.bn{j}"), n))
            })
            .collect();
        let skip = self.conv(&format!("{name}.skip"), c_in, n, 1, LINEAR_GAIN);
        BlockIds { main, skip }
    }
}

/// Moments source for a forward pass.
enum Moments<'a> {
    Train(&'a mut [(String, RunningMoments)]),
    Infer(&'a [(String, RunningMoments)]),
}

#[derive(Debug, Clone)]
pub struct Network {
    config: NetworkConfig,
    params: ParamStore,
    moments: Vec<(String, RunningMoments)>,
    layout: Layout,
}

impl Network {
    /// Builds the network with normal weights drawn from `seed` (see the gain constants).
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            params: ParamStore::new(),
            moments: Vec::new(),
            rng: &mut rng,
        };
        let mut encoder = Vec::new();
        for l in 0..config.levels {
            let input = if l == 0 { 1 } else { config.channels(l - 1) };
            encoder.push(b.block(&format!("enc{l}"), config.block(l), input));
        }
        let mut up = Vec::new();
        let mut decoder = Vec::new();
        for l in 0..config.levels - 1 {
            let n = config.channels(l);
            up.push(b.conv(&format!("dec{l}.up"), config.channels(l + 1), n, 1, LINEAR_GAIN));
            decoder.push(b.block(&format!("dec{l}"), config.block(l), 2 * n));
        }
        let heads = config
            .head_levels()
            .into_iter()
            .map(|l| (l, b.conv(&format!("head{l}"), config.channels(l), config.num_labels, 1, OUTPUT_GAIN)))
            .collect();
        let out = b.conv("out", config.channels(0), config.num_labels, 1, OUTPUT_GAIN);
        let (params, moments) = (b.params, b.moments);
        Ok(Self {
            config,
            params,
            moments,
            layout: Layout {
                encoder,
                up,
                decoder,
                heads,
                out,
            },
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Batchnorm running moments by layer name, in construction order.
    pub fn moments(&self) -> &[(String, RunningMoments)] {
        &self.moments
    }

    pub fn moments_mut(&mut self) -> &mut [(String, RunningMoments)] {
        &mut self.moments
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Records the forward pass of `volume` (shape `1×E×E×E`) on `graph` and returns
    /// the node holding `L×E×E×E` label probabilities. Train mode draws noise and
    /// dropout masks from `rng` and folds batch moments into the running moments.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        graph: &mut Graph,
        volume: &Tensor,
        mode: Mode,
        rng: &mut R,
    ) -> Result<NodeId> {
        let moments = match mode {
            Mode::Train => Moments::Train(&mut self.moments),
            Mode::Infer => Moments::Infer(&self.moments),
        };
        run(&self.config, &self.params, &self.layout, moments, graph, volume, mode, rng)
    }

    /// Deterministic inference: running moments, no noise, no dropout.
    pub fn infer(&self, volume: &Tensor) -> Result<Tensor> {
        let mut graph = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = run(
            &self.config,
            &self.params,
            &self.layout,
            Moments::Infer(&self.moments),
            &mut graph,
            volume,
            Mode::Infer,
            &mut rng,
        )?;
        Ok(graph.value(out).clone())
    }
}

fn check_input(config: &NetworkConfig, volume: &Tensor) -> Result<()> {
    let e = config.extent;
    let expected = vec![1, e, e, e];
    if volume.shape() != expected.as_slice() {
        return Err(Error::ExtentMismatch {
            expected,
            found: volume.shape().to_vec(),
        });
    }
    Ok(())
}

fn apply_conv(g: &mut Graph, params: &ParamStore, ids: ConvIds, x: NodeId) -> Result<NodeId> {
    let (w, b) = (g.param(params, ids.w), g.param(params, ids.b));
    g.conv3d(x, w, b)
}

fn apply_block(
    g: &mut Graph,
    params: &ParamStore,
    moments: &mut Moments<'_>,
    bn_cfg: &BatchNormConfig,
    ids: &BlockIds,
    x: NodeId,
) -> Result<NodeId> {
    let mut h = x;
    for (c, bn) in &ids.main {
        h = apply_conv(g, params, *c, h)?;
        let (s, t) = (g.param(params, bn.scale), g.param(params, bn.shift));
        let mode = match moments {
            Moments::Train(m) => BatchNormMode::Train(&mut m[bn.moments].1),
            Moments::Infer(m) => BatchNormMode::Infer(&m[bn.moments].1),
        };
        h = g.batchnorm(h, s, t, mode, bn_cfg)?;
        h = g.relu(h);
    }
    let skip = apply_conv(g, params, ids.skip, x)?;
    g.add(h, skip)
}

#[allow(clippy::too_many_arguments)]
fn run<R: Rng + ?Sized>(
    config: &NetworkConfig,
    params: &ParamStore,
    layout: &Layout,
    mut moments: Moments<'_>,
    g: &mut Graph,
    volume: &Tensor,
    mode: Mode,
    rng: &mut R,
) -> Result<NodeId> {
    check_input(config, volume)?;
    let conv = |g: &mut Graph, ids: ConvIds, x: NodeId| apply_conv(g, params, ids, x);
    let mut block =
        |g: &mut Graph, ids: &BlockIds, x: NodeId| apply_block(g, params, &mut moments, &config.batchnorm, ids, x);

    let levels = config.levels;
    let x = g.input(volume.clone());
    let mut h = g.gaussian_noise(x, config.noise_sigma, mode, rng);
    let mut encoded = Vec::with_capacity(levels - 1);
    for (l, ids) in layout.encoder.iter().enumerate() {
        if l > 0 {
            h = g.maxpool3d(h)?;
        }
        h = block(g, ids, h)?;
        if l + 1 < levels {
            encoded.push(h);
        }
    }
    h = g.dropout(h, config.dropout_rate, mode, rng)?;

    let mut logits: Vec<NodeId> = Vec::new();
    let head = |g: &mut Graph, level: usize, h: NodeId, logits: &mut Vec<NodeId>| -> Result<()> {
        if let Some((_, ids)) = layout.heads.iter().find(|(l, _)| *l == level) {
            let mut y = conv(g, *ids, h)?;
            for _ in 0..level {
                y = g.upsample3d(y)?;
            }
            logits.push(y);
        }
        Ok(())
    };
    head(g, levels - 1, h, &mut logits)?;
    for l in (0..levels - 1).rev() {
        let up = g.upsample3d(h)?;
        let up = conv(g, layout.up[l], up)?;
        let cat = g.concat_channels(encoded[l], up)?;
        h = block(g, &layout.decoder[l], cat)?;
        if l > 0 {
            head(g, l, h, &mut logits)?;
        }
    }
    let mut sum = conv(g, layout.out, h)?;
    for y in logits {
        sum = g.add(sum, y)?;
    }
    g.softmax_channels(sum)
}

impl Network {
    /// Replaces every parameter and running moment with the named values, which
    /// must cover the network exactly with matching shapes.
    pub fn load_state(&mut self, params: Vec<(String, Tensor)>, moments: Vec<(String, RunningMoments)>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameter blocks for a network with {}",
                params.len(),
                self.params.len()
            )));
        }
        for (name, value) in params {
            let id = self
                .params
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            let slot = self.params.get_mut(id);
            if slot.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            *slot = value;
        }
        if moments.len() != self.moments.len() {
            return Err(Error::Checkpoint(format!(
                "{} batchnorm moment sets for a network with {}",
                moments.len(),
                self.moments.len()
            )));
        }
        for (name, m) in moments {
            let slot = self
                .moments
                .iter_mut()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown batchnorm layer `{name}`")))?;
            if slot.1.mean.len() != m.mean.len() || slot.1.var.len() != m.var.len() {
                return Err(Error::Checkpoint(format!("batchnorm `{name}` has the wrong channel count")));
            }
            slot.1 = m;
        }
        Ok(())
    }
}
