use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use super::ops::{self, BatchNormCache, BatchNormConfig, RunningMoments};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use super::Mode;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

/// How a batchnorm node sources its moments.
pub enum BatchNormMode<'a> {
    /// Batch statistics; the running moments are updated in place.
    Train(&'a mut RunningMoments),
    Infer(&'a RunningMoments),
}

enum Op {
    Input,
    Param(ParamId),
    Conv3d { input: NodeId, weight: NodeId, bias: NodeId },
    MaxPool { input: NodeId, argmax: Vec<u32> },
    Upsample { input: NodeId },
    BatchNorm { input: NodeId, scale: NodeId, shift: NodeId, cache: BatchNormCache },
    Relu { input: NodeId },
    Add { a: NodeId, b: NodeId },
    Concat { a: NodeId, b: NodeId },
    Scale { input: NodeId, factor: f32 },
    Passthrough { input: NodeId },
    Dropout { input: NodeId, mask: Vec<f32> },
    Softmax { input: NodeId },
    Sum { input: NodeId },
    Mean { input: NodeId },
    /// Scalar whose gradient with respect to `input` was computed externally.
    Loss { input: NodeId, grad: Tensor },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Define-by-run tape. Nodes are appended in evaluation order, so every input id
/// precedes its consumer.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of a backward pass: one gradient per parameter registered in the graph
/// (zeros when unreachable) and per input node.
#[derive(Debug, Clone)]
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor>,
    inputs: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn input(&self, id: NodeId) -> Option<&Tensor> {
        self.inputs.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(&k, v)| (k, v))
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor> {
        self.params
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push(Op::Param(id), store.get(id).clone())
    }

    pub fn conv3d(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let y = ops::conv3d(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.push(Op::Conv3d { input, weight, bias }, y))
    }

    pub fn maxpool3d(&mut self, input: NodeId) -> Result<NodeId> {
        let (y, argmax) = ops::maxpool3d(self.value(input))?;
        Ok(self.push(Op::MaxPool { input, argmax }, y))
    }

    pub fn upsample3d(&mut self, input: NodeId) -> Result<NodeId> {
        let y = ops::upsample3d(self.value(input))?;
        Ok(self.push(Op::Upsample { input }, y))
    }

    pub fn batchnorm(
        &mut self,
        input: NodeId,
        scale: NodeId,
        shift: NodeId,
        mode: BatchNormMode<'_>,
        cfg: &BatchNormConfig,
    ) -> Result<NodeId> {
        let (x, g, b) = (self.value(input), self.value(scale), self.value(shift));
        let (y, cache) = match mode {
            BatchNormMode::Train(running) => ops::batchnorm(x, g, b, Some(running), None, cfg)?,
            BatchNormMode::Infer(running) => ops::batchnorm(x, g, b, None, Some(running), cfg)?,
        };
        Ok(self.push(
            Op::BatchNorm {
                input,
                scale,
                shift,
                cache,
            },
            y,
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let y = ops::relu(self.value(input));
        self.push(Op::Relu { input }, y)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add { a, b }, y))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = ops::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(Op::Concat { a, b }, y))
    }

    pub fn scale(&mut self, input: NodeId, factor: f32) -> NodeId {
        let y = ops::scale(self.value(input), factor);
        self.push(Op::Scale { input, factor }, y)
    }

    pub fn softmax_channels(&mut self, input: NodeId) -> Result<NodeId> {
        let y = ops::softmax_channels(self.value(input))?;
        Ok(self.push(Op::Softmax { input }, y))
    }

    /// Additive N(0, σ²) noise in train mode; identity otherwise.
    pub fn gaussian_noise<R: Rng + ?Sized>(&mut self, input: NodeId, sigma: f32, mode: Mode, rng: &mut R) -> NodeId {
        let y = match mode {
            Mode::Train => ops::gaussian_noise(self.value(input), sigma, rng),
            Mode::Infer => self.value(input).clone(),
        };
        self.push(Op::Passthrough { input }, y)
    }

    /// Inverted dropout in train mode; identity otherwise.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: NodeId, rate: f32, mode: Mode, rng: &mut R) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidConfig(format!("dropout rate {rate} outside [0, 1)")));
        }
        match mode {
            Mode::Train => {
                let (y, mask) = ops::dropout(self.value(input), rate, rng);
                Ok(self.push(Op::Dropout { input, mask }, y))
            }
            Mode::Infer => {
                let y = self.value(input).clone();
                Ok(self.push(Op::Passthrough { input }, y))
            }
        }
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let y = Tensor::scalar(self.value(input).sum() as f32);
        self.push(Op::Sum { input }, y)
    }

    pub fn mean(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let y = Tensor::scalar((x.sum() / x.len() as f64) as f32);
        self.push(Op::Mean { input }, y)
    }

    /// Appends a scalar node with an externally computed value and gradient
    /// with respect to `input`.
    pub fn attach_loss(&mut self, input: NodeId, value: f64, grad: Tensor) -> Result<NodeId> {
        if grad.shape() != self.value(input).shape() {
            return Err(Error::Shape {
                op: "attach_loss",
                detail: format!(
                    "gradient {:?} does not match input {:?}",
                    grad.shape(),
                    self.value(input).shape()
                ),
            });
        }
        Ok(self.push(Op::Loss { input, grad }, Tensor::scalar(value as f32)))
    }

    /// Reverse-mode sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss { shape: shape.to_vec() });
        }
        self.backward_from(loss, Tensor::full(shape, 1.0))
    }

    /// Reverse-mode sweep seeded with an arbitrary upstream gradient.
    pub fn backward_from(&self, node: NodeId, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(node).shape() {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("seed {:?} vs node {:?}", seed.shape(), self.value(node).shape()),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..=node.0).map(|_| None).collect();
        grads[node.0] = Some(seed);
        let mut out = Gradients {
            params: BTreeMap::new(),
            inputs: HashMap::new(),
        };
        for node_ref in &self.nodes[..=node.0] {
            if let Op::Param(id) = node_ref.op {
                out.params.entry(id).or_insert_with(|| Tensor::zeros(node_ref.value.shape()));
            }
        }

        fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=node.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let n = &self.nodes[i];
            match &n.op {
                Op::Input => {
                    out.inputs.insert(NodeId(i), g);
                }
                Op::Param(id) => {
                    out.params.get_mut(id).expect("registered above").add_assign(&g);
                }
                Op::Conv3d { input, weight, bias } => {
                    let (dx, dw, db) = ops::conv3d_backward(self.value(*input), self.value(*weight), &g)?;
                    accumulate(&mut grads, *input, dx);
                    accumulate(&mut grads, *weight, dw);
                    accumulate(&mut grads, *bias, db);
                }
                Op::MaxPool { input, argmax } => {
                    let dx = ops::maxpool3d_backward(self.value(*input).shape(), argmax, &g);
                    accumulate(&mut grads, *input, dx);
                }
                Op::Upsample { input } => {
                    accumulate(&mut grads, *input, ops::upsample3d_backward(&g)?);
                }
                Op::BatchNorm {
                    input,
                    scale,
                    shift,
                    cache,
                } => {
                    let (dx, dg, db) = ops::batchnorm_backward(self.value(*input), self.value(*scale), cache, &g)?;
                    accumulate(&mut grads, *input, dx);
                    accumulate(&mut grads, *scale, dg);
                    accumulate(&mut grads, *shift, db);
                }
                Op::Relu { input } => {
                    accumulate(&mut grads, *input, ops::relu_backward(self.value(*input), &g));
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Concat { a, b } => {
                    let ca = self.value(*a).shape()[0];
                    let (ga, gb) = ops::split_channels(&g, ca)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale { input, factor } => {
                    accumulate(&mut grads, *input, ops::scale(&g, *factor));
                }
                Op::Passthrough { input } => accumulate(&mut grads, *input, g),
                Op::Dropout { input, mask } => {
                    let mut dx = g;
                    for (v, m) in dx.data_mut().iter_mut().zip(mask) {
                        *v *= m;
                    }
                    accumulate(&mut grads, *input, dx);
                }
                Op::Softmax { input } => {
                    accumulate(&mut grads, *input, ops::softmax_channels_backward(&n.value, &g)?);
                }
                Op::Sum { input } => {
                    let upstream = g.data()[0];
                    accumulate(&mut grads, *input, Tensor::full(self.value(*input).shape(), upstream));
                }
                Op::Mean { input } => {
                    let x = self.value(*input);
                    let upstream = g.data()[0] / x.len() as f32;
                    accumulate(&mut grads, *input, Tensor::full(x.shape(), upstream));
                }
                Op::Loss { input, grad } => {
                    accumulate(&mut grads, *input, ops::scale(grad, g.data()[0]));
                }
            }
        }
        Ok(out)
    }
}
