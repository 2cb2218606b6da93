//! Adam with Nesterov momentum (Nadam) using the momentum schedule
//! `μ_t = β1 · (1 − 0.5 · 0.96^(t · schedule_decay))`.
//!
//! With `M_t = μ_1 ⋯ μ_t`, one step is
//!
//! ```text
//! m ← β1 m + (1 − β1) g          v ← β2 v + (1 − β2) g²
//! m̂ = μ_{t+1} m / (1 − M_{t+1}) + (1 − μ_t) g / (1 − M_t)
//! v̂ = v / (1 − β2^t)
//! θ ← θ − lr · m̂ / (√v̂ + eps)
//! ```

use serde::{Deserialize, Serialize};

use crate::elnet::Section;
use crate::error::{Error, Result};
use crate::volgrad::{Gradients, ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NadamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// `t · schedule_decay` is the exponent of 0.96 in the momentum schedule.
    pub schedule_decay: f64,
    /// Rescale the gradient so its global L2 norm is at most this value.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl Default for NadamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule_decay: 1.0 / 250.0,
            clip_norm: None,
        }
    }
}

impl NadamConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} = {b} outside [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps {} must be positive", self.eps));
        }
        if !(self.schedule_decay >= 0.0 && self.schedule_decay.is_finite()) {
            return bad(format!("schedule decay {} must be non-negative", self.schedule_decay));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("clip norm {c} must be positive"));
            }
        }
        Ok(())
    }

    /// Momentum coefficient at step `t` (1-based).
    pub fn mu(&self, t: u64) -> f64 {
        self.beta1 * (1.0 - 0.5 * 0.96f64.powf(t as f64 * self.schedule_decay))
    }
}

/// Moments for every parameter of one store, in the store's (fixed) order.
#[derive(Debug, Clone, PartialEq)]
pub struct Nadam {
    config: NadamConfig,
    step: u64,
    mu_product: f64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    optimizer: String,
    step: u64,
    config: NadamConfig,
}

impl Nadam {
    pub fn new(config: NadamConfig, params: &ParamStore) -> Result<Self> {
        config.validate()?;
        let zeros = || params.iter().map(|(_, _, p)| Tensor::zeros(p.shape())).collect();
        Ok(Self {
            config,
            step: 0,
            mu_product: 1.0,
            first: zeros(),
            second: zeros(),
        })
    }

    pub fn config(&self) -> &NadamConfig {
        &self.config
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient are treated as having a
    /// zero gradient. Nothing is modified if any gradient entry is non-finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(Error::InvalidConfig(format!(
                "optimizer holds {} moment tensors for {} parameters",
                self.first.len(),
                params.len()
            )));
        }
        let mut sq = 0.0f64;
        for id in params.ids() {
            if let Some(g) = grads.param(id) {
                if g.shape() != params.get(id).shape() {
                    return Err(Error::Shape {
                        op: "nadam_step",
                        detail: format!(
                            "gradient of `{}` has shape {:?}, parameter {:?}",
                            params.name(id),
                            g.shape(),
                            params.get(id).shape()
                        ),
                    });
                }
                if g.data().iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFiniteGradient {
                        param: params.name(id).to_string(),
                    });
                }
                sq += g.data().iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>();
            }
        }
        let clip = match self.config.clip_norm {
            Some(c) if sq.sqrt() > c => c / sq.sqrt(),
            _ => 1.0,
        };

        let c = &self.config;
        let t = self.step + 1;
        let mu_t = c.mu(t);
        let mu_next = c.mu(t + 1);
        let prod_t = self.mu_product * mu_t;
        let prod_next = prod_t * mu_next;
        let bias2 = 1.0 - c.beta2.powf(t as f64);
        let (b1, b2) = (c.beta1, c.beta2);

        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = grads.param(id).map(Tensor::data);
            let m = self.first[k].data_mut();
            let v = self.second[k].data_mut();
            let w = params.get_mut(id).data_mut();
            for i in 0..w.len() {
                let gi = g.map_or(0.0, |g| f64::from(g[i]) * clip);
                let mi = b1 * f64::from(m[i]) + (1.0 - b1) * gi;
                let vi = b2 * f64::from(v[i]) + (1.0 - b2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let m_hat = mu_next * mi / (1.0 - prod_next) + (1.0 - mu_t) * gi / (1.0 - prod_t);
                let v_hat = vi / bias2;
                w[i] = (f64::from(w[i]) - c.lr * m_hat / (v_hat.sqrt() + c.eps)) as f32;
            }
        }
        self.step = t;
        self.mu_product = prod_t;
        Ok(())
    }

    /// Serializes the step count, hyperparameters and moments (`m.<name>`,
    /// `v.<name>`) for storage after the network in a checkpoint.
    pub fn to_section(&self, params: &ParamStore) -> Section {
        let header = Header {
            optimizer: "nadam".into(),
            step: self.step,
            config: self.config.clone(),
        };
        let mut blocks = Vec::with_capacity(2 * params.len());
        for (k, (_, name, _)) in params.iter().enumerate() {
            blocks.push((format!("m.{name}"), self.first[k].clone()));
            blocks.push((format!("v.{name}"), self.second[k].clone()));
        }
        Section {
            header: serde_json::to_value(header).expect("header serializes"),
            blocks,
        }
    }

    /// Inverse of [`Nadam::to_section`] for the same parameter set.
    pub fn from_section(section: &Section, params: &ParamStore) -> Result<Self> {
        let header: Header = serde_json::from_value(section.header.clone())
            .map_err(|e| Error::Checkpoint(format!("optimizer header: {e}")))?;
        if header.optimizer != "nadam" {
            return Err(Error::Checkpoint(format!("unsupported optimizer `{}`", header.optimizer)));
        }
        let mut opt = Self::new(header.config, params)?;
        if section.blocks.len() != 2 * params.len() {
            return Err(Error::Checkpoint(format!(
                "{} optimizer blocks for {} parameters",
                section.blocks.len(),
                params.len()
            )));
        }
        for (k, (_, name, p)) in params.iter().enumerate() {
            for (slot, prefix, block) in [
                (&mut opt.first[k], "m", &section.blocks[2 * k]),
                (&mut opt.second[k], "v", &section.blocks[2 * k + 1]),
            ] {
                if block.0 != format!("{prefix}.{name}") || block.1.shape() != p.shape() {
                    return Err(Error::Checkpoint(format!(
                        "optimizer block `{}` {:?} does not match `{prefix}.{name}` {:?}",
                        block.0,
                        block.1.shape(),
                        p.shape()
                    )));
                }
                *slot = block.1.clone();
            }
        }
        // replay the schedule so the product is bit-identical to an uninterrupted run
        for t in 1..=header.step {
            opt.mu_product *= opt.config.mu(t);
        }
        opt.step = header.step;
        Ok(opt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volgrad::Graph;

    fn store(values: &[f32]) -> ParamStore {
        let mut s = ParamStore::new();
        for (i, &v) in values.iter().enumerate() {
            s.insert(format!("p{i}"), Tensor::scalar(v));
        }
        s
    }

    /// Gradient of `Σ_i c_i · p_i` for the given coefficients.
    fn linear_grads(params: &ParamStore, coeff: &[f32]) -> Gradients {
        let mut g = Graph::new();
        let mut total = None;
        for (id, &c) in params.ids().zip(coeff) {
            let p = g.param(params, id);
            let term = g.scale(p, c);
            total = Some(match total {
                None => term,
                Some(t) => g.add(t, term).unwrap(),
            });
        }
        let loss = g.sum(total.unwrap());
        g.backward(loss).unwrap()
    }

    #[test]
    fn schedule_matches_closed_form() {
        let c = NadamConfig::default();
        assert!((c.mu(250) - 0.9 * (1.0 - 0.5 * 0.96)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = store(&[0.5, -2.0]);
        let before = p.clone();
        let mut opt = Nadam::new(NadamConfig::default(), &p).unwrap();
        let g = linear_grads(&p, &[0.0, 0.0]);
        for _ in 0..5 {
            opt.step(&mut p, &g).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(opt.step_count(), 5);
    }

    #[test]
    fn identical_parameters_update_identically() {
        let mut p = store(&[0.25, 0.25]);
        let mut opt = Nadam::new(NadamConfig::default(), &p).unwrap();
        for _ in 0..10 {
            let g = linear_grads(&p, &[0.7, 0.7]);
            opt.step(&mut p, &g).unwrap();
        }
        let v: Vec<f32> = p.iter().map(|(_, _, t)| t.data()[0]).collect();
        assert_eq!(v[0].to_bits(), v[1].to_bits());
    }

    #[test]
    fn clipping_bounds_the_effective_gradient() {
        let cfg = NadamConfig {
            clip_norm: Some(1.0),
            ..NadamConfig::default()
        };
        let (mut a, mut b) = (store(&[0.0]), store(&[0.0]));
        let mut oa = Nadam::new(cfg.clone(), &a).unwrap();
        let mut ob = Nadam::new(cfg, &b).unwrap();
        let (ga, gb) = (linear_grads(&a, &[1.0]), linear_grads(&b, &[100.0]));
        oa.step(&mut a, &ga).unwrap();
        ob.step(&mut b, &gb).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn section_round_trip_resumes_bit_identically() {
        let mut p = store(&[1.0, -1.0, 0.5]);
        let mut opt = Nadam::new(NadamConfig::default(), &p).unwrap();
        for _ in 0..3 {
            let g = linear_grads(&p, &[0.3, -1.2, 2.0]);
            opt.step(&mut p, &g).unwrap();
        }
        let mut resumed = Nadam::from_section(&opt.to_section(&p), &p).unwrap();
        assert_eq!(resumed, opt);
        let mut q = p.clone();
        let g = linear_grads(&p, &[0.3, -1.2, 2.0]);
        opt.step(&mut p, &g).unwrap();
        resumed.step(&mut q, &g).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn invalid_hyperparameters_are_rejected() {
        let p = store(&[0.0]);
        for cfg in [
            NadamConfig { lr: 0.0, ..NadamConfig::default() },
            NadamConfig { beta1: 1.0, ..NadamConfig::default() },
            NadamConfig { clip_norm: Some(-1.0), ..NadamConfig::default() },
        ] {
            assert!(Nadam::new(cfg, &p).is_err());
        }
    }
}
