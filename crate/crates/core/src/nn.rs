//! Parameter storage, initialisation, the Adam optimizer, and the plain
//! (non-modulated) layers the networks are assembled from.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::layers::equalized_scale;
use crate::tensor::Tensor;

/// Named trainable leaves of one network, in registration order.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<(String, Var)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|(n, _)| *n != name),
            "duplicate parameter {name}"
        );
        let v = Var::param(value);
        self.entries.push((name, v.clone()));
        v
    }

    pub fn entries(&self) -> &[(String, Var)] {
        &self.entries
    }

    pub fn vars(&self) -> Vec<&Var> {
        self.entries.iter().map(|(_, v)| v).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.value().numel()).sum()
    }

    pub fn snapshot(&self) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .map(|(n, v)| (n.clone(), v.tensor()))
            .collect()
    }

    /// Overwrites every parameter from `tensors`; all names must be present.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.entries {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Corrupt(format!("missing tensor `{name}`")))?;
            var.set_value(t.clone())?;
        }
        Ok(())
    }
}

/// Registers parameters under a name prefix while drawing initial values
/// from a shared rng.
pub struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    prefix: String,
}

impl<'a, R: Rng> Init<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R, prefix: &str) -> Self {
        Self {
            store,
            rng,
            prefix: prefix.to_string(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Init<'_, R> {
        Init {
            store: self.store,
            rng: self.rng,
            prefix: format!("{}.{name}", self.prefix),
        }
    }

    pub fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    pub fn randn(&mut self, leaf: &str, shape: &[usize], std: f64) -> Var {
        let t = Tensor::randn(shape, self.rng).map(|v| v * std);
        let name = self.name(leaf);
        self.store.add(name, t)
    }

    pub fn constant(&mut self, leaf: &str, shape: &[usize], value: f64) -> Var {
        let name = self.name(leaf);
        self.store.add(name, Tensor::full(shape, value))
    }
}

/// How a layer's weights are parameterised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WeightInit {
    /// Stored directly, drawn from N(0, 2 / fan_in).
    He,
    /// Stored as unit normals and scaled by 1/sqrt(fan_in) on every use.
    Equalized,
}

impl WeightInit {
    fn make<R: Rng>(self, init: &mut Init<'_, R>, shape: &[usize], fan_in: usize) -> Var {
        match self {
            WeightInit::He => init.randn("weight", shape, (2.0 / fan_in as f64).sqrt()),
            WeightInit::Equalized => init.randn("weight", shape, 1.0),
        }
    }

    fn apply(self, raw: &Var, fan_in: usize) -> Var {
        match self {
            WeightInit::He => raw.clone(),
            WeightInit::Equalized => equalized_scale(raw, fan_in),
        }
    }
}

pub struct Linear {
    weight: Var,
    bias: Option<Var>,
    init: WeightInit,
    fan_in: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        input: usize,
        output: usize,
        mode: WeightInit,
        bias: Option<f64>,
    ) -> Self {
        let weight = mode.make(init, &[output, input], input);
        let bias = bias.map(|b| init.constant("bias", &[output], b));
        Self {
            weight,
            bias,
            init: mode,
            fan_in: input,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    /// `x`: `[B, in]` → `[B, out]`.
    pub fn forward(&self, x: &Var) -> Var {
        let w = self.init.apply(&self.weight, self.fan_in);
        let y = x.matmul(&w.t());
        match &self.bias {
            Some(b) => y.add(&b.reshape(&[1, b.shape()[0]])),
            None => y,
        }
    }
}

/// Stride-1 "same" convolution.
pub struct Conv {
    weight: Var,
    bias: Option<Var>,
    init: WeightInit,
    fan_in: usize,
}

impl Conv {
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        input: usize,
        output: usize,
        kernel: usize,
        mode: WeightInit,
        bias: bool,
    ) -> Self {
        let fan_in = input * kernel * kernel;
        let weight = mode.make(init, &[output, input, kernel, kernel], fan_in);
        let bias = bias.then(|| init.constant("bias", &[output], 0.0));
        Self {
            weight,
            bias,
            init: mode,
            fan_in,
        }
    }

    pub fn weight(&self) -> Var {
        self.init.apply(&self.weight, self.fan_in)
    }

    pub fn forward(&self, x: &Var) -> Var {
        let y = x.conv2d(&self.weight());
        match &self.bias {
            Some(b) => y.add(&b.reshape(&[1, b.shape()[0], 1, 1])),
            None => y,
        }
    }
}

/// Instance normalisation with a learned per-channel affine.
pub struct InstanceNorm {
    gamma: Var,
    beta: Var,
}

impl InstanceNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<R: Rng>(init: &mut Init<'_, R>, channels: usize) -> Self {
        Self {
            gamma: init.constant("gamma", &[channels], 1.0),
            beta: init.constant("beta", &[channels], 0.0),
        }
    }

    pub fn forward(&self, x: &Var) -> Var {
        let c = x.shape()[1];
        let mean = x.mean_axes(&[2, 3]);
        let centered = x.sub(&mean);
        let var = centered.square().mean_axes(&[2, 3]);
        let normed = centered.div(&var.add_scalar(Self::EPS).sqrt());
        normed
            .mul(&self.gamma.reshape(&[1, c, 1, 1]))
            .add(&self.beta.reshape(&[1, c, 1, 1]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Optimizer and schedule settings of one training stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
    pub batch_size: usize,
    pub steps: u64,
    /// Micro-batches whose gradients are averaged per update.
    #[serde(default = "default_accumulate")]
    pub accumulate: usize,
}

fn default_adam_eps() -> f64 {
    1e-8
}

fn default_accumulate() -> usize {
    1
}

impl OptimConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::Usage("optimizer needs lr > 0, betas in [0, 1) and eps > 0".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Usage("batch_size must be at least 2".into()));
        }
        if self.accumulate == 0 {
            return Err(Error::Usage("accumulate must be at least 1".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction. Moments are kept per parameter in store order.
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params
            .entries()
            .iter()
            .map(|(_, v)| Tensor::zeros(&v.shape()))
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::dim("gradient count does not match parameter count"));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, ((_, var), g)) in params.entries().iter().zip(grads).enumerate() {
            let mut value = var.tensor();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, (p, &gj)) in value.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *p -= lr * mh / (vh.sqrt() + eps);
            }
            var.set_value(value)?;
        }
        Ok(())
    }

    /// First and second moments, named after the parameters.
    pub fn state(&self, params: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * params.len());
        for (i, (name, _)) in params.entries().iter().enumerate() {
            out.push((format!("{name}#m"), self.m[i].clone()));
            out.push((format!("{name}#v"), self.v[i].clone()));
        }
        out
    }

    pub fn load_state(
        &mut self,
        params: &ParamStore,
        step: u64,
        tensors: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        for (i, (name, var)) in params.entries().iter().enumerate() {
            for (suffix, slot) in [("#m", &mut self.m[i]), ("#v", &mut self.v[i])] {
                let key = format!("{name}{suffix}");
                let t = tensors
                    .get(&key)
                    .ok_or_else(|| Error::Corrupt(format!("missing optimizer tensor `{key}`")))?;
                if t.shape() != var.shape().as_slice() {
                    return Err(Error::Corrupt(format!("optimizer tensor `{key}` has wrong shape")));
                }
                *slot = t.clone();
            }
        }
        self.step = step;
        Ok(())
    }
}

/// Averages per-parameter gradient lists produced by several micro-batches.
pub fn average_grads(parts: Vec<Vec<Tensor>>) -> Vec<Tensor> {
    let n = parts.len() as f64;
    let mut iter = parts.into_iter();
    let mut acc = iter.next().expect("at least one gradient set");
    for part in iter {
        for (a, p) in acc.iter_mut().zip(part) {
            a.data_mut()
                .iter_mut()
                .zip(p.data())
                .for_each(|(x, y)| *x += y);
        }
    }
    if n > 1.0 {
        for a in &mut acc {
            a.data_mut().iter_mut().for_each(|x| *x /= n);
        }
    }
    acc
}
