//! Stage 1: multi-domain manipulation of semantic masks.
//!
//! Four networks: generator `G` (mask + domain style → mask logits),
//! discriminator `D` (one realness logit per domain), style encoder `S`
//! (mask → per-domain styles) and mapping network `F` (noise → per-domain
//! styles). Each domain has an absence and a presence head or branch.

mod networks;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use networks::{DomainNet, Generator, ManipNetworks, MappingNetwork};

use crate::autograd::{grad, grad_values, no_grad, Var};
use crate::data::{AttributeAssignment, Batch, SemanticMask};
use crate::error::{Error, Result};
use crate::nn::{average_grads, Adam, OptimConfig, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManipModelConfig {
    pub resolution: usize,
    pub num_classes: usize,
    /// Domain names, in style concatenation order.
    pub domains: Vec<String>,
    /// Style width per domain.
    pub style_widths: Vec<usize>,
    pub latent_dim: usize,
    pub mapping_width: usize,
    /// Spatial size after the generator's down-sampling path.
    pub bottleneck: usize,
    pub gen_base_channels: usize,
    pub disc_base_channels: usize,
    pub max_channels: usize,
    /// Every channel count is divided by this (toy scaling).
    pub channel_divisor: usize,
}

impl ManipModelConfig {
    pub fn paper() -> Self {
        Self {
            resolution: 256,
            num_classes: 19,
            domains: ["identity", "eyeglasses", "hat", "hair", "bangs", "earrings"]
                .map(String::from)
                .to_vec(),
            style_widths: vec![64, 16, 16, 16, 16, 16],
            latent_dim: 16,
            mapping_width: 512,
            bottleneck: 8,
            gen_base_channels: 32,
            disc_base_channels: 64,
            max_channels: 512,
            channel_divisor: 1,
        }
    }

    pub fn toy() -> Self {
        Self {
            resolution: 32,
            num_classes: 4,
            domains: vec!["eyeglasses".into()],
            style_widths: vec![16],
            channel_divisor: 8,
            ..Self::paper()
        }
    }

    pub fn style_dim(&self) -> usize {
        self.style_widths.iter().sum()
    }

    pub fn num_domains(&self) -> usize {
        self.style_widths.len()
    }

    /// Number of down-sampling (and up-sampling) stages in the generator.
    pub fn levels(&self) -> Result<usize> {
        let (r, b) = (self.resolution, self.bottleneck);
        if !r.is_power_of_two() || !b.is_power_of_two() || b > r || b < 2 {
            return Err(Error::Usage(format!(
                "resolution {r} and bottleneck {b} must be powers of two with 2 ≤ bottleneck ≤ resolution"
            )));
        }
        Ok((r / b).trailing_zeros() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        self.levels()?;
        if self.resolution < 8 {
            return Err(Error::Usage("manipulation resolution must be at least 8".into()));
        }
        if self.num_classes < 2 || self.num_classes > 256 {
            return Err(Error::Usage("num_classes must be in 2..=256".into()));
        }
        if self.domains.is_empty() || self.domains.len() != self.style_widths.len() {
            return Err(Error::Usage("domains and style_widths must be non-empty and equally long".into()));
        }
        let positive = [
            self.latent_dim,
            self.mapping_width,
            self.gen_base_channels,
            self.disc_base_channels,
            self.max_channels,
            self.channel_divisor,
        ];
        if positive.contains(&0) || self.style_widths.contains(&0) {
            return Err(Error::Usage("widths, channel counts and divisor must be positive".into()));
        }
        Ok(())
    }
}

/// Which domain heads carry the adversarial loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialHeads {
    /// Every domain at its target bit.
    All,
    /// Only domains whose target bit differs from the source bit.
    Changed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManipLossConfig {
    pub lambda_rec: f64,
    pub lambda_sty: f64,
    pub lambda_sd: f64,
    /// λ_sd decays linearly to zero over this many steps; 0 keeps it fixed.
    pub sd_decay_steps: u64,
    pub r1_gamma: f64,
    pub adversarial_heads: AdversarialHeads,
}

impl ManipLossConfig {
    pub fn paper() -> Self {
        Self {
            lambda_rec: 1.0,
            lambda_sty: 1.0,
            lambda_sd: 20.0,
            sd_decay_steps: 200_000,
            r1_gamma: 1.0,
            adversarial_heads: AdversarialHeads::All,
        }
    }

    pub fn lambda_sd_at(&self, step: u64) -> f64 {
        if self.sd_decay_steps == 0 {
            return self.lambda_sd;
        }
        self.lambda_sd * (1.0 - step as f64 / self.sd_decay_steps as f64).max(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let l = [self.lambda_rec, self.lambda_sty, self.lambda_sd, self.r1_gamma];
        if l.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Usage("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

impl ManipNetworks {
    /// Per-domain styles from noise, using branch `(i, target_i)`.
    pub fn map_style(&self, z: &Var, target: &[AttributeAssignment]) -> Result<Var> {
        self.mapping.forward(z, target)
    }

    /// Per-domain styles of `x`, using head `(i, domains_i)`.
    pub fn encode_style(&self, x: &Var, domains: &[AttributeAssignment]) -> Result<Var> {
        self.encoder.forward(x, domains)
    }

    /// Mask logits.
    pub fn generate(&self, x: &Var, style: &Var) -> Result<Var> {
        self.generator.forward(x, style)
    }

    /// Realness logits `[B, N]`, head `(i, domains_i)` per domain.
    pub fn discriminate(&self, x: &Var, domains: &[AttributeAssignment]) -> Result<Var> {
        self.discriminator.forward(x, domains)
    }
}

/// Mean absolute difference.
pub fn l1(a: &Var, b: &Var) -> Var {
    a.sub(b).abs().mean()
}

/// `mean |S(x_fake)_target − ŝ|`.
pub fn loss_style_reconstruction(
    nets: &ManipNetworks,
    x_fake: &Var,
    target: &[AttributeAssignment],
    s_hat: &Var,
) -> Result<Var> {
    Ok(l1(&nets.encode_style(x_fake, target)?, s_hat))
}

/// `mean |fake_a − fake_b|` between two generations of the same input.
pub fn loss_diversity(fake_a: &Var, fake_b: &Var) -> Var {
    l1(fake_a, fake_b)
}

/// Cycle term: the source style is re-encoded from `x` with its graph cut,
/// so `S` receives no gradient from this loss.
pub fn loss_cycle(
    nets: &ManipNetworks,
    x: &Var,
    y_real: &[AttributeAssignment],
    x_fake: &Var,
) -> Result<Var> {
    let s_tilde = nets.encode_style(x, y_real)?.detach();
    let rec = nets.generate(x_fake, &s_tilde)?.softmax_channels();
    Ok(l1(x, &rec))
}

/// Weighted mean of `softplus(sign · logits)`.
fn weighted_softplus(logits: &Var, weights: &Tensor, sign: f64) -> Var {
    let total: f64 = weights.data().iter().sum::<f64>().max(1.0);
    logits
        .scale(sign)
        .softplus()
        .mul(&Var::constant(weights.clone()))
        .sum()
        .scale(1.0 / total)
}

/// Non-saturating generator term: `softplus(−D(fake))`.
pub fn adversarial_g(fake_logits: &Var, weights: &Tensor) -> Var {
    weighted_softplus(fake_logits, weights, -1.0)
}

/// Discriminator terms `(softplus(−D(real)), softplus(D(fake)))`.
pub fn adversarial_d(real_logits: &Var, fake_logits: &Var, weights: &Tensor) -> (Var, Var) {
    (
        weighted_softplus(real_logits, weights, -1.0),
        weighted_softplus(fake_logits, weights, 1.0),
    )
}

/// `½ · mean_b ‖∇_x Σ_i D(x)_{b,i} / N‖²`; `x` must be a leaf that requires
/// grad and `real_logits` must have been computed from it.
pub fn r1_penalty(real_logits: &Var, x: &Var) -> Var {
    let s = real_logits.shape();
    let out = real_logits.mean_axes(&[1]).sum();
    match grad(&out, &[x], true).pop().flatten() {
        Some(g) => g.square().sum().scale(0.5 / s[0] as f64),
        None => Var::scalar(0.0),
    }
}

/// Head weights `[B, N]` for the adversarial terms.
pub fn head_weights(mode: AdversarialHeads, source: &[AttributeAssignment], target: &[AttributeAssignment]) -> Tensor {
    let n = source.first().map_or(0, |a| a.len());
    let data = source
        .iter()
        .zip(target)
        .flat_map(|(s, t)| {
            (0..n).map(move |i| match mode {
                AdversarialHeads::All => 1.0,
                AdversarialHeads::Changed => (s.get(i) != t.get(i)) as u8 as f64,
            })
        })
        .collect();
    Tensor::from_vec(&[source.len(), n], data)
}

/// Scalar losses of one step, as logged.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ManipLosses {
    pub d_real: f64,
    pub d_fake: f64,
    pub r1: f64,
    pub d_total: f64,
    pub g_adv: f64,
    pub sty: f64,
    pub sd: f64,
    pub cyc: f64,
    pub g_total: f64,
    pub lambda_sd: f64,
}

impl ManipLosses {
    pub fn fields(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("d_real", self.d_real),
            ("d_fake", self.d_fake),
            ("r1", self.r1),
            ("d_total", self.d_total),
            ("g_adv", self.g_adv),
            ("sty", self.sty),
            ("sd", self.sd),
            ("cyc", self.cyc),
            ("g_total", self.g_total),
            ("lambda_sd", self.lambda_sd),
        ]
    }

    fn add_scaled(&mut self, other: &ManipLosses, w: f64) {
        self.d_real += w * other.d_real;
        self.d_fake += w * other.d_fake;
        self.r1 += w * other.r1;
        self.d_total += w * other.d_total;
        self.g_adv += w * other.g_adv;
        self.sty += w * other.sty;
        self.sd += w * other.sd;
        self.cyc += w * other.cyc;
        self.g_total += w * other.g_total;
        self.lambda_sd = other.lambda_sd;
    }

    fn all_finite(&self) -> bool {
        self.fields().iter().all(|(_, v)| v.is_finite())
    }
}

/// The generator-side objective split into its terms.
pub struct GeneratorObjective {
    pub adv: Var,
    pub sty: Var,
    pub sd: Var,
    pub cyc: Var,
    pub total: Var,
}

/// Per-micro-batch random draws, fixed before the D and G phases.
struct Draws {
    target: Vec<AttributeAssignment>,
    z1: Tensor,
    z2: Tensor,
}

/// Networks, optimizers, step counter and rng: everything a step reads.
pub struct ManipTrainer {
    pub model: ManipModelConfig,
    pub loss: ManipLossConfig,
    pub optim: OptimConfig,
    pub nets: ManipNetworks,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub opt_s: Adam,
    pub opt_f: Adam,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl ManipTrainer {
    /// Parameters come from stream 0 of `seed`, training draws from stream 1.
    pub fn new(model: ManipModelConfig, loss: ManipLossConfig, optim: OptimConfig, seed: u64) -> Result<Self> {
        model.validate()?;
        loss.validate()?;
        optim.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
        let nets = ManipNetworks::new(&model, &mut init_rng)?;
        let adam = optim.adam();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Ok(Self {
            opt_g: Adam::new(adam, &nets.g_params),
            opt_d: Adam::new(adam, &nets.d_params),
            opt_s: Adam::new(adam, &nets.s_params),
            opt_f: Adam::new(adam, &nets.f_params),
            nets,
            model,
            loss,
            optim,
            step: 0,
            rng,
        })
    }

    fn draws(&mut self, batch: &Batch) -> Draws {
        let mut order: Vec<usize> = (0..batch.len()).collect();
        order.shuffle(&mut self.rng);
        let target = order.iter().map(|&i| batch.labels[i].clone()).collect();
        let shape = [batch.len(), self.model.latent_dim];
        Draws {
            target,
            z1: Tensor::randn(&shape, &mut self.rng),
            z2: Tensor::randn(&shape, &mut self.rng),
        }
    }

    /// Discriminator loss terms `(real, fake, r1, total)` on one batch.
    pub fn discriminator_objective(
        &self,
        batch: &Batch,
        target: &[AttributeAssignment],
        z: &Tensor,
    ) -> Result<(Var, Var, Var, Var)> {
        let nets = &self.nets;
        let weights = head_weights(self.loss.adversarial_heads, &batch.labels, target);
        let x = Var::param(batch.masks.clone());
        let real_logits = nets.discriminate(&x, &batch.labels)?;
        let r1 = if self.loss.r1_gamma > 0.0 {
            r1_penalty(&real_logits, &x)
        } else {
            Var::scalar(0.0)
        };
        let fake = {
            let _g = no_grad();
            let s = nets.map_style(&Var::constant(z.clone()), target)?;
            nets.generate(&Var::constant(batch.masks.clone()), &s)?
                .softmax_channels()
                .tensor()
        };
        let fake_logits = nets.discriminate(&Var::constant(fake), target)?;
        let (real, fake) = adversarial_d(&real_logits, &fake_logits, &weights);
        let total = real.add(&fake).add(&r1.scale(self.loss.r1_gamma));
        Ok((real, fake, r1, total))
    }

    /// Generator-side objective with λ_sd at `lambda_sd`.
    pub fn generator_objective(
        &self,
        batch: &Batch,
        target: &[AttributeAssignment],
        z1: &Tensor,
        z2: &Tensor,
        lambda_sd: f64,
    ) -> Result<GeneratorObjective> {
        let nets = &self.nets;
        let weights = head_weights(self.loss.adversarial_heads, &batch.labels, target);
        let x = Var::constant(batch.masks.clone());
        let s_hat = nets.map_style(&Var::constant(z1.clone()), target)?;
        let fake = nets.generate(&x, &s_hat)?.softmax_channels();
        let adv = adversarial_g(&nets.discriminate(&fake, target)?, &weights);
        let sty = loss_style_reconstruction(nets, &fake, target, &s_hat)?;
        let s_hat2 = nets.map_style(&Var::constant(z2.clone()), target)?;
        let fake2 = nets.generate(&x, &s_hat2)?.softmax_channels().detach();
        let sd = loss_diversity(&fake, &fake2);
        let cyc = loss_cycle(nets, &x, &batch.labels, &fake)?;
        let total = adv
            .add(&cyc.scale(self.loss.lambda_rec))
            .add(&sty.scale(self.loss.lambda_sty))
            .sub(&sd.scale(lambda_sd));
        Ok(GeneratorObjective {
            adv,
            sty,
            sd,
            cyc,
            total,
        })
    }

    fn generator_stores(&self) -> [&ParamStore; 3] {
        [&self.nets.g_params, &self.nets.s_params, &self.nets.f_params]
    }

    /// One update: `D` on every micro-batch, then `G`, `S`, `F` jointly.
    /// Gradients are averaged over `batches` (gradient accumulation).
    /// On a non-finite loss or gradient nothing is updated.
    pub fn train_step(&mut self, batches: &[Batch]) -> Result<ManipLosses> {
        if batches.is_empty() {
            return Err(Error::Usage("train_step needs at least one batch".into()));
        }
        let draws: Vec<Draws> = batches.iter().map(|b| self.draws(b)).collect();
        let lambda_sd = self.loss.lambda_sd_at(self.step);
        let w = 1.0 / batches.len() as f64;
        let mut report = ManipLosses::default();

        let mut d_grads = Vec::new();
        for (batch, d) in batches.iter().zip(&draws) {
            let (real, fake, r1, total) = self.discriminator_objective(batch, &d.target, &d.z1)?;
            report.add_scaled(
                &ManipLosses {
                    d_real: real.item(),
                    d_fake: fake.item(),
                    r1: r1.item(),
                    d_total: total.item(),
                    lambda_sd,
                    ..Default::default()
                },
                w,
            );
            d_grads.push(grad_values(&total, &self.nets.d_params.vars()));
        }
        let d_grads = average_grads(d_grads);
        check_step("discriminator", &report, &d_grads)?;
        self.opt_d.update(&self.nets.d_params, &d_grads)?;

        let mut g_grads = Vec::new();
        for (batch, d) in batches.iter().zip(&draws) {
            let obj = self.generator_objective(batch, &d.target, &d.z1, &d.z2, lambda_sd)?;
            report.add_scaled(
                &ManipLosses {
                    g_adv: obj.adv.item(),
                    sty: obj.sty.item(),
                    sd: obj.sd.item(),
                    cyc: obj.cyc.item(),
                    g_total: obj.total.item(),
                    lambda_sd,
                    ..Default::default()
                },
                w,
            );
            let params: Vec<&crate::autograd::Var> =
                self.generator_stores().iter().flat_map(|s| s.vars()).collect();
            g_grads.push(grad_values(&obj.total, &params));
        }
        let mut g_grads = average_grads(g_grads);
        check_step("generator", &report, &g_grads)?;
        let s_grads = g_grads.split_off(self.nets.g_params.len());
        let (s_grads, f_grads) = {
            let mut s = s_grads;
            let f = s.split_off(self.nets.s_params.len());
            (s, f)
        };
        self.opt_g.update(&self.nets.g_params, &g_grads)?;
        self.opt_s.update(&self.nets.s_params, &s_grads)?;
        self.opt_f.update(&self.nets.f_params, &f_grads)?;
        self.step += 1;
        Ok(report)
    }

    /// Parameters and optimizer moments, keyed by name.
    pub fn tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let opts = [&self.opt_g, &self.opt_d, &self.opt_s, &self.opt_f];
        for (store, opt) in self.nets.stores().into_iter().zip(opts) {
            out.extend(store.snapshot());
            out.extend(opt.state(store));
        }
        out
    }

    pub fn load_tensors(&mut self, tensors: &BTreeMap<String, Tensor>, step: u64) -> Result<()> {
        let opts = [&mut self.opt_g, &mut self.opt_d, &mut self.opt_s, &mut self.opt_f];
        for (store, opt) in self.nets.stores().into_iter().zip(opts) {
            store.load(tensors)?;
            opt.load_state(store, step, tensors)?;
        }
        self.step = step;
        Ok(())
    }
}

fn check_step(phase: &str, report: &ManipLosses, grads: &[Tensor]) -> Result<()> {
    if !report.all_finite() {
        let terms: Vec<String> = report.fields().iter().map(|(k, v)| format!("{k}={v}")).collect();
        return Err(Error::Numeric(format!("{phase} loss is not finite: {}", terms.join(", "))));
    }
    if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
        return Err(Error::Numeric(format!("{phase} gradient {i} is not finite")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranslateMode {
    Latent,
    Reference,
}

/// Translates each mask of `x` (`[B, R, H, W]`) to `target`, taking the
/// style from fresh noise or from the matching reference mask. Outputs are
/// argmax masks (ties to the lowest class).
pub fn translate<G: Rng + ?Sized>(
    nets: &ManipNetworks,
    x: &Tensor,
    mode: TranslateMode,
    reference: Option<&Tensor>,
    target: &[AttributeAssignment],
    rng: &mut G,
) -> Result<Vec<SemanticMask>> {
    let _g = no_grad();
    let b = x.shape()[0];
    let style = match mode {
        TranslateMode::Latent => {
            let z = Tensor::randn(&[b, nets.mapping_latent_dim()], rng);
            nets.map_style(&Var::constant(z), target)?
        }
        TranslateMode::Reference => {
            let r = reference.ok_or_else(|| Error::Usage("reference mode needs a reference mask".into()))?;
            if r.shape() != x.shape() {
                return Err(Error::dim(format!(
                    "reference {:?} does not match input {:?}",
                    r.shape(),
                    x.shape()
                )));
            }
            nets.encode_style(&Var::constant(r.clone()), target)?
        }
    };
    let logits = nets.generate(&Var::constant(x.clone()), &style)?.tensor();
    split_argmax(&logits)
}

/// Translation followed by reconstruction with the source style; returns
/// the reconstructed masks.
pub fn cycle_reconstruct<G: Rng + ?Sized>(
    nets: &ManipNetworks,
    x: &Tensor,
    source: &[AttributeAssignment],
    target: &[AttributeAssignment],
    rng: &mut G,
) -> Result<Vec<SemanticMask>> {
    let _g = no_grad();
    let b = x.shape()[0];
    let xv = Var::constant(x.clone());
    let z = Tensor::randn(&[b, nets.mapping_latent_dim()], rng);
    let fake = nets
        .generate(&xv, &nets.map_style(&Var::constant(z), target)?)?
        .softmax_channels();
    let rec = nets.generate(&fake, &nets.encode_style(&xv, source)?)?.tensor();
    split_argmax(&rec)
}

fn split_argmax(logits: &Tensor) -> Result<Vec<SemanticMask>> {
    let s = logits.shape();
    let per = s[1] * s[2] * s[3];
    (0..s[0])
        .map(|i| {
            let one = Tensor::from_vec(&s[1..], logits.data()[i * per..(i + 1) * per].to_vec());
            SemanticMask::argmax(&one)
        })
        .collect()
}

impl ManipNetworks {
    pub fn mapping_latent_dim(&self) -> usize {
        self.mapping.latent_dim()
    }
}

/// Stacks masks into a `[B, R, H, W]` one-hot tensor.
pub fn stack_masks(masks: &[&SemanticMask]) -> Result<Tensor> {
    let first = masks.first().ok_or_else(|| Error::Usage("no masks".into()))?;
    let shape = [first.num_classes(), first.height(), first.width()];
    let mut data = Vec::new();
    for m in masks {
        if [m.num_classes(), m.height(), m.width()] != shape {
            return Err(Error::dim("masks differ in shape"));
        }
        data.extend_from_slice(m.to_onehot().data());
    }
    Ok(Tensor::from_vec(&[masks.len(), shape[0], shape[1], shape[2]], data))
}

#[cfg(test)]
mod tests;
