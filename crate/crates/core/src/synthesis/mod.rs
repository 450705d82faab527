//! Stage 2: RGB synthesis from a semantic mask and a per-region style
//! matrix, trained by alternating random-style and reference-style updates.

mod networks;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use networks::{
    mask_at, mask_coverage, SynthDiscriminator, SynthEncoder, SynthGenerator, SynthMapping, SynthNetworks,
};

use crate::autograd::{grad, grad_values, no_grad, Var};
use crate::data::{Batch, SemanticMask};
use crate::error::{Error, Result};
use crate::manipulation::l1;
use crate::nn::{average_grads, Adam, OptimConfig, ParamStore};
use crate::tensor::Tensor;

pub const START_RESOLUTIONS: [usize; 4] = [4, 8, 16, 32];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthModelConfig {
    pub resolution: usize,
    pub num_classes: usize,
    /// Width of each style matrix row.
    pub style_dim: usize,
    /// Spatial size at which the SAC trunk starts.
    pub start_resolution: usize,
    pub channel_divisor: usize,
    pub mapping_layers: usize,
}

impl SynthModelConfig {
    pub fn paper() -> Self {
        Self {
            resolution: 256,
            num_classes: 19,
            style_dim: 64,
            start_resolution: 8,
            channel_divisor: 1,
            mapping_layers: 8,
        }
    }

    pub fn toy() -> Self {
        Self {
            resolution: 32,
            num_classes: 4,
            channel_divisor: 8,
            ..Self::paper()
        }
    }

    pub fn scaled(&self, channels: usize) -> usize {
        (channels / self.channel_divisor).max(1)
    }

    fn steps_below_output(&self, r: usize) -> u32 {
        (self.resolution / r).trailing_zeros()
    }

    /// Generator width at spatial size `r`, counted back from the output.
    pub fn generator_channels(&self, r: usize) -> usize {
        self.scaled([128, 256, 256, 512][self.steps_below_output(r).min(3) as usize])
    }

    /// Discriminator width at spatial size `r`, counted back from the input.
    pub fn discriminator_channels(&self, r: usize) -> usize {
        self.scaled([128, 256, 512][self.steps_below_output(r).min(2) as usize])
    }

    /// Resolution at which the mask feature extractor reads the mask.
    pub fn extractor_resolution(&self) -> usize {
        self.start_resolution.max(self.resolution / 4)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.resolution;
        if !r.is_power_of_two() || r < 8 {
            return Err(Error::Usage(format!("resolution {r} must be a power of two ≥ 8")));
        }
        let s = self.start_resolution;
        if !s.is_power_of_two() || s < 4 || s > r {
            return Err(Error::Usage(format!(
                "start_resolution {s} must be a power of two in 4..={r}"
            )));
        }
        if self.num_classes < 2 || self.num_classes > 256 {
            return Err(Error::Usage("num_classes must be in 2..=256".into()));
        }
        if self.style_dim == 0 || self.channel_divisor == 0 || self.mapping_layers == 0 {
            return Err(Error::Usage("style_dim, channel_divisor and mapping_layers must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthLossConfig {
    pub lambda_feat: f64,
    pub r1_gamma: f64,
    /// R1 is applied on every `r1_every`-th discriminator update, scaled by
    /// `r1_every`.
    pub r1_every: u64,
}

impl SynthLossConfig {
    pub fn paper() -> Self {
        Self {
            lambda_feat: 10.0,
            r1_gamma: 10.0,
            r1_every: 16,
        }
    }

    pub fn toy() -> Self {
        Self {
            r1_gamma: 1.0,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_feat >= 0.0 && self.r1_gamma >= 0.0) || self.r1_every == 0 {
            return Err(Error::Usage("lambda_feat and r1_gamma must be ≥ 0, r1_every ≥ 1".into()));
        }
        Ok(())
    }
}

impl SynthNetworks {
    pub fn synth_generate(&self, mask: &Tensor, sm: &Var, noise: &[Tensor]) -> Result<Var> {
        self.generator.forward(mask, sm, noise)
    }

    pub fn synth_encode(&self, x: &Var, mask: &Tensor) -> Result<Var> {
        self.encoder.forward(x, mask)
    }

    pub fn synth_map(&self, z: &Var) -> Result<Var> {
        self.mapping.forward(z)
    }

    pub fn sample_latent<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Tensor {
        Tensor::randn(&[batch, self.mapping.latent_width()], rng)
    }
}

/// `Σ_i mean |D⁽ⁱ⁾(real) − D⁽ⁱ⁾(fake)|` over the given feature lists.
pub fn feature_matching_loss(real: &[Var], fake: &[Var]) -> Result<Var> {
    if real.len() != fake.len() {
        return Err(Error::dim("feature lists differ in length"));
    }
    let mut total = Var::scalar(0.0);
    for (r, f) in real.iter().zip(fake) {
        if r.shape() != f.shape() {
            return Err(Error::dim(format!("feature shapes {:?} and {:?} differ", r.shape(), f.shape())));
        }
        total = total.add(&l1(r, f));
    }
    Ok(total)
}

/// `½ · mean_b ‖∇_x D(x)_b‖²` for a leaf `x`.
pub fn r1_penalty(logits: &Var, x: &Var) -> Var {
    let b = logits.shape()[0];
    match grad(&logits.sum(), &[x], true).pop().flatten() {
        Some(g) => g.square().sum().scale(0.5 / b as f64),
        None => Var::scalar(0.0),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Random,
    Reference,
}

impl StepKind {
    /// Even steps are random-style updates, odd steps reference updates.
    pub fn of_step(step: u64) -> Self {
        if step % 2 == 0 {
            StepKind::Random
        } else {
            StepKind::Reference
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthLosses {
    pub kind: StepKind,
    pub d_real: f64,
    pub d_fake: f64,
    /// NaN on steps without the lazy R1 term.
    pub r1: f64,
    pub d_total: f64,
    pub g_adv: f64,
    pub feat: f64,
    pub g_total: f64,
    /// Reconstruction L1 of the generated batch (reference steps only,
    /// NaN otherwise).
    pub rec_l1: f64,
}

impl SynthLosses {
    fn empty(kind: StepKind) -> Self {
        Self {
            kind,
            d_real: 0.0,
            d_fake: 0.0,
            r1: f64::NAN,
            d_total: 0.0,
            g_adv: 0.0,
            feat: 0.0,
            g_total: 0.0,
            rec_l1: f64::NAN,
        }
    }

    pub fn fields(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("reference", (self.kind == StepKind::Reference) as u8 as f64),
            ("d_real", self.d_real),
            ("d_fake", self.d_fake),
            ("r1", self.r1),
            ("d_total", self.d_total),
            ("g_adv", self.g_adv),
            ("feat", self.feat),
            ("g_total", self.g_total),
            ("rec_l1", self.rec_l1),
        ]
    }

    fn check(&self) -> Result<()> {
        let terms = [self.d_real, self.d_fake, self.d_total, self.g_adv, self.feat, self.g_total];
        if terms.iter().all(|v| v.is_finite()) && !self.r1.is_infinite() {
            return Ok(());
        }
        let all: Vec<String> = self.fields().iter().map(|(k, v)| format!("{k}={v}")).collect();
        Err(Error::Numeric(format!("non-finite synthesis loss: {}", all.join(", "))))
    }
}

fn check_grads(phase: &str, grads: &[Tensor]) -> Result<()> {
    match grads.iter().position(|g| !g.all_finite()) {
        Some(i) => Err(Error::Numeric(format!("{phase} gradient {i} is not finite"))),
        None => Ok(()),
    }
}

struct Draws {
    z: Option<Tensor>,
    noise: Vec<Tensor>,
}

pub struct SynthTrainer {
    pub model: SynthModelConfig,
    pub loss: SynthLossConfig,
    pub optim: OptimConfig,
    pub nets: SynthNetworks,
    pub opt_g: Adam,
    pub opt_e: Adam,
    pub opt_f: Adam,
    pub opt_d: Adam,
    pub step: u64,
    /// Discriminator updates so far; drives the lazy R1 schedule.
    pub d_steps: u64,
    pub random_steps: u64,
    pub reference_steps: u64,
    pub rng: ChaCha8Rng,
}

impl SynthTrainer {
    pub fn new(model: SynthModelConfig, loss: SynthLossConfig, optim: OptimConfig, seed: u64) -> Result<Self> {
        model.validate()?;
        loss.validate()?;
        optim.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
        let nets = SynthNetworks::new(&model, &mut init_rng)?;
        let adam = optim.adam();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Ok(Self {
            opt_g: Adam::new(adam, &nets.g_params),
            opt_e: Adam::new(adam, &nets.e_params),
            opt_f: Adam::new(adam, &nets.f_params),
            opt_d: Adam::new(adam, &nets.d_params),
            nets,
            model,
            loss,
            optim,
            step: 0,
            d_steps: 0,
            random_steps: 0,
            reference_steps: 0,
            rng,
        })
    }

    fn draws(&mut self, batch: &Batch, kind: StepKind) -> Draws {
        let z = (kind == StepKind::Random).then(|| self.nets.sample_latent(batch.len(), &mut self.rng));
        let noise = self.nets.generator.sample_noise(batch.len(), &mut self.rng);
        Draws { z, noise }
    }

    fn images(batch: &Batch) -> Result<&Tensor> {
        batch
            .images
            .as_ref()
            .ok_or_else(|| Error::Usage("synthesis batches need RGB images".into()))
    }

    /// Style matrix for the step: mapped noise or the encoded reference.
    fn style(&self, batch: &Batch, draws: &Draws) -> Result<Var> {
        match &draws.z {
            Some(z) => self.nets.synth_map(&Var::constant(z.clone())),
            None => self.nets.synth_encode(&Var::constant(Self::images(batch)?.clone()), &batch.masks),
        }
    }

    /// Discriminator objective `(real, fake, r1?, total)`.
    pub fn discriminator_objective(
        &self,
        batch: &Batch,
        fake: &Tensor,
        with_r1: bool,
    ) -> Result<(Var, Var, Option<Var>, Var)> {
        let x = Var::param(Self::images(batch)?.clone());
        let (_, real_logits) = self.nets.discriminator.forward(&x)?;
        let (_, fake_logits) = self.nets.discriminator.forward(&Var::constant(fake.clone()))?;
        let real = real_logits.neg().softplus().mean();
        let fake = fake_logits.softplus().mean();
        let mut total = real.add(&fake);
        let r1 = with_r1.then(|| r1_penalty(&real_logits, &x));
        if let Some(r1) = &r1 {
            total = total.add(&r1.scale(self.loss.r1_gamma * self.loss.r1_every as f64));
        }
        Ok((real, fake, r1, total))
    }

    /// Generator objective `(adv, feat, total)`; `feat` is zero on random
    /// steps.
    pub fn generator_objective(&self, batch: &Batch, fake: &Var, kind: StepKind) -> Result<(Var, Var, Var)> {
        let (fake_feats, fake_logits) = self.nets.discriminator.forward(fake)?;
        let adv = fake_logits.neg().softplus().mean();
        let feat = match kind {
            StepKind::Random => Var::scalar(0.0),
            StepKind::Reference => {
                let real = Var::constant(Self::images(batch)?.clone());
                let (real_feats, _) = self.nets.discriminator.forward(&real)?;
                let real_feats: Vec<Var> = real_feats.iter().map(Var::detach).collect();
                feature_matching_loss(&real_feats, &fake_feats)?
            }
        };
        let total = adv.add(&feat.scale(self.loss.lambda_feat));
        Ok((adv, feat, total))
    }

    /// One alternating update. Even steps: mapped style, `G`/`F` and `D`.
    /// Odd steps: encoded style, `G`/`E` (with feature matching) and `D`.
    pub fn train_step(&mut self, batches: &[Batch]) -> Result<SynthLosses> {
        if batches.is_empty() {
            return Err(Error::Usage("train_step needs at least one batch".into()));
        }
        let kind = StepKind::of_step(self.step);
        let draws: Vec<Draws> = batches.iter().map(|b| self.draws(b, kind)).collect();
        let with_r1 = self.loss.r1_gamma > 0.0 && self.d_steps % self.loss.r1_every == 0;
        let w = 1.0 / batches.len() as f64;
        let mut report = SynthLosses::empty(kind);
        if with_r1 {
            report.r1 = 0.0;
        }

        let mut d_grads = Vec::new();
        for (batch, d) in batches.iter().zip(&draws) {
            let fake = {
                let _g = no_grad();
                self.nets.synth_generate(&batch.masks, &self.style(batch, d)?, &d.noise)?.tensor()
            };
            let (real, fake_t, r1, total) = self.discriminator_objective(batch, &fake, with_r1)?;
            report.d_real += w * real.item();
            report.d_fake += w * fake_t.item();
            report.d_total += w * total.item();
            if let Some(r1) = r1 {
                report.r1 += w * r1.item();
            }
            d_grads.push(grad_values(&total, &self.nets.d_params.vars()));
        }
        report.check()?;
        let d_grads = average_grads(d_grads);
        check_grads("discriminator", &d_grads)?;
        self.opt_d.update(&self.nets.d_params, &d_grads)?;
        self.d_steps += 1;

        let second = match kind {
            StepKind::Random => &self.nets.f_params,
            StepKind::Reference => &self.nets.e_params,
        };
        let params: Vec<&Var> = self.nets.g_params.vars().into_iter().chain(second.vars()).collect();
        let mut g_grads = Vec::new();
        for (batch, d) in batches.iter().zip(&draws) {
            let fake = self.nets.synth_generate(&batch.masks, &self.style(batch, d)?, &d.noise)?;
            if kind == StepKind::Reference {
                let rec = l1(&fake, &Var::constant(Self::images(batch)?.clone())).item();
                report.rec_l1 = if report.rec_l1.is_nan() { w * rec } else { report.rec_l1 + w * rec };
            }
            let (adv, feat, total) = self.generator_objective(batch, &fake, kind)?;
            report.g_adv += w * adv.item();
            report.feat += w * feat.item();
            report.g_total += w * total.item();
            g_grads.push(grad_values(&total, &params));
        }
        report.check()?;
        let mut g_grads = average_grads(g_grads);
        check_grads("generator", &g_grads)?;
        let second_grads = g_grads.split_off(self.nets.g_params.len());
        self.opt_g.update(&self.nets.g_params, &g_grads)?;
        match kind {
            StepKind::Random => {
                self.opt_f.update(&self.nets.f_params, &second_grads)?;
                self.random_steps += 1;
            }
            StepKind::Reference => {
                self.opt_e.update(&self.nets.e_params, &second_grads)?;
                self.reference_steps += 1;
            }
        }
        self.step += 1;
        Ok(report)
    }

    fn optimizers(&self) -> [(&ParamStore, &Adam); 4] {
        [
            (&self.nets.g_params, &self.opt_g),
            (&self.nets.e_params, &self.opt_e),
            (&self.nets.f_params, &self.opt_f),
            (&self.nets.d_params, &self.opt_d),
        ]
    }

    pub fn tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (store, opt) in self.optimizers() {
            out.extend(store.snapshot());
            out.extend(opt.state(store));
        }
        out
    }

    /// Restores parameters and moments. Optimizer step counts follow the
    /// alternation schedule implied by `step`.
    pub fn load_tensors(&mut self, tensors: &BTreeMap<String, Tensor>, step: u64) -> Result<()> {
        let random = step.div_ceil(2);
        let reference = step / 2;
        let counts = [step, reference, random, step];
        let opts = [&mut self.opt_g, &mut self.opt_e, &mut self.opt_f, &mut self.opt_d];
        let stores = [&self.nets.g_params, &self.nets.e_params, &self.nets.f_params, &self.nets.d_params];
        for ((store, opt), count) in stores.into_iter().zip(opts).zip(counts) {
            store.load(tensors)?;
            opt.load_state(store, count, tensors)?;
        }
        self.step = step;
        self.d_steps = step;
        self.random_steps = random;
        self.reference_steps = reference;
        Ok(())
    }

    /// Mean reference reconstruction L1 over `batch` with fixed noise
    /// fields drawn from `noise_seed`.
    pub fn reference_l1(&self, batch: &Batch, noise_seed: u64) -> Result<f64> {
        let _g = no_grad();
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let noise = self.nets.generator.sample_noise(batch.len(), &mut rng);
        let x = Var::constant(Self::images(batch)?.clone());
        let sm = self.nets.synth_encode(&x, &batch.masks)?;
        let fake = self.nets.synth_generate(&batch.masks, &sm, &noise)?;
        Ok(l1(&fake, &x).item())
    }
}

/// Renders every frame with the same style matrix `sm` (`[1, R, S]`) and
/// the same noise fields, drawn once from `noise_seed`.
pub fn reenact(nets: &SynthNetworks, frames: &[SemanticMask], sm: &Tensor, noise_seed: u64) -> Result<Vec<Tensor>> {
    let first = frames.first().ok_or_else(|| Error::Usage("no frames to reenact".into()))?;
    let shape = (first.num_classes(), first.height(), first.width());
    let _g = no_grad();
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise = nets.generator.sample_noise(1, &mut rng);
    let sm = Var::constant(sm.clone());
    frames
        .iter()
        .map(|f| {
            if (f.num_classes(), f.height(), f.width()) != shape {
                return Err(Error::dim("reenactment frames differ in shape"));
            }
            let m = f.to_onehot();
            let m = m.reshape(&[1, shape.0, shape.1, shape.2])?;
            let img = nets.synth_generate(&m, &sm, &noise)?.tensor();
            img.reshape(&[3, shape.1, shape.2])
        })
        .collect()
}
