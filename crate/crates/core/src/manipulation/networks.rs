//! Generator, discriminator / style encoder and mapping network of the
//! mask manipulation stage.

use rand::Rng;

use super::ManipModelConfig;
use crate::autograd::Var;
use crate::data::AttributeAssignment;
use crate::error::{Error, Result};
use crate::layers::{ModConvLayer, LEAKY_SLOPE};
use crate::nn::{Conv, Init, InstanceNorm, Linear, ParamStore, WeightInit};
use crate::tensor::Tensor;

fn scaled(channels: usize, divisor: usize) -> usize {
    (channels / divisor).max(1)
}

/// Pre-activation residual block with an optional 2× average-pool and
/// optional instance norm; output is `(shortcut + residual) / sqrt(2)`.
struct ResBlock {
    norm1: Option<InstanceNorm>,
    conv1: Conv,
    norm2: Option<InstanceNorm>,
    conv2: Conv,
    shortcut: Option<Conv>,
    downsample: bool,
}

impl ResBlock {
    fn new<R: Rng>(init: &mut Init<'_, R>, input: usize, output: usize, normalize: bool, downsample: bool) -> Self {
        let norm1 = normalize.then(|| InstanceNorm::new(&mut init.sub("norm1"), input));
        let conv1 = Conv::new(&mut init.sub("conv1"), input, input, 3, WeightInit::He, true);
        let norm2 = normalize.then(|| InstanceNorm::new(&mut init.sub("norm2"), input));
        let conv2 = Conv::new(&mut init.sub("conv2"), input, output, 3, WeightInit::He, true);
        let shortcut =
            (input != output).then(|| Conv::new(&mut init.sub("shortcut"), input, output, 1, WeightInit::He, false));
        Self {
            norm1,
            conv1,
            norm2,
            conv2,
            shortcut,
            downsample,
        }
    }

    fn forward(&self, x: &Var) -> Var {
        let mut sc = match &self.shortcut {
            Some(c) => c.forward(x),
            None => x.clone(),
        };
        if self.downsample {
            sc = sc.avgpool2();
        }
        let mut h = x.clone();
        if let Some(n) = &self.norm1 {
            h = n.forward(&h);
        }
        h = self.conv1.forward(&h.leaky_relu(LEAKY_SLOPE));
        if self.downsample {
            h = h.avgpool2();
        }
        if let Some(n) = &self.norm2 {
            h = n.forward(&h);
        }
        h = self.conv2.forward(&h.leaky_relu(LEAKY_SLOPE));
        sc.add(&h).scale(std::f64::consts::FRAC_1_SQRT_2)
    }
}

/// Encoder–decoder generator. The encoder is residual with instance norm;
/// every decoder layer is a modulated convolution driven by the
/// concatenated domain style.
pub struct Generator {
    stem: Conv,
    down: Vec<ResBlock>,
    middle: Vec<ResBlock>,
    bottleneck: Vec<ModConvLayer>,
    up: Vec<ModConvLayer>,
    to_mask: ModConvLayer,
    resolution: usize,
    classes: usize,
    style_dim: usize,
}

impl Generator {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, cfg: &ManipModelConfig) -> Result<Self> {
        let levels = cfg.levels()?;
        let ch = |i: usize| scaled((cfg.gen_base_channels << i).min(cfg.max_channels), cfg.channel_divisor);
        let style_dim = cfg.style_dim();
        let stem = Conv::new(&mut init.sub("stem"), cfg.num_classes, ch(0), 3, WeightInit::He, true);
        let down = (0..levels)
            .map(|i| ResBlock::new(&mut init.sub(&format!("down{i}")), ch(i), ch(i + 1), true, true))
            .collect();
        let c = ch(levels);
        let middle = (0..2)
            .map(|i| ResBlock::new(&mut init.sub(&format!("mid{i}")), c, c, true, false))
            .collect();
        let bottleneck = (0..2)
            .map(|i| ModConvLayer::new(&mut init.sub(&format!("neck{i}")), style_dim, c, c, 3, true))
            .collect();
        let up = (0..levels)
            .rev()
            .map(|i| ModConvLayer::new(&mut init.sub(&format!("up{i}")), style_dim, ch(i + 1), ch(i), 3, true))
            .collect();
        let to_mask = ModConvLayer::new(&mut init.sub("to_mask"), style_dim, ch(0), cfg.num_classes, 3, false);
        Ok(Self {
            stem,
            down,
            middle,
            bottleneck,
            up,
            to_mask,
            resolution: cfg.resolution,
            classes: cfg.num_classes,
            style_dim,
        })
    }

    /// `x`: `[B, R, H, W]` (one-hot or softmaxed), `style`: `[B, Σ widths]`
    /// → logits `[B, R, H, W]`.
    pub fn forward(&self, x: &Var, style: &Var) -> Result<Var> {
        let xs = x.shape();
        let ss = style.shape();
        if xs != [xs[0], self.classes, self.resolution, self.resolution] {
            return Err(Error::dim(format!(
                "generator expects [B, {}, {r}, {r}], got {xs:?}",
                self.classes,
                r = self.resolution
            )));
        }
        if ss != [xs[0], self.style_dim] {
            return Err(Error::dim(format!("generator expects style [B, {}], got {ss:?}", self.style_dim)));
        }
        let mut h = self.stem.forward(x);
        for b in self.down.iter().chain(&self.middle) {
            h = b.forward(&h);
        }
        for layer in &self.bottleneck {
            h = layer.forward(&h.leaky_relu(LEAKY_SLOPE), style)?;
        }
        for layer in &self.up {
            h = layer.forward(&h.leaky_relu(LEAKY_SLOPE).upsample2(), style)?;
        }
        self.to_mask.forward(&h.relu(), style)
    }
}

/// Residual trunk down to 4×4 followed by a linear head bank with two heads
/// (absence, presence) per domain. Serves as both discriminator (head width
/// 1) and style encoder (head width = domain style width).
pub struct DomainNet {
    stem: Conv,
    blocks: Vec<ResBlock>,
    flat: Linear,
    heads: Linear,
    widths: Vec<usize>,
    resolution: usize,
    classes: usize,
}

impl DomainNet {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, cfg: &ManipModelConfig, widths: Vec<usize>) -> Result<Self> {
        let r = cfg.resolution;
        if r < 8 || !r.is_power_of_two() {
            return Err(Error::Usage(format!("resolution {r} must be a power of two ≥ 8")));
        }
        let downs = (r / 4).trailing_zeros() as usize;
        let ch = |i: usize| scaled((cfg.disc_base_channels << i).min(cfg.max_channels), cfg.channel_divisor);
        let stem = Conv::new(&mut init.sub("stem"), cfg.num_classes, ch(0), 3, WeightInit::He, true);
        let blocks = (0..downs)
            .map(|i| ResBlock::new(&mut init.sub(&format!("block{i}")), ch(i), ch(i + 1), false, true))
            .collect();
        let c = ch(downs);
        let flat = Linear::new(&mut init.sub("flat"), c * 16, c, WeightInit::He, Some(0.0));
        let total: usize = widths.iter().sum();
        let heads = Linear::new(&mut init.sub("heads"), c, 2 * total, WeightInit::He, Some(0.0));
        Ok(Self {
            stem,
            blocks,
            flat,
            heads,
            widths,
            resolution: r,
            classes: cfg.num_classes,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Shared features `[B, C]` before the head bank.
    pub fn trunk(&self, x: &Var) -> Result<Var> {
        let xs = x.shape();
        if xs.len() != 4 || xs[1..] != [self.classes, self.resolution, self.resolution] {
            return Err(Error::dim(format!(
                "expected [B, {}, {r}, {r}], got {xs:?}",
                self.classes,
                r = self.resolution
            )));
        }
        let mut h = self.stem.forward(x);
        for b in &self.blocks {
            h = b.forward(&h);
        }
        let hs = h.shape();
        let h = h.leaky_relu(LEAKY_SLOPE).reshape(&[hs[0], hs[1] * hs[2] * hs[3]]);
        Ok(self.flat.forward(&h).leaky_relu(LEAKY_SLOPE))
    }

    /// Every head output, `[B, 2 Σ widths]`, laid out per domain as
    /// `[absent | present]`.
    pub fn all_heads(&self, features: &Var) -> Var {
        self.heads.forward(features)
    }

    /// Picks head `(i, bits_i)` for each domain; `[B, Σ widths]`.
    pub fn select(&self, heads: &Var, bits: &[AttributeAssignment]) -> Result<Var> {
        let b = heads.shape()[0];
        if bits.len() != b || bits.iter().any(|a| a.len() != self.widths.len()) {
            return Err(Error::dim(format!(
                "need {b} assignments of {} domains",
                self.widths.len()
            )));
        }
        let mut offset = 0;
        let mut parts = Vec::with_capacity(self.widths.len());
        for (i, &w) in self.widths.iter().enumerate() {
            let on: Vec<f64> = bits.iter().map(|a| a.get(i) as u8 as f64).collect();
            let off: Vec<f64> = on.iter().map(|v| 1.0 - v).collect();
            let absent = heads.narrow(1, offset, w);
            let present = heads.narrow(1, offset + w, w);
            parts.push(
                absent
                    .mul(&Var::constant(Tensor::from_vec(&[b, 1], off)))
                    .add(&present.mul(&Var::constant(Tensor::from_vec(&[b, 1], on)))),
            );
            offset += 2 * w;
        }
        Ok(Var::concat(&parts, 1))
    }

    pub fn forward(&self, x: &Var, bits: &[AttributeAssignment]) -> Result<Var> {
        let f = self.trunk(x)?;
        self.select(&self.all_heads(&f), bits)
    }
}

/// Shared MLP followed by one unshared branch per (domain, bit).
pub struct MappingNetwork {
    shared: Vec<Linear>,
    /// `branches[i][bit]`
    branches: Vec<[Vec<Linear>; 2]>,
    latent_dim: usize,
}

impl MappingNetwork {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, cfg: &ManipModelConfig) -> Self {
        let hidden = scaled(cfg.mapping_width, cfg.channel_divisor);
        let shared = (0..4)
            .map(|i| {
                let input = if i == 0 { cfg.latent_dim } else { hidden };
                Linear::new(&mut init.sub(&format!("shared{i}")), input, hidden, WeightInit::He, Some(0.0))
            })
            .collect();
        let branches = cfg
            .style_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let make = |init: &mut Init<'_, R>, bit: usize| {
                    let mut init = init.sub(&format!("branch{i}_{bit}"));
                    (0..4)
                        .map(|j| {
                            let out = if j == 3 { w } else { hidden };
                            Linear::new(&mut init.sub(&format!("l{j}")), hidden, out, WeightInit::He, Some(0.0))
                        })
                        .collect::<Vec<_>>()
                };
                let absent = make(init, 0);
                let present = make(init, 1);
                [absent, present]
            })
            .collect();
        Self {
            shared,
            branches,
            latent_dim: cfg.latent_dim,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    /// `z`: `[B, latent]` → `[B, Σ widths]` using branch `(i, target_i)`.
    pub fn forward(&self, z: &Var, target: &[AttributeAssignment]) -> Result<Var> {
        let zs = z.shape();
        if zs.len() != 2 || zs[1] != self.latent_dim || zs[0] != target.len() {
            return Err(Error::dim(format!(
                "mapping expects z [{}, {}], got {zs:?}",
                target.len(),
                self.latent_dim
            )));
        }
        if target.iter().any(|t| t.len() != self.branches.len()) {
            return Err(Error::dim(format!("targets must have {} domains", self.branches.len())));
        }
        let mut h = z.clone();
        for l in &self.shared {
            h = l.forward(&h).relu();
        }
        let b = zs[0];
        let mut parts = Vec::with_capacity(self.branches.len());
        for (i, pair) in self.branches.iter().enumerate() {
            let on: Vec<f64> = target.iter().map(|t| t.get(i) as u8 as f64).collect();
            let mut out = None::<Var>;
            for (bit, layers) in pair.iter().enumerate() {
                let rows: Vec<usize> = (0..b).filter(|&k| on[k] as usize == bit).collect();
                if rows.is_empty() {
                    continue;
                }
                let mut x = h.clone();
                for (j, l) in layers.iter().enumerate() {
                    x = l.forward(&x);
                    if j + 1 < layers.len() {
                        x = x.relu();
                    }
                }
                let sel: Vec<f64> = on.iter().map(|&v| if v as usize == bit { 1.0 } else { 0.0 }).collect();
                let x = x.mul(&Var::constant(Tensor::from_vec(&[b, 1], sel)));
                out = Some(match out {
                    Some(o) => o.add(&x),
                    None => x,
                });
            }
            parts.push(out.expect("batch is non-empty"));
        }
        Ok(Var::concat(&parts, 1))
    }
}

/// The four networks with their parameter stores.
pub struct ManipNetworks {
    pub generator: Generator,
    pub discriminator: DomainNet,
    pub encoder: DomainNet,
    pub mapping: MappingNetwork,
    pub g_params: ParamStore,
    pub d_params: ParamStore,
    pub s_params: ParamStore,
    pub f_params: ParamStore,
}

impl ManipNetworks {
    pub fn new<R: Rng>(cfg: &ManipModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut g_params = ParamStore::new();
        let mut d_params = ParamStore::new();
        let mut s_params = ParamStore::new();
        let mut f_params = ParamStore::new();
        let generator = Generator::new(&mut Init::new(&mut g_params, rng, "G"), cfg)?;
        let n = cfg.style_widths.len();
        let discriminator = DomainNet::new(&mut Init::new(&mut d_params, rng, "D"), cfg, vec![1; n])?;
        let encoder = DomainNet::new(&mut Init::new(&mut s_params, rng, "S"), cfg, cfg.style_widths.clone())?;
        let mapping = MappingNetwork::new(&mut Init::new(&mut f_params, rng, "F"), cfg);
        Ok(Self {
            generator,
            discriminator,
            encoder,
            mapping,
            g_params,
            d_params,
            s_params,
            f_params,
        })
    }

    pub fn stores(&self) -> [&ParamStore; 4] {
        [&self.g_params, &self.d_params, &self.s_params, &self.f_params]
    }
}
