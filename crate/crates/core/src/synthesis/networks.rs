//! Generator, style encoder, mapping network and discriminator of the
//! image synthesis stage.

use rand::Rng;

use super::SynthModelConfig;
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::layers::{
    fused_leaky_relu, fused_leaky_relu_flat, mask_average_pool, noise_inject, pixel_norm, resample_blur,
    sample_noise, Resample, SacLayer,
};
use crate::nn::{Conv, Init, Linear, ParamStore, WeightInit};
use crate::tensor::{self, Tensor};

/// Equalized conv followed by a fused leaky ReLU.
struct ConvAct {
    conv: Conv,
    bias: Var,
}

impl ConvAct {
    fn new<R: Rng>(init: &mut Init<'_, R>, input: usize, output: usize, k: usize) -> Self {
        let conv = Conv::new(init, input, output, k, WeightInit::Equalized, false);
        let bias = init.constant("act_bias", &[output], 0.0);
        Self { conv, bias }
    }

    fn forward(&self, x: &Var) -> Var {
        fused_leaky_relu(&self.conv.forward(x), &self.bias)
    }
}

/// Nearest-neighbour resize of a one-hot `[B, R, H, W]` mask.
pub fn mask_at(mask: &Tensor, size: usize) -> Result<Tensor> {
    let s = mask.shape();
    if s[2] == size && s[3] == size {
        return Ok(mask.clone());
    }
    tensor::resize_nearest(mask, size, size)
}

/// Area-weighted downsampling of a mask by repeated 2× averaging; rows
/// become region coverage fractions.
pub fn mask_coverage(mask: &Tensor, size: usize) -> Result<Tensor> {
    let mut m = mask.clone();
    while m.shape()[2] > size {
        m = tensor::avgpool2(&m)?;
    }
    if m.shape()[2] != size {
        return Err(Error::dim(format!("cannot reduce mask {:?} to {size}", mask.shape())));
    }
    Ok(m)
}

struct SacBlock {
    sac: SacLayer,
    noise_strength: Var,
    act_bias: Var,
    upsample: bool,
    resolution: usize,
}

/// Mask feature extractor followed by the SAC trunk and an RGB head.
pub struct SynthGenerator {
    extractor_in: ConvAct,
    extractor_down: Vec<ConvAct>,
    extractor_resolution: usize,
    blocks: Vec<SacBlock>,
    to_rgb: SacLayer,
    rgb_bias: Var,
    resolution: usize,
    classes: usize,
    style_dim: usize,
}

impl SynthGenerator {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, cfg: &SynthModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (res, start) = (cfg.resolution, cfg.start_resolution);
        let ch = |r: usize| cfg.generator_channels(r);
        let ext = cfg.extractor_resolution();
        let extractor_in = ConvAct::new(&mut init.sub("extract_in"), cfg.num_classes, ch(ext), 3);
        let mut extractor_down = Vec::new();
        let mut r = ext;
        while r > start {
            extractor_down.push(ConvAct::new(&mut init.sub(&format!("extract_down{r}")), ch(r), ch(r / 2), 3));
            r /= 2;
        }
        // (input channels, output channels, upsample, resolution)
        let mut plan = vec![(ch(start), ch(start), false, start)];
        let mut r = start;
        while r < res {
            plan.push((ch(r), ch(2 * r), true, 2 * r));
            plan.push((ch(2 * r), ch(2 * r), false, 2 * r));
            r *= 2;
        }
        let total = plan.len() + 1;
        let blocks = plan
            .into_iter()
            .enumerate()
            .map(|(i, (cin, cout, upsample, resolution))| {
                let mut init = init.sub(&format!("sac{i}"));
                let mask_only = i + 3 >= total;
                SacBlock {
                    sac: SacLayer::new(&mut init, cfg.style_dim, cfg.num_classes, cin, cout, 3, mask_only),
                    noise_strength: init.constant("noise", &[cout], 0.0),
                    act_bias: init.constant("act_bias", &[cout], 0.0),
                    upsample,
                    resolution,
                }
            })
            .collect();
        let mut init_rgb = init.sub("to_rgb");
        let to_rgb = SacLayer::new(&mut init_rgb, cfg.style_dim, cfg.num_classes, ch(res), 3, 3, true);
        let rgb_bias = init_rgb.constant("bias", &[3], 0.0);
        Ok(Self {
            extractor_in,
            extractor_down,
            extractor_resolution: ext,
            blocks,
            to_rgb,
            rgb_bias,
            resolution: res,
            classes: cfg.num_classes,
            style_dim: cfg.style_dim,
        })
    }

    /// Spatial sizes of the per-layer noise fields, in layer order.
    pub fn noise_sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.resolution).collect()
    }

    pub fn sample_noise<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<Tensor> {
        self.noise_sizes()
            .into_iter()
            .map(|s| sample_noise(batch, s, s, rng))
            .collect()
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len() + 1
    }

    /// Whether layer `i` (the RGB head is the last) ignores the style matrix.
    pub fn layer_is_mask_only(&self, i: usize) -> bool {
        match self.blocks.get(i) {
            Some(b) => b.sac.mask_only,
            None => self.to_rgb.mask_only,
        }
    }

    /// `mask`: one-hot `[B, R, H, W]`, `sm`: `[B, R, S]`, one noise field
    /// per layer → RGB `[B, 3, H, W]`.
    pub fn forward(&self, mask: &Tensor, sm: &Var, noise: &[Tensor]) -> Result<Var> {
        let ms = mask.shape();
        if ms.len() != 4 || ms[1..] != [self.classes, self.resolution, self.resolution] {
            return Err(Error::dim(format!(
                "generator expects mask [B, {}, {r}, {r}], got {ms:?}",
                self.classes,
                r = self.resolution
            )));
        }
        let ss = sm.shape();
        if ss != [ms[0], self.classes, self.style_dim] {
            return Err(Error::dim(format!(
                "style matrix must be [{}, {}, {}], got {ss:?}",
                ms[0], self.classes, self.style_dim
            )));
        }
        if noise.len() != self.blocks.len() {
            return Err(Error::dim(format!("need {} noise fields, got {}", self.blocks.len(), noise.len())));
        }
        let mut h = self
            .extractor_in
            .forward(&Var::constant(mask_at(mask, self.extractor_resolution)?));
        for d in &self.extractor_down {
            h = d.forward(&resample_blur(&h, Resample::Down)?);
        }
        for (block, eta) in self.blocks.iter().zip(noise) {
            if block.upsample {
                h = resample_blur(&h, Resample::Up)?;
            }
            let m = Var::constant(mask_at(mask, block.resolution)?);
            h = block.sac.forward(&h, sm, &m)?;
            if eta.shape() != [ms[0], 1, block.resolution, block.resolution] {
                return Err(Error::dim(format!("noise field {:?} does not fit layer", eta.shape())));
            }
            h = noise_inject(&h, &block.noise_strength, eta);
            h = fused_leaky_relu(&h, &block.act_bias);
        }
        let m = Var::constant(mask.clone());
        let rgb = self.to_rgb.forward(&h, sm, &m)?;
        Ok(rgb.add(&self.rgb_bias.reshape(&[1, 3, 1, 1])))
    }

    /// Conditioning field of layer `i` (debug/introspection).
    pub fn layer_style_field(&self, i: usize, mask: &Tensor, sm: &Var) -> Result<Var> {
        let (layer, res) = match self.blocks.get(i) {
            Some(b) => (&b.sac, b.resolution),
            None => (&self.to_rgb, self.resolution),
        };
        layer.style_field(sm, &Var::constant(mask_at(mask, res)?))
    }
}

/// RGB + mask → per-region style matrix.
pub struct SynthEncoder {
    stem: ConvAct,
    downs: Vec<ConvAct>,
    out: ConvAct,
    pool_resolution: usize,
    resolution: usize,
}

impl SynthEncoder {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, cfg: &SynthModelConfig) -> Result<Self> {
        let ch = |i: usize| cfg.scaled(32 << i);
        let stem = ConvAct::new(&mut init.sub("stem"), 3, ch(0), 3);
        let downs = (0..2)
            .map(|i| ConvAct::new(&mut init.sub(&format!("down{i}")), ch(i), ch(i + 1), 3))
            .collect();
        let out = ConvAct::new(&mut init.sub("out"), ch(2), cfg.style_dim, 3);
        Ok(Self {
            stem,
            downs,
            out,
            pool_resolution: cfg.resolution / 4,
            resolution: cfg.resolution,
        })
    }

    /// Feature map `[B, S, H/4, W/4]` before pooling.
    pub fn features(&self, x: &Var) -> Result<Var> {
        let xs = x.shape();
        if xs.len() != 4 || xs[1..] != [3, self.resolution, self.resolution] {
            return Err(Error::dim(format!(
                "encoder expects [B, 3, {r}, {r}], got {xs:?}",
                r = self.resolution
            )));
        }
        let mut h = self.stem.forward(x);
        for d in &self.downs {
            h = d.forward(&resample_blur(&h, Resample::Down)?);
        }
        Ok(self.out.forward(&h))
    }

    /// `[B, R, S]`.
    pub fn forward(&self, x: &Var, mask: &Tensor) -> Result<Var> {
        let f = self.features(x)?;
        let ms = mask.shape();
        if ms.len() != 4 || ms[0] != x.shape()[0] || ms[2..] != [self.resolution, self.resolution] {
            return Err(Error::dim(format!("mask {ms:?} does not align with the image")));
        }
        mask_average_pool(&f, &mask_coverage(mask, self.pool_resolution)?)
    }
}

/// Pixel norm then eight equalized linear layers over the flattened
/// `R × S` code.
pub struct SynthMapping {
    layers: Vec<(Linear, Var)>,
    regions: usize,
    style_dim: usize,
}

impl SynthMapping {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, cfg: &SynthModelConfig) -> Self {
        let width = cfg.num_classes * cfg.style_dim;
        let layers = (0..cfg.mapping_layers)
            .map(|i| {
                let mut init = init.sub(&format!("l{i}"));
                let lin = Linear::new(&mut init, width, width, WeightInit::Equalized, None);
                let bias = init.constant("act_bias", &[width], 0.0);
                (lin, bias)
            })
            .collect();
        Self {
            layers,
            regions: cfg.num_classes,
            style_dim: cfg.style_dim,
        }
    }

    pub fn latent_width(&self) -> usize {
        self.regions * self.style_dim
    }

    /// `z`: `[B, R·S]` → `[B, R, S]`.
    pub fn forward(&self, z: &Var) -> Result<Var> {
        let zs = z.shape();
        if zs.len() != 2 || zs[1] != self.latent_width() {
            return Err(Error::dim(format!("mapping expects [B, {}], got {zs:?}", self.latent_width())));
        }
        let mut h = pixel_norm(z);
        for (lin, bias) in &self.layers {
            h = fused_leaky_relu_flat(&lin.forward(&h), bias);
        }
        Ok(h.reshape(&[zs[0], self.regions, self.style_dim]))
    }
}

struct DiscBlock {
    conv1: ConvAct,
    conv2: ConvAct,
    skip: Conv,
}

/// Residual discriminator. `forward` returns every intermediate activation
/// and the final logit separately.
pub struct SynthDiscriminator {
    from_rgb: ConvAct,
    blocks: Vec<DiscBlock>,
    final_conv: ConvAct,
    fc: Linear,
    fc_bias: Var,
    out: Linear,
    resolution: usize,
}

impl SynthDiscriminator {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, cfg: &SynthModelConfig) -> Result<Self> {
        let res = cfg.resolution;
        let ch = |r: usize| cfg.discriminator_channels(r);
        let from_rgb = ConvAct::new(&mut init.sub("from_rgb"), 3, ch(res), 1);
        let mut blocks = Vec::new();
        let mut r = res;
        while r > 4 {
            let mut init = init.sub(&format!("block{r}"));
            blocks.push(DiscBlock {
                conv1: ConvAct::new(&mut init.sub("conv1"), ch(r), ch(r), 3),
                conv2: ConvAct::new(&mut init.sub("conv2"), ch(r), ch(r / 2), 3),
                skip: Conv::new(&mut init.sub("skip"), ch(r), ch(r / 2), 1, WeightInit::Equalized, false),
            });
            r /= 2;
        }
        let c = ch(4);
        let final_conv = ConvAct::new(&mut init.sub("final_conv"), c, c, 3);
        let mut fc_init = init.sub("fc");
        let fc = Linear::new(&mut fc_init, c * 16, c, WeightInit::Equalized, None);
        let fc_bias = fc_init.constant("act_bias", &[c], 0.0);
        let out = Linear::new(&mut init.sub("out"), c, 1, WeightInit::Equalized, Some(0.0));
        Ok(Self {
            from_rgb,
            blocks,
            final_conv,
            fc,
            fc_bias,
            out,
            resolution: res,
        })
    }

    /// `(features, logits [B, 1])`; features exclude the final layer.
    pub fn forward(&self, x: &Var) -> Result<(Vec<Var>, Var)> {
        let xs = x.shape();
        if xs.len() != 4 || xs[1..] != [3, self.resolution, self.resolution] {
            return Err(Error::dim(format!(
                "discriminator expects [B, 3, {r}, {r}], got {xs:?}",
                r = self.resolution
            )));
        }
        let mut feats = Vec::new();
        let mut h = self.from_rgb.forward(x);
        feats.push(h.clone());
        for b in &self.blocks {
            let skip = b.skip.forward(&resample_blur(&h, Resample::Down)?);
            let r = b.conv2.forward(&resample_blur(&b.conv1.forward(&h), Resample::Down)?);
            h = skip.add(&r).scale(std::f64::consts::FRAC_1_SQRT_2);
            feats.push(h.clone());
        }
        h = self.final_conv.forward(&h);
        feats.push(h.clone());
        let hs = h.shape();
        let flat = h.reshape(&[hs[0], hs[1] * hs[2] * hs[3]]);
        let f = fused_leaky_relu_flat(&self.fc.forward(&flat), &self.fc_bias);
        feats.push(f.clone());
        Ok((feats, self.out.forward(&f)))
    }
}

pub struct SynthNetworks {
    pub generator: SynthGenerator,
    pub encoder: SynthEncoder,
    pub mapping: SynthMapping,
    pub discriminator: SynthDiscriminator,
    pub g_params: ParamStore,
    pub e_params: ParamStore,
    pub f_params: ParamStore,
    pub d_params: ParamStore,
}

impl SynthNetworks {
    pub fn new<R: Rng>(cfg: &SynthModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut g_params = ParamStore::new();
        let mut e_params = ParamStore::new();
        let mut f_params = ParamStore::new();
        let mut d_params = ParamStore::new();
        let generator = SynthGenerator::new(&mut Init::new(&mut g_params, rng, "G"), cfg)?;
        let encoder = SynthEncoder::new(&mut Init::new(&mut e_params, rng, "E"), cfg)?;
        let mapping = SynthMapping::new(&mut Init::new(&mut f_params, rng, "F"), cfg);
        let discriminator = SynthDiscriminator::new(&mut Init::new(&mut d_params, rng, "D"), cfg)?;
        Ok(Self {
            generator,
            encoder,
            mapping,
            discriminator,
            g_params,
            e_params,
            f_params,
            d_params,
        })
    }

    pub fn stores(&self) -> [&ParamStore; 4] {
        [&self.g_params, &self.e_params, &self.f_params, &self.d_params]
    }
}
