//! Building blocks shared by both stages: modulated and semantically
//! adaptive convolution, equalized parameterisation, pixel normalisation,
//! blurred resampling, noise injection and mask average pooling.
//!
//! All tensors are NCHW. Styles for [`modulated_conv`] are `[B, Cin]`;
//! style fields for [`sac_conv`] are `[B, Cin, H, W]`; region style
//! matrices are `[B, R, S]`; masks are one-hot `[B, R, H, W]`.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Init, WeightInit};
use crate::tensor::Tensor;

/// Guard added under every square root that divides.
pub const EPS: f64 = 1e-8;

/// Negative slope shared by every leaky activation.
pub const LEAKY_SLOPE: f64 = 0.2;

fn check_finite(name: &str, v: &Var) -> Result<()> {
    if v.value().all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{name} contains non-finite values")))
    }
}

/// Per-(sample, output channel) demodulation factor
/// `sqrt(Σ_{cin,i,j} (w[o,cin,i,j] · s[b,cin])² + ε)`, shape `[B, Cout]`.
pub fn demodulation(w: &Var, s: &Var) -> Var {
    let ws = w.shape();
    let (co, ci) = (ws[0], ws[1]);
    let w2 = w.square().sum_axes(&[2, 3]).reshape(&[co, ci]);
    s.square().matmul(&w2.t()).add_scalar(EPS).sqrt()
}

/// `conv(w, s ⊙ h) / σ_E(w, s)`, the style acting per input channel.
pub fn modulated_conv(h: &Var, w: &Var, s: &Var, demodulate: bool) -> Result<Var> {
    let hs = h.shape();
    let ws = w.shape();
    let ss = s.shape();
    if hs.len() != 4 || ws.len() != 4 || ss.len() != 2 {
        return Err(Error::dim("modulated_conv expects h [B,C,H,W], w [O,C,k,k], s [B,C]"));
    }
    if ss[1] != ws[1] || hs[1] != ws[1] || ss[0] != hs[0] {
        return Err(Error::dim(format!(
            "modulated_conv: h {hs:?}, w {ws:?}, s {ss:?} disagree on channels or batch"
        )));
    }
    check_finite("features", h)?;
    check_finite("style", s)?;
    let (b, co) = (hs[0], ws[0]);
    let out = h.mul(&s.reshape(&[b, ss[1], 1, 1])).conv2d(w);
    if !demodulate {
        return Ok(out);
    }
    Ok(out.div(&demodulation(w, s).reshape(&[b, co, 1, 1])))
}

/// Repeats the border rows and columns of `v` (`[B, C, H, W]`) `p` times.
fn replicate_pad(v: &Var, p: usize) -> Var {
    let mut out = v.clone();
    for axis in [2, 3] {
        let n = out.shape()[axis];
        let first = out.narrow(axis, 0, 1);
        let last = out.narrow(axis, n - 1, 1);
        let mut parts = vec![first; p];
        parts.push(out.clone());
        parts.extend(std::iter::repeat_n(last, p));
        out = Var::concat(&parts, axis);
    }
    out
}

/// Spatial demodulation `sqrt(conv(w², s²) + ε)`, shape `[B, Cout, H, W]`.
/// The style field is edge-extended inside the window, so a spatially
/// uniform `s` gives [`demodulation`] at every pixel, borders included.
pub fn spatial_demodulation(w: &Var, s: &Var) -> Var {
    let p = w.shape()[2] / 2;
    if p == 0 {
        return s.square().conv2d(&w.square()).add_scalar(EPS).sqrt();
    }
    let ss = s.shape();
    replicate_pad(&s.square(), p)
        .conv2d(&w.square())
        .narrow(2, p, ss[2])
        .narrow(3, p, ss[3])
        .add_scalar(EPS)
        .sqrt()
}

/// `conv(w, s ⊙ h) / σ_E(w, s)` with a spatially varying style field.
pub fn sac_conv(h: &Var, w: &Var, s: &Var) -> Result<Var> {
    let hs = h.shape();
    if s.shape() != hs {
        return Err(Error::dim(format!(
            "style field {:?} must match features {hs:?}",
            s.shape()
        )));
    }
    check_finite("features", h)?;
    check_finite("style field", s)?;
    Ok(h.mul(s).conv2d(w).div(&spatial_demodulation(w, s)))
}

/// Per-layer maps that bring the region style matrix and the mask to the
/// convolution's input width before blending.
pub struct SacProjection {
    /// `[Cin, S]`, equalized.
    pub affine_weight: Var,
    /// `[Cin]`.
    pub affine_bias: Var,
    /// `[Cin, R, 1, 1]`, equalized.
    pub mask_weight: Var,
    /// `[Cin]`.
    pub mask_bias: Var,
}

impl SacProjection {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, style_dim: usize, regions: usize, channels: usize) -> Self {
        Self {
            affine_weight: init.randn("affine.weight", &[channels, style_dim], 1.0),
            affine_bias: init.constant("affine.bias", &[channels], 1.0),
            mask_weight: init.randn("mask.weight", &[channels, regions, 1, 1], 1.0),
            mask_bias: init.constant("mask.bias", &[channels], 1.0),
        }
    }

    pub fn channels(&self) -> usize {
        self.affine_weight.shape()[0]
    }

    /// A(sm): `[B, R, S]` → `[B, R, Cin]`.
    pub fn project_styles(&self, sm: &Var) -> Var {
        let [b, r, s] = <[usize; 3]>::try_from(sm.shape()).expect("rank-3 style matrix");
        let c = self.channels();
        let w = equalized_scale(&self.affine_weight, s);
        sm.reshape(&[b * r, s])
            .matmul(&w.t())
            .add(&self.affine_bias.reshape(&[1, c]))
            .reshape(&[b, r, c])
    }

    /// P(mask): `[B, R, H, W]` → `[B, Cin, H, W]`.
    pub fn project_mask(&self, mask: &Var) -> Var {
        let r = mask.shape()[1];
        let c = self.channels();
        mask.conv2d(&equalized_scale(&self.mask_weight, r))
            .add(&self.mask_bias.reshape(&[1, c, 1, 1]))
    }
}

/// Assigns each region's row of `styles` (`[B, R, C]`) to the pixels that
/// region owns in `mask`, giving `[B, C, H, W]`.
pub fn scatter_regions(styles: &Var, mask: &Var) -> Result<Var> {
    let ss = styles.shape();
    let ms = mask.shape();
    if ss.len() != 3 || ms.len() != 4 || ss[0] != ms[0] || ss[1] != ms[1] {
        return Err(Error::dim(format!(
            "region styles {ss:?} and mask {ms:?} disagree on batch or region count"
        )));
    }
    let (b, r, c, h, w) = (ss[0], ss[1], ss[2], ms[2], ms[3]);
    Ok(styles
        .transpose()
        .bmm(&mask.reshape(&[b, r, h * w]))
        .reshape(&[b, c, h, w]))
}

/// Effective blend weight α = sigmoid(raw).
pub fn blend_weight(raw: &Var) -> Var {
    raw.sigmoid()
}

/// `s = α · scatter(A(sm), mask) + (1 − α) · P(mask)`.
pub fn region_style_field(sm: &Var, mask: &Var, alpha_raw: &Var, proj: &SacProjection) -> Result<Var> {
    let ss = sm.shape();
    let ms = mask.shape();
    if ss.len() != 3 || ss[1] != ms[1] {
        return Err(Error::dim(format!(
            "style matrix has {:?} rows but mask has {} regions",
            ss.get(1),
            ms[1]
        )));
    }
    let alpha = blend_weight(alpha_raw).reshape(&[1, 1, 1, 1]);
    let styled = scatter_regions(&proj.project_styles(sm), mask)?;
    let semantic = proj.project_mask(mask);
    Ok(alpha
        .mul(&styled)
        .add(&alpha.neg().add_scalar(1.0).mul(&semantic)))
}

/// Semantically adaptive convolution with spatial demodulation.
pub fn sac(
    h: &Var,
    w: &Var,
    sm: &Var,
    mask: &Var,
    alpha_raw: &Var,
    proj: &SacProjection,
) -> Result<Var> {
    let (hs, ms) = (h.shape(), mask.shape());
    if hs[2..] != ms[2..] || hs[0] != ms[0] {
        return Err(Error::dim(format!(
            "mask {ms:?} does not align with features {hs:?}"
        )));
    }
    let field = region_style_field(sm, mask, alpha_raw, proj)?;
    sac_conv(h, w, &field)
}

/// Row r of the result is the mean feature vector over the pixels of
/// region r; empty regions give a zero row. `[B, C, H, W]` × `[B, R, H, W]`
/// → `[B, R, C]`.
pub fn mask_average_pool(features: &Var, mask: &Tensor) -> Result<Var> {
    let fs = features.shape();
    let ms = mask.shape();
    if fs.len() != 4 || ms.len() != 4 || fs[0] != ms[0] || fs[2..] != ms[2..] {
        return Err(Error::dim(format!(
            "mask {ms:?} does not align with features {fs:?}"
        )));
    }
    let (b, c, hw, r) = (fs[0], fs[1], fs[2] * fs[3], ms[1]);
    let counts: Vec<f64> = mask
        .data()
        .chunks(hw)
        .map(|plane| plane.iter().sum::<f64>().max(1.0))
        .collect();
    let counts = Var::constant(Tensor::from_vec(&[b, r, 1], counts));
    let m = Var::constant(mask.reshape(&[b, r, hw])?);
    Ok(m
        .bmm(&features.reshape(&[b, c, hw]).transpose())
        .div(&counts))
}

/// `raw / sqrt(fan_in)`.
pub fn equalized_scale(raw: &Var, fan_in: usize) -> Var {
    raw.scale(1.0 / (fan_in as f64).sqrt())
}

/// `v / sqrt(mean_c(v²) + ε)` over axis 1.
pub fn pixel_norm(v: &Var) -> Var {
    v.div(&v.square().mean_axes(&[1]).add_scalar(EPS).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resample {
    Up,
    Down,
}

/// Up: nearest 2× then blur. Down: blur then 2× average pool.
pub fn resample_blur(h: &Var, direction: Resample) -> Result<Var> {
    let s = h.shape();
    if s.len() != 4 {
        return Err(Error::dim("resample_blur expects [B,C,H,W]"));
    }
    match direction {
        Resample::Up => Ok(h.upsample2().blur()),
        Resample::Down => {
            if s[2] % 2 != 0 || s[3] % 2 != 0 {
                return Err(Error::dim(format!(
                    "downsampling needs even spatial dims, got {}x{}",
                    s[2], s[3]
                )));
            }
            Ok(h.blur().avgpool2())
        }
    }
}

/// Single-channel unit-normal field `[B, 1, H, W]`.
pub fn sample_noise<R: Rng + ?Sized>(batch: usize, height: usize, width: usize, rng: &mut R) -> Tensor {
    Tensor::randn(&[batch, 1, height, width], rng)
}

/// `h + strength[c] · η`, with η broadcast over channels.
pub fn noise_inject(h: &Var, strength: &Var, noise: &Tensor) -> Var {
    let c = h.shape()[1];
    h.add(&Var::constant(noise.clone()).mul(&strength.reshape(&[1, c, 1, 1])))
}

/// `leaky_relu(h + bias, 0.2) · sqrt(2)`.
pub fn fused_leaky_relu(h: &Var, bias: &Var) -> Var {
    let c = h.shape()[1];
    h.add(&bias.reshape(&[1, c, 1, 1]))
        .leaky_relu(LEAKY_SLOPE)
        .scale(std::f64::consts::SQRT_2)
}

/// Same as [`fused_leaky_relu`] for `[B, C]` inputs.
pub fn fused_leaky_relu_flat(h: &Var, bias: &Var) -> Var {
    let c = h.shape()[1];
    h.add(&bias.reshape(&[1, c]))
        .leaky_relu(LEAKY_SLOPE)
        .scale(std::f64::consts::SQRT_2)
}

/// Modulated convolution with its own style affine and output bias.
pub struct ModConvLayer {
    weight: Var,
    affine: crate::nn::Linear,
    bias: Var,
    demodulate: bool,
}

impl ModConvLayer {
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        style_dim: usize,
        input: usize,
        output: usize,
        kernel: usize,
        demodulate: bool,
    ) -> Self {
        let weight = init.randn("weight", &[output, input, kernel, kernel], 1.0);
        let affine = crate::nn::Linear::new(
            &mut init.sub("affine"),
            style_dim,
            input,
            WeightInit::Equalized,
            Some(1.0),
        );
        let bias = init.constant("bias", &[output], 0.0);
        Self {
            weight,
            affine,
            bias,
            demodulate,
        }
    }

    pub fn forward(&self, h: &Var, style: &Var) -> Result<Var> {
        let ws = self.weight.shape();
        let w = equalized_scale(&self.weight, ws[1] * ws[2] * ws[3]);
        let s = self.affine.forward(style);
        let out = modulated_conv(h, &w, &s, self.demodulate)?;
        Ok(out.add(&self.bias.reshape(&[1, ws[0], 1, 1])))
    }
}

/// A SAC layer with its projections. When `mask_only` is set the style
/// field is `P(mask)` alone and the region styles are ignored.
pub struct SacLayer {
    weight: Var,
    pub proj: SacProjection,
    pub alpha_raw: Var,
    pub mask_only: bool,
}

impl SacLayer {
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        style_dim: usize,
        regions: usize,
        input: usize,
        output: usize,
        kernel: usize,
        mask_only: bool,
    ) -> Self {
        let weight = init.randn("weight", &[output, input, kernel, kernel], 1.0);
        let proj = SacProjection::new(init, style_dim, regions, input);
        let alpha_raw = init.constant("alpha", &[1], 0.0);
        Self {
            weight,
            proj,
            alpha_raw,
            mask_only,
        }
    }

    pub fn weight(&self) -> Var {
        let ws = self.weight.shape();
        equalized_scale(&self.weight, ws[1] * ws[2] * ws[3])
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn style_field(&self, sm: &Var, mask: &Var) -> Result<Var> {
        if self.mask_only {
            Ok(self.proj.project_mask(mask))
        } else {
            region_style_field(sm, mask, &self.alpha_raw, &self.proj)
        }
    }

    pub fn forward(&self, h: &Var, sm: &Var, mask: &Var) -> Result<Var> {
        let (hs, ms) = (h.shape(), mask.shape());
        if hs[2..] != ms[2..] {
            return Err(Error::dim(format!(
                "mask {ms:?} does not align with features {hs:?}"
            )));
        }
        sac_conv(h, &self.weight(), &self.style_field(sm, mask)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_values;
    use crate::nn::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(t: Tensor) -> Var {
        Var::constant(t)
    }

    fn identity_kernel(ch: usize) -> Tensor {
        let mut w = Tensor::zeros(&[ch, ch, 1, 1]);
        for i in 0..ch {
            w.data_mut()[i * ch + i] = 1.0;
        }
        w
    }

    fn random_onehot(b: usize, r: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let mut m = Tensor::zeros(&[b, r, h, w]);
        for bi in 0..b {
            for p in 0..h * w {
                let k = rng.random_range(0..r);
                m.data_mut()[(bi * r + k) * h * w + p] = 1.0;
            }
        }
        m
    }

    #[test]
    fn modulated_conv_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = Tensor::randn(&[2, 3, 4, 4], &mut rng);
        let w = c(identity_kernel(3));
        let s = c(Tensor::ones(&[2, 3]));
        let plain = modulated_conv(&c(h.clone()), &w, &s, false).unwrap().tensor();
        assert_eq!(plain, h);
        let demod = modulated_conv(&c(h.clone()), &w, &s, true).unwrap().tensor();
        let expected = h.map(|v| v / (1.0 + EPS).sqrt());
        assert!(demod.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn modulated_conv_rejects_bad_shapes_and_nan() {
        let h = c(Tensor::zeros(&[1, 2, 3, 3]));
        let w = c(Tensor::zeros(&[1, 3, 3, 3]));
        let s = c(Tensor::ones(&[1, 3]));
        assert!(matches!(modulated_conv(&h, &w, &s, true), Err(Error::Dimension(_))));
        let h = c(Tensor::full(&[1, 3, 3, 3], f64::NAN));
        assert!(matches!(modulated_conv(&h, &w, &s, true), Err(Error::Numeric(_))));
    }

    #[test]
    fn sac_blend_limit_ignores_style_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let proj = SacProjection::new(&mut Init::new(&mut store, &mut rng, "p"), 4, 3, 2);
        let h = c(Tensor::randn(&[1, 2, 5, 5], &mut rng));
        let w = c(Tensor::randn(&[2, 2, 3, 3], &mut rng));
        let mask = c(random_onehot(1, 3, 5, 5, &mut rng));
        let alpha = c(Tensor::full(&[1], -800.0));
        let a = sac(&h, &w, &c(Tensor::randn(&[1, 3, 4], &mut rng)), &mask, &alpha, &proj).unwrap();
        let b = sac(&h, &w, &c(Tensor::randn(&[1, 3, 4], &mut rng)), &mask, &alpha, &proj).unwrap();
        assert_eq!(a.tensor(), b.tensor());
    }

    #[test]
    fn sac_rejects_region_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let proj = SacProjection::new(&mut Init::new(&mut store, &mut rng, "p"), 4, 3, 2);
        let h = c(Tensor::zeros(&[1, 2, 4, 4]));
        let w = c(Tensor::zeros(&[2, 2, 3, 3]));
        let mask = c(random_onehot(1, 3, 4, 4, &mut rng));
        let alpha = c(Tensor::zeros(&[1]));
        let sm = c(Tensor::zeros(&[1, 2, 4]));
        assert!(matches!(sac(&h, &w, &sm, &mask, &alpha, &proj), Err(Error::Dimension(_))));
        let small_mask = c(random_onehot(1, 3, 2, 2, &mut rng));
        let sm = c(Tensor::zeros(&[1, 3, 4]));
        assert!(matches!(
            sac(&h, &w, &sm, &small_mask, &alpha, &proj),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn mask_average_pool_cases() {
        // constant features
        let f = c(Tensor::full(&[1, 3, 2, 2], 7.0));
        let mask = Tensor::from_vec(&[1, 2, 2, 2], vec![1., 0., 1., 0., 0., 1., 0., 1.]);
        let rows = mask_average_pool(&f, &mask).unwrap().tensor();
        assert!(rows.data().iter().all(|&v| v == 7.0));

        // empty region
        let mask = Tensor::from_vec(&[1, 2, 2, 2], vec![1., 1., 1., 1., 0., 0., 0., 0.]);
        let rows = mask_average_pool(&f, &mask).unwrap().tensor();
        assert_eq!(&rows.data()[3..], &[0.0, 0.0, 0.0]);

        // 2x2 grid, pixels [1, 2; 3, 4] (channel 0) and [10, 20; 30, 40]
        // (channel 1); region 0 = {(0,0), (1,1)}, region 1 = {(0,1), (1,0)}.
        let f = c(Tensor::from_vec(&[1, 2, 2, 2], vec![1., 2., 3., 4., 10., 20., 30., 40.]));
        let mask = Tensor::from_vec(&[1, 2, 2, 2], vec![1., 0., 0., 1., 0., 1., 1., 0.]);
        let rows = mask_average_pool(&f, &mask).unwrap().tensor();
        assert_eq!(rows.shape(), &[1, 2, 2]);
        assert_eq!(rows.data(), &[2.5, 25.0, 2.5, 25.0]);
        let mask = Tensor::from_vec(&[1, 2, 2, 2], vec![1., 1., 0., 0., 0., 0., 1., 1.]);
        let rows = mask_average_pool(&f, &mask).unwrap().tensor();
        assert_eq!(rows.data(), &[1.5, 15.0, 3.5, 35.0]);
    }

    #[test]
    fn equalized_scale_cases() {
        let ones = c(Tensor::ones(&[3, 2]));
        assert!(equalized_scale(&ones, 4).tensor().data().iter().all(|&v| v == 0.5));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw = Tensor::randn(&[4, 4], &mut rng);
        assert_eq!(equalized_scale(&c(raw.clone()), 1).tensor(), raw);
        let eff = equalized_scale(&c(raw.clone()), 9).tensor();
        for (e, r) in eff.data().iter().zip(raw.data()) {
            assert!((e / r - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn pixel_norm_cases() {
        let v = c(Tensor::full(&[1, 4], 5.0));
        let out = pixel_norm(&v).tensor();
        for &o in out.data() {
            assert!((o - 5.0 / (25.0 + EPS).sqrt()).abs() < 1e-15);
        }
        let z = pixel_norm(&c(Tensor::zeros(&[2, 3]))).tensor();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = pixel_norm(&c(Tensor::randn(&[1, 8], &mut rng))).tensor();
        let ms: f64 = r.data().iter().map(|v| v * v).sum::<f64>() / 8.0;
        assert!((ms - 1.0).abs() < 1e-6);
    }

    #[test]
    fn resample_blur_cases() {
        let k = c(Tensor::full(&[1, 2, 4, 6], 3.0));
        let up = resample_blur(&k, Resample::Up).unwrap().tensor();
        assert_eq!(up.shape(), &[1, 2, 8, 12]);
        assert!(up.data().iter().all(|&v| v == 3.0));
        let down = resample_blur(&k, Resample::Down).unwrap().tensor();
        assert_eq!(down.shape(), &[1, 2, 2, 3]);
        assert!(down.data().iter().all(|&v| v == 3.0));
        let odd = c(Tensor::zeros(&[1, 1, 3, 4]));
        assert!(matches!(resample_blur(&odd, Resample::Down), Err(Error::Dimension(_))));

        // 4x4 ramp v[y][x] = x. Blurring along x with clamped edges gives
        // [0.25, 1, 2, 2.75] on every row; the vertical blur leaves rows
        // unchanged. Pooling 2x2 averages column pairs: 0.625 and 2.375.
        let ramp: Vec<f64> = (0..16).map(|i| (i % 4) as f64).collect();
        let ramp = c(Tensor::from_vec(&[1, 1, 4, 4], ramp));
        let out = resample_blur(&ramp, Resample::Down).unwrap().tensor();
        assert_eq!(out.data(), &[0.625, 2.375, 0.625, 2.375]);
    }

    #[test]
    fn noise_injection_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = Tensor::randn(&[1, 3, 4, 4], &mut rng);
        let noise = sample_noise(1, 4, 4, &mut rng);
        let zero = c(Tensor::zeros(&[3]));
        assert_eq!(noise_inject(&c(h.clone()), &zero, &noise).tensor(), h);

        let n1 = sample_noise(2, 8, 8, &mut ChaCha8Rng::seed_from_u64(9));
        let n2 = sample_noise(2, 8, 8, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(n1, n2);

        let field = sample_noise(1, 64, 64, &mut rng);
        let out = noise_inject(&c(Tensor::zeros(&[1, 1, 64, 64])), &c(Tensor::ones(&[1])), &field).tensor();
        let mean = out.mean();
        let var = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (out.numel() - 1) as f64;
        assert!((var - 1.0).abs() < 0.1, "variance {var}");
    }

    #[test]
    fn fused_leaky_relu_cases() {
        let b = c(Tensor::zeros(&[1]));
        let f = |v: f64| fused_leaky_relu(&c(Tensor::full(&[1, 1, 1, 1], v)), &b).item();
        assert_eq!(f(0.0), 0.0);
        assert!((f(1.0) - 2f64.sqrt()).abs() < 1e-15);
        assert!((f(-1.0) + 0.2 * 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn sac_layer_gradients_reach_every_parameter() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let layer = SacLayer::new(&mut Init::new(&mut store, &mut rng, "sac"), 4, 3, 2, 2, 3, false);
        let h = c(Tensor::randn(&[1, 2, 4, 4], &mut rng));
        let sm = c(Tensor::randn(&[1, 3, 4], &mut rng));
        let mask = c(random_onehot(1, 3, 4, 4, &mut rng));
        let loss = layer.forward(&h, &sm, &mask).unwrap().square().sum();
        let grads = grad_values(&loss, &store.vars());
        for ((name, _), g) in store.entries().iter().zip(&grads) {
            assert!(g.data().iter().any(|&v| v != 0.0), "{name} has zero gradient");
        }
    }
}
