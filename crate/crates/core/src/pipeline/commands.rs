//! File-level inference operations behind the command line.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{latest_checkpoint, load_checkpoint, MANIFEST};
use super::config::{Config, ManipulationConfig, SynthesisConfig};
use super::evaluate::{
    evaluate_manipulation, evaluate_synthesis, IdentityTranslator, NetTranslator, ProviderConfig, Report,
};
use super::train::{load_splits, Trainer};
use crate::data::{decode_mask, read_class_png, read_rgb_png, write_class_png, write_rgb_png, AttributeAssignment, SemanticMask};
use crate::error::{Error, Result};
use crate::manipulation::{translate, ManipNetworks, TranslateMode};
use crate::synthesis::{reenact, SynthNetworks};
use crate::tensor::Tensor;
use crate::Var;

/// A checkpoint directory, or the latest checkpoint of a run directory.
pub fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if path.join(MANIFEST).is_file() {
        return Ok(path.to_path_buf());
    }
    latest_checkpoint(path).ok_or_else(|| Error::Usage(format!("no checkpoint at {}", path.display())))
}

pub enum Loaded {
    Manipulation(Box<ManipulationConfig>, Box<ManipNetworks>),
    Synthesis(Box<SynthesisConfig>, Box<SynthNetworks>),
}

pub fn load_model(path: &Path) -> Result<Loaded> {
    let state = load_checkpoint(&resolve_checkpoint(path)?)?;
    let trainer = Trainer::from_state(&state)?;
    Ok(match (state.config, trainer) {
        (Config::Manipulation(c), Trainer::Manipulation(t)) => Loaded::Manipulation(Box::new(c), Box::new(t.nets)),
        (Config::Synthesis(c), Trainer::Synthesis(t)) => Loaded::Synthesis(Box::new(c), Box::new(t.nets)),
        _ => unreachable!("trainer stage follows the config"),
    })
}

fn load_manipulation(path: &Path) -> Result<(ManipulationConfig, ManipNetworks)> {
    match load_model(path)? {
        Loaded::Manipulation(c, n) => Ok((*c, *n)),
        Loaded::Synthesis(..) => Err(Error::Usage(format!("{} is a synthesis checkpoint", path.display()))),
    }
}

fn load_synthesis(path: &Path) -> Result<(SynthesisConfig, SynthNetworks)> {
    match load_model(path)? {
        Loaded::Synthesis(c, n) => Ok((*c, *n)),
        Loaded::Manipulation(..) => Err(Error::Usage(format!("{} is a manipulation checkpoint", path.display()))),
    }
}

pub fn read_mask(path: &Path, num_classes: usize) -> Result<SemanticMask> {
    decode_mask(&read_class_png(path)?, num_classes)
}

fn batch_of(t: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    t.reshape(&shape)
}

/// Parses `1,0,1` or `101`.
pub fn parse_bits(text: &str, n: usize) -> Result<AttributeAssignment> {
    let bits: Vec<u8> = text
        .chars()
        .filter(|c| !matches!(c, ',' | ' '))
        .map(|c| match c {
            '0' => Ok(0),
            '1' => Ok(1),
            _ => Err(Error::Usage(format!("target bits must be 0 or 1, got `{c}`"))),
        })
        .collect::<Result<_>>()?;
    if bits.len() != n {
        return Err(Error::Usage(format!("target has {} bits for {n} domains", bits.len())));
    }
    AttributeAssignment::new(bits)
}

pub struct TranslateRequest<'a> {
    pub checkpoint: &'a Path,
    pub mask: &'a Path,
    pub mode: TranslateMode,
    pub target: &'a str,
    pub reference: Option<&'a Path>,
    pub num: usize,
    pub seed: u64,
    pub out: &'a Path,
}

/// Writes `<stem>_kNN.png` for `k < num`.
pub fn translate_file(req: &TranslateRequest<'_>) -> Result<Vec<PathBuf>> {
    if req.mode == TranslateMode::Reference && req.reference.is_none() {
        return Err(Error::Usage("reference mode needs --ref".into()));
    }
    if req.num == 0 {
        return Err(Error::Usage("--num must be at least 1".into()));
    }
    let (cfg, nets) = load_manipulation(req.checkpoint)?;
    let r = cfg.model.num_classes;
    let target = parse_bits(req.target, cfg.model.num_domains())?;
    let x = batch_of(&read_mask(req.mask, r)?.to_onehot())?;
    let reference = req
        .reference
        .map(|p| read_mask(p, r).and_then(|m| batch_of(&m.to_onehot())))
        .transpose()?;
    std::fs::create_dir_all(req.out).map_err(|e| Error::io(req.out, e))?;
    let stem = req.mask.file_stem().and_then(|s| s.to_str()).unwrap_or("mask");
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let mut written = Vec::with_capacity(req.num);
    for k in 0..req.num {
        let out = translate(&nets, &x, req.mode, reference.as_ref(), std::slice::from_ref(&target), &mut rng)?;
        let path = req.out.join(format!("{stem}_k{k:02}.png"));
        write_class_png(&path, &out[0].to_raster())?;
        written.push(path);
    }
    Ok(written)
}

/// Style source for synthesis: latent noise or an exemplar image and mask.
pub enum StyleSource<'a> {
    Latent,
    Reference { image: &'a Path, mask: &'a Path },
}

fn style_matrix(
    cfg: &SynthesisConfig,
    nets: &SynthNetworks,
    style: &StyleSource<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let _g = crate::autograd::no_grad();
    Ok(match style {
        StyleSource::Latent => nets.synth_map(&Var::constant(nets.sample_latent(1, rng)))?.tensor(),
        StyleSource::Reference { image, mask } => {
            let img = batch_of(&read_rgb_png(image)?)?;
            let m = batch_of(&read_mask(mask, cfg.model.num_classes)?.to_onehot())?;
            nets.synth_encode(&Var::constant(img), &m)?.tensor()
        }
    })
}

/// One RGB image for `mask`; noise and latent style come from `seed`.
pub fn synthesize_file(checkpoint: &Path, mask: &Path, style: &StyleSource<'_>, seed: u64, out: &Path) -> Result<()> {
    let (cfg, nets) = load_synthesis(checkpoint)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sm = style_matrix(&cfg, &nets, style, &mut rng)?;
    let _g = crate::autograd::no_grad();
    let m = batch_of(&read_mask(mask, cfg.model.num_classes)?.to_onehot())?;
    let noise = nets.generator.sample_noise(1, &mut rng);
    let img = nets.synth_generate(&m, &Var::constant(sm), &noise)?.tensor();
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_rgb_png(out, &img.reshape(&img.shape()[1..])?)
}

/// Frames `frame_NNNNN.png`, one per mask in `masks` (sorted by name).
pub fn reenact_dir(checkpoint: &Path, masks: &Path, style: &StyleSource<'_>, seed: u64, out: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(masks)
        .map_err(|e| Error::io(masks, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    if files.is_empty() {
        return Err(Error::Usage(format!("{} has no mask frames", masks.display())));
    }
    files.sort();
    let (cfg, nets) = load_synthesis(checkpoint)?;
    let frames: Vec<SemanticMask> = files
        .iter()
        .map(|p| read_mask(p, cfg.model.num_classes))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sm = style_matrix(&cfg, &nets, style, &mut rng)?;
    let images = reenact(&nets, &frames, &sm, seed)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let path = out.join(format!("frame_{i:05}.png"));
        write_rgb_png(&path, img)?;
        written.push(path);
    }
    Ok(written)
}

pub struct EvaluateRequest<'a> {
    pub checkpoint: &'a Path,
    pub providers: &'a ProviderConfig,
    pub transforms: usize,
    pub seed: u64,
    /// Replace the trained translator with the identity map.
    pub identity: bool,
    pub dump: Option<&'a Path>,
}

pub fn evaluate_checkpoint(req: &EvaluateRequest<'_>) -> Result<Report> {
    match load_model(req.checkpoint)? {
        Loaded::Manipulation(cfg, nets) => {
            let config = Config::Manipulation((*cfg).clone());
            let (_, test) = load_splits(&config)?;
            let m = &cfg.model;
            let providers = req.providers.resolve(
                m.num_classes * m.resolution * m.resolution,
                cfg.dataset.toy.as_ref(),
                true,
            )?;
            let net = NetTranslator(&nets);
            let translator: &dyn super::evaluate::MaskTranslator = if req.identity { &IdentityTranslator } else { &net };
            evaluate_manipulation(translator, &m.domains, &test, &providers, req.transforms, req.seed, req.dump)
        }
        Loaded::Synthesis(cfg, nets) => {
            if req.identity {
                return Err(Error::Usage("--identity applies to manipulation checkpoints".into()));
            }
            let config = Config::Synthesis((*cfg).clone());
            let (_, test) = load_splits(&config)?;
            let res = cfg.model.resolution;
            let providers = req.providers.resolve(3 * res * res, cfg.dataset.toy.as_ref(), false)?;
            evaluate_synthesis(&nets, &test, &providers, req.transforms, req.seed, req.dump)
        }
    }
}
