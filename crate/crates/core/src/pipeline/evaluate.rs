//! The evaluation protocol: every test input is translated `K` times per
//! attribute flip, then scored with the configured providers.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ToyDataConfig;
use crate::data::{write_class_png, write_rgb_png, AttributeAssignment, Sample, SemanticMask};
use crate::error::{Error, Result};
use crate::manipulation::{cycle_reconstruct, stack_masks, translate, ManipNetworks, TranslateMode};
use crate::metrics::{
    ap_f1, diversity, fid_of, miou, pose_rmse, Embedder, PerceptualDistance, PixelL1, PredictionRow, PredictionTable,
    Predictor, RandomProjection, Spread, ToyPredictor,
};
use crate::synthesis::SynthNetworks;
use crate::tensor::Tensor;
use crate::Var;

/// Transformations per input in the evaluation protocol.
pub const DEFAULT_TRANSFORMS: usize = 10;
const CHUNK: usize = 16;

fn default_embed_dim() -> usize {
    64
}

/// Names the providers; see [`ProviderConfig::resolve`] for the known ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    #[serde(default)]
    pub embedder: Option<String>,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default)]
    pub distance: Option<String>,
    #[serde(default)]
    pub predictor: Option<String>,
    #[serde(default)]
    pub seed: u64,
}

impl ProviderConfig {
    pub fn toy() -> Self {
        Self {
            embedder: Some("random_projection".into()),
            embed_dim: default_embed_dim(),
            distance: Some("pixel_l1".into()),
            predictor: Some("toy_oracle".into()),
            seed: 0,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let de = toml::Deserializer::parse(&text).map_err(|e| Error::Config {
            path: String::new(),
            message: e.message().to_string(),
        })?;
        serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: e.path().to_string(),
            message: e.inner().message().to_string(),
        })
    }

    /// Known names: embedder `random_projection`, distance `pixel_l1`,
    /// predictor `toy_oracle` (needs toy data rules).
    pub fn resolve(&self, input_len: usize, toy: Option<&ToyDataConfig>, need_predictor: bool) -> Result<Providers> {
        let missing = |what: &str| Error::Usage(format!("provider `{what}` is not configured"));
        let unknown = |what: &str, name: &str| Error::Usage(format!("unknown {what} provider `{name}`"));
        let embedder: Box<dyn Embedder> = match self.embedder.as_deref() {
            None => return Err(missing("embedder")),
            Some("random_projection") => Box::new(RandomProjection::new(input_len, self.embed_dim, self.seed)),
            Some(n) => return Err(unknown("embedder", n)),
        };
        let distance: Box<dyn PerceptualDistance> = match self.distance.as_deref() {
            None => return Err(missing("distance")),
            Some("pixel_l1") => Box::new(PixelL1),
            Some(n) => return Err(unknown("distance", n)),
        };
        let predictor: Option<Box<dyn Predictor>> = match self.predictor.as_deref() {
            None if need_predictor => return Err(missing("predictor")),
            None => None,
            Some("toy_oracle") => {
                let toy = toy.ok_or_else(|| Error::Usage("provider `toy_oracle` needs a toy dataset".into()))?;
                Some(Box::new(ToyPredictor {
                    rules: toy.rules.clone(),
                    min_pixels: toy.min_pixels,
                }))
            }
            Some(n) => return Err(unknown("predictor", n)),
        };
        Ok(Providers {
            embedder,
            distance,
            predictor,
        })
    }
}

pub struct Providers {
    pub embedder: Box<dyn Embedder>,
    pub distance: Box<dyn PerceptualDistance>,
    pub predictor: Option<Box<dyn Predictor>>,
}

/// Something that edits masks toward target attributes.
pub trait MaskTranslator {
    fn translate(
        &self,
        x: &Tensor,
        source: &[AttributeAssignment],
        target: &[AttributeAssignment],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<SemanticMask>>;

    fn cycle(
        &self,
        x: &Tensor,
        source: &[AttributeAssignment],
        target: &[AttributeAssignment],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<SemanticMask>>;
}

/// Latent-mode translation with trained networks.
pub struct NetTranslator<'a>(pub &'a ManipNetworks);

impl MaskTranslator for NetTranslator<'_> {
    fn translate(
        &self,
        x: &Tensor,
        _source: &[AttributeAssignment],
        target: &[AttributeAssignment],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<SemanticMask>> {
        translate(self.0, x, TranslateMode::Latent, None, target, rng)
    }

    fn cycle(
        &self,
        x: &Tensor,
        source: &[AttributeAssignment],
        target: &[AttributeAssignment],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<SemanticMask>> {
        cycle_reconstruct(self.0, x, source, target, rng)
    }
}

/// Returns its input unchanged; a baseline for the report.
pub struct IdentityTranslator;

impl MaskTranslator for IdentityTranslator {
    fn translate(
        &self,
        x: &Tensor,
        _source: &[AttributeAssignment],
        _target: &[AttributeAssignment],
        _rng: &mut ChaCha8Rng,
    ) -> Result<Vec<SemanticMask>> {
        (0..x.shape()[0])
            .map(|b| SemanticMask::argmax(&x.narrow(0, b, 1)?.reshape(&x.shape()[1..])?))
            .collect()
    }

    fn cycle(
        &self,
        x: &Tensor,
        source: &[AttributeAssignment],
        target: &[AttributeAssignment],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<SemanticMask>> {
        self.translate(x, source, target, rng)
    }
}

/// One line of the report; `None` cells print as `NA`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub attribute: String,
    pub pose_rmse: Option<[f64; 3]>,
    pub ap: Option<f64>,
    pub f1: Option<f64>,
    pub miou: Option<f64>,
    pub fid: Option<f64>,
    pub diversity: Option<Spread>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

pub const REPORT_HEADER: [&str; 10] = [
    "attribute",
    "roll_rmse",
    "pitch_rmse",
    "yaw_rmse",
    "ap",
    "f1",
    "miou",
    "fid",
    "diversity",
    "diversity_std",
];

impl Report {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let cell = |v: Option<f64>| v.map_or("NA".to_string(), |x| x.to_string());
        let mut out = csv::Writer::from_writer(w);
        let err = |e: csv::Error| Error::Format(e.to_string());
        out.write_record(REPORT_HEADER).map_err(err)?;
        for r in &self.rows {
            let pose = r.pose_rmse.map(|p| p.map(Some)).unwrap_or([None; 3]);
            out.write_record([
                r.attribute.clone(),
                cell(pose[0]),
                cell(pose[1]),
                cell(pose[2]),
                cell(r.ap),
                cell(r.f1),
                cell(r.miou),
                cell(r.fid),
                cell(r.diversity.map(|d| d.mean)),
                cell(r.diversity.map(|d| d.std)),
            ])
            .map_err(err)?;
        }
        out.flush().map_err(|e| Error::Format(e.to_string()))
    }
}

fn dump_dir(dump: Option<&Path>, sub: &str) -> Result<Option<std::path::PathBuf>> {
    dump.map(|d| {
        let p = d.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    })
    .transpose()
}

/// Per-attribute manipulation report over `test`.
pub fn evaluate_manipulation(
    translator: &dyn MaskTranslator,
    domains: &[String],
    test: &[Sample],
    providers: &Providers,
    transforms: usize,
    seed: u64,
    dump: Option<&Path>,
) -> Result<Report> {
    if test.len() < 2 {
        return Err(Error::Usage("evaluation needs at least 2 test samples".into()));
    }
    if transforms < 2 {
        return Err(Error::Usage("evaluation needs at least 2 transformations per input".into()));
    }
    let predictor = providers
        .predictor
        .as_deref()
        .ok_or_else(|| Error::Usage("provider `predictor` is not configured".into()))?;
    let attrs = predictor.attributes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let real: Vec<Tensor> = test.iter().map(|s| s.mask.to_onehot()).collect();
    if let Some(dir) = dump_dir(dump, "real")? {
        for s in test {
            write_class_png(&dir.join(format!("{}.png", s.id)), &s.mask.to_raster())?;
        }
    }
    let input_poses: Vec<[f64; 3]> = test
        .iter()
        .map(|s| predictor.predict(&s.mask, None).map(|p| p.1))
        .collect::<Result<_>>()?;

    let mut report = Report::default();
    for (d, name) in domains.iter().enumerate() {
        let a = attrs
            .iter()
            .position(|x| x == name)
            .ok_or_else(|| Error::Usage(format!("predictor has no score for attribute `{name}`")))?;
        let mut outputs: Vec<Vec<SemanticMask>> = vec![Vec::with_capacity(transforms); test.len()];
        let mut cycles = Vec::with_capacity(test.len());
        for (c, chunk) in test.chunks(CHUNK).enumerate() {
            let refs: Vec<&SemanticMask> = chunk.iter().map(|s| &s.mask).collect();
            let x = stack_masks(&refs)?;
            let source: Vec<AttributeAssignment> = chunk.iter().map(|s| s.labels.clone()).collect();
            let target: Vec<AttributeAssignment> = source.iter().map(|l| l.with(d, !l.get(d))).collect();
            for _ in 0..transforms {
                for (i, m) in translator.translate(&x, &source, &target, &mut rng)?.into_iter().enumerate() {
                    outputs[c * CHUNK + i].push(m);
                }
            }
            cycles.extend(translator.cycle(&x, &source, &target, &mut rng)?);
        }

        let mut pred = PredictionTable::new(vec![name.clone()]);
        let mut reference = PredictionTable::new(vec![name.clone()]);
        let mut scores = Vec::new();
        let mut truths = Vec::new();
        let dir = dump_dir(dump, name)?;
        for (i, s) in test.iter().enumerate() {
            let want = !s.labels.get(d);
            for (k, m) in outputs[i].iter().enumerate() {
                let id = format!("{}_{k:02}", s.id);
                let (sc, pose) = predictor.predict(m, None)?;
                scores.push(sc[a]);
                truths.push(want);
                pred.push(PredictionRow {
                    id: id.clone(),
                    scores: vec![sc[a]],
                    pose,
                })?;
                reference.push(PredictionRow {
                    id: id.clone(),
                    scores: vec![want as u8 as f64],
                    pose: input_poses[i],
                })?;
                if let Some(dir) = &dir {
                    write_class_png(&dir.join(format!("{id}.png")), &m.to_raster())?;
                }
            }
        }
        let cyc: f64 = cycles
            .iter()
            .zip(test)
            .map(|(m, s)| miou(m, &s.mask))
            .sum::<Result<f64>>()?
            / test.len() as f64;
        let fakes: Vec<Tensor> = outputs.iter().flatten().map(|m| m.to_onehot()).collect();
        let groups: Vec<Vec<Tensor>> = outputs
            .iter()
            .map(|g| g.iter().map(|m| m.to_onehot()).collect())
            .collect();
        let af = ap_f1(&scores, &truths)?;
        report.rows.push(ReportRow {
            attribute: name.clone(),
            pose_rmse: Some(pose_rmse(&pred, &reference)?),
            ap: af.ap,
            f1: af.f1,
            miou: Some(cyc),
            fid: Some(fid_of(providers.embedder.as_ref(), &fakes, &real)?),
            diversity: Some(diversity(&groups, providers.distance.as_ref())?),
        });
    }
    Ok(report)
}

/// Latent-style synthesis over the test masks: FID against the real test
/// images and diversity across `transforms` styles per mask.
pub fn evaluate_synthesis(
    nets: &SynthNetworks,
    test: &[Sample],
    providers: &Providers,
    transforms: usize,
    seed: u64,
    dump: Option<&Path>,
) -> Result<Report> {
    if test.len() < 2 || transforms < 2 {
        return Err(Error::Usage("evaluation needs at least 2 test samples and 2 transformations".into()));
    }
    let _g = crate::autograd::no_grad();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let real: Vec<Tensor> = test
        .iter()
        .map(|s| {
            s.image
                .clone()
                .ok_or_else(|| Error::Usage(format!("test sample `{}` has no image", s.id)))
        })
        .collect::<Result<_>>()?;
    let dir = dump_dir(dump, "synthesis")?;
    let mut groups = Vec::with_capacity(test.len());
    for s in test {
        let mask = s.mask.to_onehot().reshape(&[1, s.mask.num_classes(), s.mask.height(), s.mask.width()])?;
        let mut g = Vec::with_capacity(transforms);
        for k in 0..transforms {
            let z = nets.sample_latent(1, &mut rng);
            let sm = nets.synth_map(&Var::constant(z))?;
            let noise = nets.generator.sample_noise(1, &mut rng);
            let img = nets.synth_generate(&mask, &sm, &noise)?.tensor();
            let img = img.reshape(&img.shape()[1..])?;
            if let Some(dir) = &dir {
                write_rgb_png(&dir.join(format!("{}_{k:02}.png", s.id)), &img)?;
            }
            g.push(img);
        }
        groups.push(g);
    }
    let fakes: Vec<Tensor> = groups.iter().flatten().cloned().collect();
    Ok(Report {
        rows: vec![ReportRow {
            attribute: "synthesis".into(),
            pose_rmse: None,
            ap: None,
            f1: None,
            miou: None,
            fid: Some(fid_of(providers.embedder.as_ref(), &fakes, &real)?),
            diversity: Some(diversity(&groups, providers.distance.as_ref())?),
        }],
    })
}
