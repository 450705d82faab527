//! Pluggable stand-ins for the pretrained networks an evaluation needs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{PredictionRow, PredictionTable};
use crate::data::{toy_attribute_oracle, AttributeRule, SemanticMask, HEAD};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Maps a sample to a feature vector for FID.
pub trait Embedder {
    fn embed(&self, x: &Tensor) -> Result<Vec<f64>>;
}

/// Distance between two samples for diversity.
pub trait PerceptualDistance {
    fn distance(&self, a: &Tensor, b: &Tensor) -> Result<f64>;
}

/// Attribute scores and head pose for a generated sample.
pub trait Predictor {
    fn attributes(&self) -> Vec<String>;
    /// Scores in [0, 1] and (roll, pitch, yaw) in degrees.
    fn predict(&self, mask: &SemanticMask, image: Option<&Tensor>) -> Result<(Vec<f64>, [f64; 3])>;

    fn table(&self, items: &[(String, &SemanticMask, Option<&Tensor>)]) -> Result<PredictionTable> {
        let mut t = PredictionTable::new(self.attributes());
        for (id, mask, image) in items {
            let (scores, pose) = self.predict(mask, *image)?;
            t.push(PredictionRow {
                id: id.clone(),
                scores,
                pose,
            })?;
        }
        Ok(t)
    }
}

/// Fixed Gaussian random projection, `dim × input_len`, scaled by
/// `1/√input_len`.
#[derive(Clone, Debug)]
pub struct RandomProjection {
    input_len: usize,
    dim: usize,
    weights: Vec<f64>,
}

impl RandomProjection {
    pub fn new(input_len: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (input_len.max(1) as f64).sqrt();
        let weights = (0..input_len * dim)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                scale * v
            })
            .collect();
        Self {
            input_len,
            dim,
            weights,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

impl Embedder for RandomProjection {
    fn embed(&self, x: &Tensor) -> Result<Vec<f64>> {
        if x.numel() != self.input_len {
            return Err(Error::dim(format!(
                "projection expects {} values, got {:?}",
                self.input_len,
                x.shape()
            )));
        }
        Ok(self
            .weights
            .chunks(self.input_len)
            .map(|row| row.iter().zip(x.data()).map(|(w, v)| w * v).sum())
            .collect())
    }
}

/// Mean absolute element difference.
#[derive(Clone, Copy, Debug, Default)]
pub struct PixelL1;

impl PerceptualDistance for PixelL1 {
    fn distance(&self, a: &Tensor, b: &Tensor) -> Result<f64> {
        if a.shape() != b.shape() {
            return Err(Error::dim(format!("distance of {:?} and {:?}", a.shape(), b.shape())));
        }
        let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
        Ok(s / a.numel().max(1) as f64)
    }
}

/// Rule oracles for attribute scores (0 or 1) and a pose read off the head
/// region's moments: centroid offsets give yaw and pitch, the principal
/// axis gives roll.
#[derive(Clone, Debug)]
pub struct ToyPredictor {
    pub rules: Vec<AttributeRule>,
    pub min_pixels: usize,
}

/// Degrees of yaw or pitch for a centroid at the image edge.
const TOY_POSE_RANGE: f64 = 45.0;

impl Predictor for ToyPredictor {
    fn attributes(&self) -> Vec<String> {
        self.rules.iter().map(|r| r.name.clone()).collect()
    }

    fn predict(&self, mask: &SemanticMask, _image: Option<&Tensor>) -> Result<(Vec<f64>, [f64; 3])> {
        let scores = self
            .rules
            .iter()
            .map(|r| toy_attribute_oracle(mask, r, self.min_pixels) as u8 as f64)
            .collect();
        Ok((scores, head_pose(mask)))
    }
}

fn head_pose(mask: &SemanticMask) -> [f64; 3] {
    let (h, w) = (mask.height(), mask.width());
    let pts: Vec<(f64, f64)> = mask
        .labels()
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == HEAD)
        .map(|(p, _)| ((p % w) as f64, (p / w) as f64))
        .collect();
    if pts.is_empty() {
        return [0.0; 3];
    }
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (x, y) in &pts {
        sxx += (x - cx).powi(2);
        syy += (y - cy).powi(2);
        sxy += (x - cx) * (y - cy);
    }
    let roll = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let yaw = TOY_POSE_RANGE * (2.0 * cx / (w - 1).max(1) as f64 - 1.0);
    let pitch = TOY_POSE_RANGE * (2.0 * cy / (h - 1).max(1) as f64 - 1.0);
    [roll.to_degrees(), pitch, yaw]
}
