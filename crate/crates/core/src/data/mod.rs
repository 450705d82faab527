//! Masks, images, attribute labels and batching.

mod mask;
mod toy;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use mask::{
    decode_mask, encode_mask, read_class_png, read_rgb_png, write_class_png, write_rgb_png, ClassRaster,
    SemanticMask,
};
pub use toy::{
    make_toy_dataset, make_toy_range, make_toy_sample, toy_attribute_oracle, AttributeRule, RuleShape, ToySpec,
    BACKGROUND, HAIR, HEAD,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Binary presence vector over the attribute domains.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AttributeAssignment(Vec<u8>);

impl AttributeAssignment {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::Invariant(format!("attribute bit must be 0 or 1, got {b}")));
        }
        Ok(Self(bits))
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.0[i] == 1
    }

    pub fn with(&self, i: usize, on: bool) -> Self {
        let mut bits = self.0.clone();
        bits[i] = on as u8;
        Self(bits)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub mask: SemanticMask,
    /// `[3, H, W]` in [-1, 1].
    pub image: Option<Tensor>,
    pub labels: AttributeAssignment,
}

impl Sample {
    pub fn flip_horizontal(&self) -> Sample {
        let image = self.image.as_ref().map(|img| {
            let &[c, h, w] = img.shape() else { unreachable!() };
            let mut data = img.data().to_vec();
            for row in data.chunks_mut(w) {
                row.reverse();
            }
            Tensor::from_vec(&[c, h, w], data)
        });
        Sample {
            id: self.id.clone(),
            mask: self.mask.flip_horizontal(),
            image,
            labels: self.labels.clone(),
        }
    }
}

/// A stacked minibatch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `[B, R, H, W]` one-hot.
    pub masks: Tensor,
    /// `[B, 3, H, W]` when every sample carries an image.
    pub images: Option<Tensor>,
    pub labels: Vec<AttributeAssignment>,
}

impl Batch {
    pub fn from_samples(samples: &[&Sample]) -> Result<Batch> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Usage("cannot build an empty batch".into()))?;
        let (r, h, w) = (first.mask.num_classes(), first.mask.height(), first.mask.width());
        let mut masks = Vec::with_capacity(samples.len() * r * h * w);
        for s in samples {
            if (s.mask.num_classes(), s.mask.height(), s.mask.width()) != (r, h, w) {
                return Err(Error::dim(format!("sample {} does not match batch mask shape", s.id)));
            }
            masks.extend_from_slice(s.mask.to_onehot().data());
        }
        let images = if samples.iter().all(|s| s.image.is_some()) {
            let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
            for s in samples {
                let img = s.image.as_ref().unwrap();
                if img.shape() != [3, h, w] {
                    return Err(Error::dim(format!("sample {} image is {:?}", s.id, img.shape())));
                }
                data.extend_from_slice(img.data());
            }
            Some(Tensor::from_vec(&[samples.len(), 3, h, w], data))
        } else {
            None
        };
        Ok(Batch {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            masks: Tensor::from_vec(&[samples.len(), r, h, w], masks),
            images,
            labels: samples.iter().map(|s| s.labels.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Labels as a `[B, N]` 0/1 tensor.
    pub fn label_tensor(&self) -> Tensor {
        let n = self.labels.first().map_or(0, |l| l.len());
        let data = self
            .labels
            .iter()
            .flat_map(|l| l.bits().iter().map(|&b| b as f64))
            .collect();
        Tensor::from_vec(&[self.len(), n], data)
    }
}

/// Deterministic batch schedule: a seeded permutation per epoch, tail dropped.
///
/// Random access by global step makes resuming trivial: batch `k` is a pure
/// function of `(len, batch_size, seed, k)`.
#[derive(Clone, Debug)]
pub struct BatchPlan {
    len: usize,
    batch_size: usize,
    seed: u64,
}

impl BatchPlan {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::Usage("batch size must be at least 2".into()));
        }
        if len < batch_size {
            return Err(Error::Usage(format!(
                "dataset of {len} samples cannot fill a batch of {batch_size}"
            )));
        }
        Ok(Self { len, batch_size, seed })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len / self.batch_size
    }

    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        let mut order: Vec<usize> = (0..self.len).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Sample indices of the `step`-th batch counted across epochs.
    pub fn indices(&self, step: u64) -> Vec<usize> {
        let per = self.batches_per_epoch() as u64;
        let order = self.epoch_order(step / per);
        let start = (step % per) as usize * self.batch_size;
        order[start..start + self.batch_size].to_vec()
    }

    pub fn batch(&self, samples: &[Sample], step: u64) -> Result<Batch> {
        if samples.len() != self.len {
            return Err(Error::Usage("dataset size changed under the batch plan".into()));
        }
        let picked: Vec<&Sample> = self.indices(step).into_iter().map(|i| &samples[i]).collect();
        Batch::from_samples(&picked)
    }
}

/// All batches of `epochs` epochs in order.
pub fn batches(samples: &[Sample], batch_size: usize, seed: u64, epochs: u64) -> Result<Vec<Batch>> {
    let plan = BatchPlan::new(samples.len(), batch_size, seed)?;
    let total = plan.batches_per_epoch() as u64 * epochs;
    (0..total).map(|k| plan.batch(samples, k)).collect()
}

/// One attribute column of the on-disk table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeColumn {
    /// Header name in `attributes.csv`.
    pub column: String,
    /// Treat the column's "present" value as absence (e.g. `No_Beard`).
    #[serde(default)]
    pub invert: bool,
}

/// Loads `root/masks/<id>.png`, optional `root/images/<id>.png` and
/// `root/attributes.csv` (header `id,attr1,...`; values 1 for present and
/// 0 or -1 for absent).
pub fn load_directory(
    root: &Path,
    num_classes: usize,
    columns: &[AttributeColumn],
    with_images: bool,
) -> Result<Vec<Sample>> {
    let table = root.join("attributes.csv");
    let mut reader = csv::Reader::from_path(&table).map_err(|e| Error::Format(format!("{}: {e}", table.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Format(format!("{}: {e}", table.display())))?
        .clone();
    if headers.get(0) != Some("id") {
        return Err(Error::Format(format!("{}: first column must be `id`", table.display())));
    }
    let index: BTreeMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
    let picks: Vec<(usize, bool)> = columns
        .iter()
        .map(|c| {
            index
                .get(c.column.as_str())
                .map(|&i| (i, c.invert))
                .ok_or_else(|| Error::Format(format!("{}: no column `{}`", table.display(), c.column)))
        })
        .collect::<Result<_>>()?;

    let mut samples = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Format(format!("{}: {e}", table.display())))?;
        let id = record[0].trim().to_string();
        let mut bits = Vec::with_capacity(picks.len());
        for &(col, invert) in &picks {
            let raw = record.get(col).unwrap_or("").trim();
            let present = match raw {
                "1" => true,
                "0" | "-1" => false,
                other => {
                    return Err(Error::Format(format!(
                        "{} row {}: attribute value `{other}` is not 1, 0 or -1",
                        table.display(),
                        line + 2
                    )))
                }
            };
            bits.push((present != invert) as u8);
        }
        let mask = decode_mask(&read_class_png(&root.join("masks").join(format!("{id}.png")))?, num_classes)?;
        let image = if with_images {
            let img = read_rgb_png(&root.join("images").join(format!("{id}.png")))?;
            if img.shape()[1..] != [mask.height(), mask.width()] {
                return Err(Error::Format(format!("{id}: image and mask sizes differ")));
            }
            Some(img)
        } else {
            None
        };
        samples.push(Sample {
            id,
            mask,
            image,
            labels: AttributeAssignment::new(bits)?,
        });
    }
    if samples.is_empty() {
        return Err(Error::Format(format!("{}: no samples", table.display())));
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn toy(n: usize) -> Vec<Sample> {
        let spec = ToySpec {
            resolution: 16,
            num_classes: 4,
            rules: vec![AttributeRule {
                name: "bar".into(),
                region: 3,
                shape: RuleShape::Bar,
                presence: 0.5,
            }],
            seed: 3,
            min_pixels: 4,
            rgb: true,
        };
        make_toy_dataset(&spec, n).unwrap()
    }

    #[test]
    fn same_seed_same_order() {
        let data = toy(10);
        let a = batches(&data, 3, 7, 2).unwrap();
        let b = batches(&data, 3, 7, 2).unwrap();
        assert_eq!(a.len(), 6);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.ids, y.ids);
        }
    }

    #[test]
    fn each_epoch_visits_samples_once() {
        let data = toy(10);
        let plan = BatchPlan::new(10, 3, 1).unwrap();
        for epoch in 0..3u64 {
            let mut seen = BTreeSet::new();
            for k in 0..3 {
                for i in plan.indices(epoch * 3 + k) {
                    assert!(seen.insert(i));
                }
            }
            assert_eq!(seen.len(), 9);
        }
        let b = plan.batch(&data, 0).unwrap();
        assert_eq!(b.masks.shape(), &[3, 4, 16, 16]);
        assert_eq!(b.images.unwrap().shape(), &[3, 3, 16, 16]);
    }

    #[test]
    fn different_seeds_usually_differ() {
        let differ = (0..50u64)
            .filter(|&s| {
                let a = BatchPlan::new(100, 4, s).unwrap().indices(0);
                let b = BatchPlan::new(100, 4, s + 1000).unwrap().indices(0);
                a != b
            })
            .count();
        assert!(differ >= 49);
    }

    #[test]
    fn batch_size_one_is_rejected() {
        assert!(matches!(BatchPlan::new(10, 1, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn hflip_is_an_involution() {
        let s = &toy(1)[0];
        assert_eq!(&s.flip_horizontal().flip_horizontal(), s);
    }

    #[test]
    fn directory_loader_reads_pairs() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("masks")).unwrap();
        std::fs::create_dir(dir.path().join("images")).unwrap();
        let data = toy(3);
        let mut csv = String::from("id,Bar,No_Bar\n");
        for s in &data {
            write_class_png(&dir.path().join("masks").join(format!("{}.png", s.id)), &s.mask.to_raster()).unwrap();
            write_rgb_png(&dir.path().join("images").join(format!("{}.png", s.id)), s.image.as_ref().unwrap())
                .unwrap();
            let b = s.labels.bits()[0];
            csv += &format!("{},{},{}\n", s.id, if b == 1 { "1" } else { "-1" }, 1 - b);
        }
        std::fs::write(dir.path().join("attributes.csv"), csv).unwrap();
        let cols = [
            AttributeColumn { column: "Bar".into(), invert: false },
            AttributeColumn { column: "No_Bar".into(), invert: true },
        ];
        let loaded = load_directory(dir.path(), 4, &cols, true).unwrap();
        for (a, b) in loaded.iter().zip(&data) {
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.labels.bits()[0], b.labels.bits()[0]);
            assert_eq!(a.labels.bits()[1], b.labels.bits()[0]);
        }
        let missing = [AttributeColumn { column: "Hat".into(), invert: false }];
        assert!(matches!(load_directory(dir.path(), 4, &missing, false), Err(Error::Format(_))));
    }
}
