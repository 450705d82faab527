use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An 8-bit single-channel raster of class indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassRaster {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl ClassRaster {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Format(format!(
                "raster {height}x{width} needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }
}

/// One-hot per-pixel labelling over `num_classes` regions.
///
/// Stored as class indices, so the one-hot invariant holds by
/// construction; [`SemanticMask::to_onehot`] expands it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemanticMask {
    num_classes: usize,
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl SemanticMask {
    pub fn from_labels(num_classes: usize, height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        let raster = ClassRaster::new(height, width, labels)?;
        decode_mask(&raster, num_classes)
    }

    /// Validates a `[R, H, W]` tensor whose channels must sum to one with
    /// entries in {0, 1}.
    pub fn from_onehot(t: &Tensor) -> Result<Self> {
        let &[r, h, w] = t.shape() else {
            return Err(Error::Invariant(format!(
                "one-hot mask must be [R, H, W], got {:?}",
                t.shape()
            )));
        };
        if r == 0 || r > 256 {
            return Err(Error::Invariant(format!("unsupported class count {r}")));
        }
        let hw = h * w;
        let mut labels = vec![0u8; hw];
        for (p, label) in labels.iter_mut().enumerate() {
            let mut hot = None;
            for c in 0..r {
                let v = t.data()[c * hw + p];
                if v == 1.0 {
                    if hot.is_some() {
                        return Err(Error::Invariant(format!("pixel {p} has several active classes")));
                    }
                    hot = Some(c);
                } else if v != 0.0 {
                    return Err(Error::Invariant(format!("pixel {p} has non-binary entry {v}")));
                }
            }
            *label = hot.ok_or_else(|| Error::Invariant(format!("pixel {p} has no active class")))? as u8;
        }
        Ok(Self {
            num_classes: r,
            height: h,
            width: w,
            labels,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn count(&self, class: usize) -> usize {
        self.labels.iter().filter(|&&l| l as usize == class).count()
    }

    pub fn to_onehot(&self) -> Tensor {
        let hw = self.height * self.width;
        let mut data = vec![0.0; self.num_classes * hw];
        for (p, &l) in self.labels.iter().enumerate() {
            data[l as usize * hw + p] = 1.0;
        }
        Tensor::from_vec(&[self.num_classes, self.height, self.width], data)
    }

    pub fn to_raster(&self) -> ClassRaster {
        ClassRaster {
            height: self.height,
            width: self.width,
            pixels: self.labels.clone(),
        }
    }

    pub fn flip_horizontal(&self) -> SemanticMask {
        let mut labels = self.labels.clone();
        for row in labels.chunks_mut(self.width) {
            row.reverse();
        }
        Self { labels, ..self.clone() }
    }

    /// Nearest-neighbour resize; stays one-hot.
    pub fn resize(&self, height: usize, width: usize) -> SemanticMask {
        let mut labels = Vec::with_capacity(height * width);
        for y in 0..height {
            let sy = y * self.height / height;
            for x in 0..width {
                labels.push(self.labels[sy * self.width + x * self.width / width]);
            }
        }
        Self {
            num_classes: self.num_classes,
            height,
            width,
            labels,
        }
    }

    /// Per-pixel argmax over `[R, H, W]` scores; ties go to the lowest
    /// channel index.
    pub fn argmax(scores: &Tensor) -> Result<SemanticMask> {
        let &[r, h, w] = scores.shape() else {
            return Err(Error::dim(format!("argmax expects [R, H, W], got {:?}", scores.shape())));
        };
        let hw = h * w;
        let labels = (0..hw)
            .map(|p| {
                let mut best = 0;
                for c in 1..r {
                    if scores.data()[c * hw + p] > scores.data()[best * hw + p] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        Ok(Self {
            num_classes: r,
            height: h,
            width: w,
            labels,
        })
    }
}

/// One-hot expansion of a class-index raster.
pub fn decode_mask(raster: &ClassRaster, num_classes: usize) -> Result<SemanticMask> {
    if num_classes == 0 || num_classes > 256 {
        return Err(Error::Format(format!("unsupported class count {num_classes}")));
    }
    if let Some((p, &v)) = raster
        .pixels
        .iter()
        .enumerate()
        .find(|(_, &v)| v as usize >= num_classes)
    {
        return Err(Error::Format(format!(
            "pixel {p} has class {v}, but only {num_classes} classes exist"
        )));
    }
    Ok(SemanticMask {
        num_classes,
        height: raster.height,
        width: raster.width,
        labels: raster.pixels.clone(),
    })
}

/// Per-pixel argmax of a validated one-hot `[R, H, W]` tensor.
pub fn encode_mask(onehot: &Tensor) -> Result<ClassRaster> {
    Ok(SemanticMask::from_onehot(onehot)?.to_raster())
}

fn png_reader(path: &Path) -> Result<png::Reader<BufReader<File>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    decoder
        .read_info()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn read_png(path: &Path) -> Result<(usize, usize, png::ColorType, Vec<u8>)> {
    let mut reader = png_reader(path)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    buf.truncate(info.buffer_size());
    Ok((info.height as usize, info.width as usize, info.color_type, buf))
}

pub fn read_class_png(path: &Path) -> Result<ClassRaster> {
    let (h, w, color, buf) = read_png(path)?;
    if color != png::ColorType::Grayscale {
        return Err(Error::Format(format!(
            "{}: mask rasters must be single-channel 8-bit, got {color:?}",
            path.display()
        )));
    }
    ClassRaster::new(h, w, buf)
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let fail = |e: png::EncodingError| Error::Format(format!("{}: {e}", path.display()));
    let mut writer = encoder.write_header().map_err(fail)?;
    writer.write_image_data(data).map_err(fail)?;
    writer.finish().map_err(fail)
}

pub fn write_class_png(path: &Path, raster: &ClassRaster) -> Result<()> {
    write_png(path, raster.width, raster.height, png::ColorType::Grayscale, &raster.pixels)
}

/// Reads an RGB(A) or grayscale PNG into `[3, H, W]` with values in [-1, 1].
pub fn read_rgb_png(path: &Path) -> Result<Tensor> {
    let (h, w, color, buf) = read_png(path)?;
    let channels = match color {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(Error::Format(format!("{}: unexpanded palette", path.display())))
        }
    };
    let hw = h * w;
    let mut data = vec![0.0; 3 * hw];
    for p in 0..hw {
        for c in 0..3 {
            let src = if channels >= 3 { c } else { 0 };
            data[c * hw + p] = buf[p * channels + src] as f64 / 127.5 - 1.0;
        }
    }
    Ok(Tensor::from_vec(&[3, h, w], data))
}

/// Writes a `[3, H, W]` image in [-1, 1] (values outside are clamped).
pub fn write_rgb_png(path: &Path, image: &Tensor) -> Result<()> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::dim(format!("RGB image must be [3, H, W], got {:?}", image.shape())));
    };
    let hw = h * w;
    let mut bytes = vec![0u8; 3 * hw];
    for p in 0..hw {
        for c in 0..3 {
            let v = image.data()[c * hw + p].clamp(-1.0, 1.0);
            bytes[p * 3 + c] = ((v + 1.0) * 127.5).round() as u8;
        }
    }
    write_png(path, w, h, png::ColorType::Rgb, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn all_zero_raster_decodes_to_channel_zero() {
        let raster = ClassRaster::new(2, 3, vec![0; 6]).unwrap();
        let onehot = decode_mask(&raster, 4).unwrap().to_onehot();
        assert!(onehot.data()[..6].iter().all(|&v| v == 1.0));
        assert!(onehot.data()[6..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_range_class_is_a_format_error() {
        let raster = ClassRaster::new(1, 2, vec![0, 4]).unwrap();
        assert!(matches!(decode_mask(&raster, 4), Err(Error::Format(_))));
    }

    #[test]
    fn non_onehot_tensors_are_rejected() {
        let two_hot = Tensor::from_vec(&[2, 1, 1], vec![1.0, 1.0]);
        assert!(matches!(encode_mask(&two_hot), Err(Error::Invariant(_))));
        let none = Tensor::from_vec(&[2, 1, 1], vec![0.0, 0.0]);
        assert!(matches!(encode_mask(&none), Err(Error::Invariant(_))));
        let soft = Tensor::from_vec(&[2, 1, 1], vec![0.5, 0.5]);
        assert!(matches!(encode_mask(&soft), Err(Error::Invariant(_))));
    }

    #[test]
    fn argmax_breaks_ties_towards_lowest_channel() {
        let scores = Tensor::from_vec(&[3, 1, 2], vec![0.2, 0.9, 0.2, 0.9, 0.1, 0.0]);
        let m = SemanticMask::argmax(&scores).unwrap();
        assert_eq!(m.labels(), &[0, 0]);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let raster = ClassRaster::new(3, 2, vec![0, 1, 2, 3, 18, 5]).unwrap();
        let p = dir.path().join("m.png");
        write_class_png(&p, &raster).unwrap();
        assert_eq!(read_class_png(&p).unwrap(), raster);

        let img = Tensor::from_vec(&[3, 1, 2], vec![-1.0, 1.0, 0.0, 1.0, 1.0, -1.0]);
        let p = dir.path().join("i.png");
        write_rgb_png(&p, &img).unwrap();
        let back = read_rgb_png(&p).unwrap();
        assert!(back.max_abs_diff(&img) <= 1.0 / 127.5);
    }

    proptest! {
        #[test]
        fn codec_round_trips(r in 1usize..20, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
            let pixels: Vec<u8> = (0..h * w)
                .map(|i| ((seed.rotate_left(i as u32 * 7) ^ i as u64) % r as u64) as u8)
                .collect();
            let raster = ClassRaster::new(h, w, pixels).unwrap();
            let mask = decode_mask(&raster, r).unwrap();
            let onehot = mask.to_onehot();
            prop_assert_eq!(&encode_mask(&onehot).unwrap(), &raster);
            prop_assert_eq!(SemanticMask::from_onehot(&onehot).unwrap(), mask.clone());
            // argmax re-encoding is idempotent on valid masks
            prop_assert_eq!(SemanticMask::argmax(&onehot).unwrap(), mask);
        }
    }
}
