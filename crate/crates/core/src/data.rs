//! Synthetic detection data: coloured rectangles on noise, with per-scale
//! grid targets. Stored on disk as raw image blobs plus a JSON manifest.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, input, Result};
use crate::supernet::spec::SCALE_STRIDES;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataParams {
    pub image_size: usize,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Box side limits as fractions of the image side.
    pub min_box: f64,
    pub max_box: f64,
    /// Amplitude of the uniform background noise.
    pub noise: f64,
}

impl Default for DataParams {
    fn default() -> Self {
        DataParams { image_size: 64, num_classes: 3, min_objects: 1, max_objects: 3, min_box: 0.15, max_box: 0.4, noise: 0.3 }
    }
}

impl DataParams {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(config(format!("image size {} is not a positive multiple of 32", self.image_size)));
        }
        if self.num_classes == 0 {
            return Err(config("num_classes must be at least 1"));
        }
        if self.min_objects > self.max_objects {
            return Err(config("min_objects exceeds max_objects"));
        }
        if !(self.min_box > 0.0 && self.min_box <= self.max_box) {
            return Err(config(format!("box size range [{}, {}] is empty", self.min_box, self.max_box)));
        }
        if self.max_box > 1.0 {
            return Err(config(format!("objects of {} image sides do not fit the image", self.max_box)));
        }
        if (self.min_box * self.image_size as f64).round() < 1.0 {
            return Err(config("smallest box rounds to zero pixels"));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(config("noise amplitude must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// A box in normalised image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxRecord {
    pub class: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `3 × H × W` values in `[0, 1]`.
    pub image: Vec<f32>,
    pub boxes: Vec<BoxRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub image_size: usize,
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

/// RGB of class `c` out of `n`: evenly spaced hues at full saturation.
pub fn class_color(c: usize, n: usize) -> [f32; 3] {
    let h = 6.0 * c as f64 / n as f64;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [r as f32, g as f32, b as f32]
}

pub fn gen_synthetic_dataset(n: usize, p: &DataParams, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(config("dataset needs at least one sample"));
    }
    p.validate()?;
    let s = p.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let mut image: Vec<f32> = (0..3 * s * s).map(|_| (rng.gen::<f64>() * p.noise) as f32).collect();
        let k = rng.gen_range(p.min_objects..=p.max_objects);
        let mut boxes = Vec::with_capacity(k);
        for _ in 0..k {
            let class = rng.gen_range(0..p.num_classes);
            let side = |rng: &mut ChaCha8Rng| {
                let f = rng.gen_range(p.min_box..=p.max_box);
                ((f * s as f64).round() as usize).clamp(1, s)
            };
            let (w, h) = (side(&mut rng), side(&mut rng));
            let x0 = rng.gen_range(0..=s - w);
            let y0 = rng.gen_range(0..=s - h);
            let col = class_color(class, p.num_classes);
            for (ch, &cv) in col.iter().enumerate() {
                for y in y0..y0 + h {
                    for x in x0..x0 + w {
                        let v = &mut image[(ch * s + y) * s + x];
                        *v = cv * 0.8 + *v * 0.2;
                    }
                }
            }
            let sf = s as f64;
            boxes.push(BoxRecord {
                class,
                cx: (x0 as f64 + w as f64 / 2.0) / sf,
                cy: (y0 as f64 + h as f64 / 2.0) / sf,
                w: w as f64 / sf,
                h: h as f64 / sf,
            });
        }
        samples.push(Sample { image, boxes });
    }
    Ok(Dataset { image_size: s, num_classes: p.num_classes, samples })
}

/// Targets of one scale for a batch, laid out `[n][gy][gx]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleTargets {
    pub batch: usize,
    pub grid: usize,
    pub obj: Vec<bool>,
    pub class: Vec<usize>,
    /// `(tx, ty, tw, th)`: centre offset inside the cell and box size, all in `[0, 1]`.
    pub boxes: Vec<[f64; 4]>,
}

impl ScaleTargets {
    pub fn positives(&self) -> usize {
        self.obj.iter().filter(|&&o| o).count()
    }
}

/// Images and grid targets for strides 8, 16, 32.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub targets: [ScaleTargets; 3],
}

/// Assigns every box to the cell containing its centre; a later box in the
/// same cell replaces an earlier one.
pub fn grid_targets(boxes_per_image: &[&[BoxRecord]], image_size: usize, stride: usize) -> ScaleTargets {
    let g = image_size / stride;
    let b = boxes_per_image.len();
    let mut t = ScaleTargets { batch: b, grid: g, obj: vec![false; b * g * g], class: vec![0; b * g * g], boxes: vec![[0.0; 4]; b * g * g] };
    for (n, boxes) in boxes_per_image.iter().enumerate() {
        for bx in boxes.iter() {
            let fx = bx.cx * g as f64;
            let fy = bx.cy * g as f64;
            let gx = (fx.floor() as usize).min(g - 1);
            let gy = (fy.floor() as usize).min(g - 1);
            let i = (n * g + gy) * g + gx;
            t.obj[i] = true;
            t.class[i] = bx.class;
            t.boxes[i] = [fx - gx as f64, fy - gy as f64, bx.w, bx.h];
        }
    }
    t
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            image_size: self.image_size,
            num_classes: self.num_classes,
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    pub fn batch<T: Real>(&self, idx: &[usize]) -> Result<Batch<T>> {
        if idx.is_empty() {
            return Err(input("empty batch"));
        }
        let s = self.image_size;
        let mut data = Vec::with_capacity(idx.len() * 3 * s * s);
        for &i in idx {
            let smp = self.samples.get(i).ok_or_else(|| input(format!("sample {} of {}", i, self.len())))?;
            data.extend(smp.image.iter().map(|&v| T::c(v as f64)));
        }
        let images = Tensor::new([idx.len(), 3, s, s], data)?;
        let boxes: Vec<&[BoxRecord]> = idx.iter().map(|&i| self.samples[i].boxes.as_slice()).collect();
        let targets = SCALE_STRIDES.map(|st| grid_targets(&boxes, s, st));
        Ok(Batch { images, targets })
    }

    /// Writes `sample_NNNNN.bin` blobs (little-endian `f32`) and `manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.len());
        for (i, smp) in self.samples.iter().enumerate() {
            let file = format!("sample_{:05}.bin", i);
            let bytes: Vec<u8> = smp.image.iter().flat_map(|v| v.to_le_bytes()).collect();
            fs::write(dir.join(&file), bytes)?;
            entries.push(ManifestEntry { file, boxes: smp.boxes.clone() });
        }
        let m = Manifest { image_size: self.image_size, num_classes: self.num_classes, samples: entries };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&m)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let s = m.image_size;
        let mut samples = Vec::with_capacity(m.samples.len());
        for e in m.samples {
            let bytes = fs::read(dir.join(&e.file))?;
            if bytes.len() != 3 * s * s * 4 {
                return Err(input(format!("{}: {} bytes, {} expected", e.file, bytes.len(), 3 * s * s * 4)));
            }
            let image = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            for b in &e.boxes {
                if b.class >= m.num_classes {
                    return Err(input(format!("{}: class {} of {}", e.file, b.class, m.num_classes)));
                }
            }
            samples.push(Sample { image, boxes: e.boxes });
        }
        Ok(Dataset { image_size: s, num_classes: m.num_classes, samples })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    file: String,
    boxes: Vec<BoxRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    image_size: usize,
    num_classes: usize,
    samples: Vec<ManifestEntry>,
}
