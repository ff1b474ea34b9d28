//! Synthetic quadrant-saliency data, IDX ingestion and seeded splits.
//!
//! Every image is faint uniform noise plus one bright square lying wholly
//! inside one quadrant; the label is that quadrant (0 top-left, 1 top-right,
//! 2 bottom-left, 3 bottom-right). The square's box is kept for saliency
//! checks and never shown to the model.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_container, write_container};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_QUADRANTS: usize = 4;

/// Axis-aligned pixel box, half-open.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl BBox {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }

    /// Whether the box meets the `size×size` cell with top-left `(y, x)`.
    pub fn overlaps_cell(&self, y: usize, x: usize, size: usize) -> bool {
        y < self.top + self.height
            && self.top < y + size
            && x < self.left + self.width
            && self.left < x + size
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[H, W, C]`
    pub image: Tensor,
    pub label: usize,
    pub bbox: Option<BBox>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// First `n` samples (or all, if fewer).
    pub fn head(&self, n: usize) -> Dataset {
        Dataset {
            samples: self.samples.iter().take(n).cloned().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub image_size: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub noise_amplitude: f32,
    pub object_intensity: f32,
    pub object_min: usize,
    pub object_max: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            image_size: 32,
            train: 4096,
            val: 512,
            test: 512,
            noise_amplitude: 0.1,
            object_intensity: 1.0,
            object_min: 6,
            object_max: 10,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || !self.image_size.is_multiple_of(2) {
            return fail(format!(
                "image size {} must be even and positive",
                self.image_size
            ));
        }
        if self.object_min == 0 || self.object_min > self.object_max {
            return fail(format!(
                "object size range {}..={} is empty",
                self.object_min, self.object_max
            ));
        }
        if self.object_max > self.image_size / 2 {
            return fail(format!(
                "objects up to {} px do not fit a {} px quadrant",
                self.object_max,
                self.image_size / 2
            ));
        }
        if !(self.noise_amplitude >= 0.0 && self.noise_amplitude.is_finite()) {
            return fail("noise amplitude must be finite and non-negative".into());
        }
        if !self.object_intensity.is_finite() || self.object_intensity <= self.noise_amplitude {
            return fail("object intensity must exceed the noise amplitude".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Draws sample `index` of split `split` from its own seeded stream.
pub fn generate_sample(spec: &DatasetSpec, split: u64, index: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream((split << 40) | index);
    let n = spec.image_size;
    let half = n / 2;
    let label = rng.gen_range(0..NUM_QUADRANTS);
    let size = rng.gen_range(spec.object_min..=spec.object_max);
    let (qy, qx) = (label / 2, label % 2);
    let top = qy * half + rng.gen_range(0..=half - size);
    let left = qx * half + rng.gen_range(0..=half - size);
    let bbox = BBox {
        top,
        left,
        height: size,
        width: size,
    };
    let amp = spec.noise_amplitude;
    let mut data = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let noise = if amp > 0.0 {
                rng.gen::<f32>() * amp
            } else {
                0.0
            };
            data.push(if bbox.contains(y, x) {
                spec.object_intensity
            } else {
                noise
            });
        }
    }
    Sample {
        image: Tensor::new(vec![n, n, 1], data).expect("sizes agree"),
        label,
        bbox: Some(bbox),
    }
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Splits> {
    spec.validate()?;
    let make = |split: u64, count: usize| Dataset {
        samples: (0..count as u64)
            .map(|i| generate_sample(spec, split, i))
            .collect(),
    };
    Ok(Splits {
        train: make(0, spec.train),
        val: make(1, spec.val),
        test: make(2, spec.test),
    })
}

fn read_be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Truncated(format!("{what}: header ends at byte {}", bytes.len())))
}

/// Parses IDX image bytes (magic `0x00000803`) into `[rows, cols, 1]`
/// tensors scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let magic = read_be_u32(bytes, 0, "IDX images")?;
    if magic != 0x0803 {
        return Err(Error::BadMagic {
            expected: 0x0803u32.to_be_bytes().to_vec(),
            found: bytes[..4].to_vec(),
        });
    }
    let n = read_be_u32(bytes, 4, "IDX images")? as usize;
    let rows = read_be_u32(bytes, 8, "IDX images")? as usize;
    let cols = read_be_u32(bytes, 12, "IDX images")? as usize;
    let payload = &bytes[16..];
    let len = n * rows * cols;
    if payload.len() < len {
        return Err(Error::Truncated(format!(
            "IDX images: expected {len} pixel bytes, found {}",
            payload.len()
        )));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::Format("IDX images: zero image dimension".into()));
    }
    Ok(payload[..len]
        .chunks_exact(rows * cols)
        .map(|px| {
            let data = px.iter().map(|&b| b as f32 / 255.0).collect();
            Tensor::new(vec![rows, cols, 1], data).expect("sizes agree")
        })
        .collect())
}

/// Parses IDX label bytes (magic `0x00000801`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_be_u32(bytes, 0, "IDX labels")?;
    if magic != 0x0801 {
        return Err(Error::BadMagic {
            expected: 0x0801u32.to_be_bytes().to_vec(),
            found: bytes[..4].to_vec(),
        });
    }
    let n = read_be_u32(bytes, 4, "IDX labels")? as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return Err(Error::Truncated(format!(
            "IDX labels: expected {n} label bytes, found {}",
            payload.len()
        )));
    }
    Ok(payload[..n].iter().map(|&b| b as usize).collect())
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let ib = std::fs::read(images).map_err(|e| Error::io(images, e))?;
    let lb = std::fs::read(labels).map_err(|e| Error::io(labels, e))?;
    let imgs = parse_idx_images(&ib)?;
    let labs = parse_idx_labels(&lb)?;
    if imgs.len() != labs.len() {
        return Err(Error::Format(format!(
            "{} images but {} labels",
            imgs.len(),
            labs.len()
        )));
    }
    Ok(Dataset {
        samples: imgs
            .into_iter()
            .zip(labs)
            .map(|(image, label)| Sample {
                image,
                label,
                bbox: None,
            })
            .collect(),
    })
}

/// Seeded shuffle, then consecutive chunks with boundaries at the rounded
/// cumulative fractions.
pub fn split(dataset: &Dataset, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>> {
    if fractions.is_empty() || fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::InvalidArgument(format!(
            "bad split fractions {fractions:?}"
        )));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions sum to {sum}, not 1"
        )));
    }
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = Vec::with_capacity(fractions.len());
    let (mut cum, mut start) = (0.0, 0);
    for (i, f) in fractions.iter().enumerate() {
        cum += f;
        let end = if i + 1 == fractions.len() {
            n
        } else {
            ((cum * n as f64).round() as usize).min(n)
        };
        out.push(Dataset {
            samples: order[start..end]
                .iter()
                .map(|&j| dataset.samples[j].clone())
                .collect(),
        });
        start = end;
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    kind: String,
    splits: Vec<String>,
}

/// Caches splits in the checkpoint container: per split an image stack,
/// labels, and boxes (`-1` rows when absent).
pub fn save_splits(path: &Path, splits: &Splits) -> Result<()> {
    let parts = [
        ("train", &splits.train),
        ("val", &splits.val),
        ("test", &splits.test),
    ];
    let mut tensors = Vec::new();
    for (name, ds) in parts {
        if ds.is_empty() {
            continue;
        }
        let shape = ds.samples[0].image.shape().to_vec();
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let mut boxes = Vec::new();
        for s in &ds.samples {
            if s.image.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "save_splits",
                    lhs: shape.clone(),
                    rhs: s.image.shape().to_vec(),
                });
            }
            images.extend_from_slice(s.image.data());
            labels.push(s.label as f32);
            match s.bbox {
                Some(b) => boxes.extend([b.top, b.left, b.height, b.width].map(|v| v as f32)),
                None => boxes.extend([-1.0; 4]),
            }
        }
        let n = ds.len();
        let mut ishape = vec![n];
        ishape.extend(&shape);
        tensors.push((format!("{name}.images"), Tensor::new(ishape, images)?));
        tensors.push((format!("{name}.labels"), Tensor::new(vec![n], labels)?));
        tensors.push((format!("{name}.boxes"), Tensor::new(vec![n, 4], boxes)?));
    }
    let meta = DatasetMeta {
        kind: "dataset".into(),
        splits: parts.iter().map(|(n, _)| n.to_string()).collect(),
    };
    write_container(path, &serde_json::to_string(&meta)?, &tensors)
}

pub fn load_splits(path: &Path) -> Result<Splits> {
    let (meta, tensors) = read_container(path)?;
    let meta: DatasetMeta = serde_json::from_str(&meta)?;
    if meta.kind != "dataset" {
        return Err(Error::Format(format!(
            "{} holds a {}, not a dataset",
            path.display(),
            meta.kind
        )));
    }
    let find = |name: &str| tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t);
    let load = |split: &str| -> Result<Dataset> {
        let (Some(images), Some(labels), Some(boxes)) = (
            find(&format!("{split}.images")),
            find(&format!("{split}.labels")),
            find(&format!("{split}.boxes")),
        ) else {
            return Ok(Dataset::default());
        };
        let n = labels.numel();
        let shape = images.shape()[1..].to_vec();
        let per: usize = shape.iter().product();
        if images.shape()[0] != n || boxes.shape() != [n, 4] {
            return Err(Error::Format(format!(
                "{split}: inconsistent dataset tensors"
            )));
        }
        let samples = (0..n)
            .map(|i| {
                let b = &boxes.data()[i * 4..i * 4 + 4];
                Sample {
                    image: Tensor::new(
                        shape.clone(),
                        images.data()[i * per..(i + 1) * per].to_vec(),
                    )
                    .expect("sizes agree"),
                    label: labels.data()[i] as usize,
                    bbox: (b[0] >= 0.0).then(|| BBox {
                        top: b[0] as usize,
                        left: b[1] as usize,
                        height: b[2] as usize,
                        width: b[3] as usize,
                    }),
                }
            })
            .collect();
        Ok(Dataset { samples })
    };
    Ok(Splits {
        train: load("train")?,
        val: load("val")?,
        test: load("test")?,
    })
}
