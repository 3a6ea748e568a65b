//! Label-conditioned synthetic images.
//!
//! Every label owns one motif, fixed per dataset seed. The motif kind
//! cycles with the label id so the label set spans three scales:
//! - wash: an image-wide colored grating,
//! - blob: a mid-size Gaussian spot,
//! - dot: a small bright square, a sixteenth of the image side.
//!
//! A label's motif is painted, additively over faint noise, on exactly the
//! images carrying that label. Pixel values are rounded to f32 so the dataset
//! survives a 32-bit container round trip unchanged.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{read_container, write_container_bytes, Precision, Tensor};

const LABEL_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;
const MOTIF_STREAM: u64 = 1000;
/// Probability that an image carries a label beyond its anchor label.
const EXTRA_LABEL_P: f64 = 0.3;
const NOISE: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotifKind {
    Wash,
    Blob,
    Dot,
}

impl MotifKind {
    pub fn of_label(label: usize) -> Self {
        [Self::Wash, Self::Blob, Self::Dot][label % 3]
    }
}

#[derive(Clone, Debug)]
struct Motif {
    kind: MotifKind,
    color: [f64; 3],
    /// Center (blob, dot) or spatial frequency (wash), in pixels / cycles.
    a: f64,
    b: f64,
    phase: f64,
}

impl Motif {
    fn draw(kind: MotifKind, size: usize, rng: &mut Rng) -> Self {
        let mut color = [0.0; 3];
        color.iter_mut().for_each(|c| *c = rng.uniform_range(0.2, 1.0));
        color[rng.below(3) as usize] = 1.0;
        let s = size as f64;
        let (a, b) = match kind {
            MotifKind::Wash => (1.0 + rng.below(3) as f64, rng.below(3) as f64),
            MotifKind::Blob => (rng.uniform_range(0.25 * s, 0.75 * s), rng.uniform_range(0.25 * s, 0.75 * s)),
            MotifKind::Dot => {
                let side = (size / 16).max(1);
                let cells = (size - side) as u64;
                (rng.below(cells + 1) as f64, rng.below(cells + 1) as f64)
            }
        };
        Self { kind, color, a, b, phase: rng.uniform_range(0.0, 2.0 * PI) }
    }

    fn intensity(&self, y: usize, x: usize, size: usize) -> f64 {
        let s = size as f64;
        let (yf, xf) = (y as f64, x as f64);
        match self.kind {
            MotifKind::Wash => 0.3 * (0.5 + 0.5 * (2.0 * PI * (self.a * xf + self.b * yf) / s + self.phase).cos()),
            MotifKind::Blob => {
                let sigma = s / 8.0;
                let d2 = (yf - self.a).powi(2) + (xf - self.b).powi(2);
                0.6 * (-d2 / (2.0 * sigma * sigma)).exp()
            }
            MotifKind::Dot => {
                let side = (size / 16).max(1) as f64;
                let inside = yf >= self.a && yf < self.a + side && xf >= self.b && xf < self.b + side;
                if inside {
                    0.9
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub images: usize,
    pub labels: usize,
    pub size: usize,
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub meta: DatasetMeta,
    /// (N, 3, size, size).
    pub images: Tensor,
    /// (N, T) of 0/1.
    pub truths: Tensor,
}

fn assign_labels(n: usize, t: usize, rng: &mut Rng) -> Vec<bool> {
    let mut truths = vec![false; n * t];
    for i in 0..n {
        truths[i * t + i % t] = true;
        for l in 0..t {
            if rng.uniform() < EXTRA_LABEL_P {
                truths[i * t + l] = true;
            }
        }
    }
    let need = n.div_ceil(t);
    for l in 0..t {
        let mut count = (0..n).filter(|&i| truths[i * t + l]).count();
        while count < need {
            let i = rng.below(n as u64) as usize;
            if !truths[i * t + l] {
                truths[i * t + l] = true;
                count += 1;
            }
        }
    }
    truths
}

impl SyntheticDataset {
    pub fn generate(seed: u64, n: usize, t: usize, size: usize) -> Result<Self> {
        if n == 0 || t == 0 {
            return Err(Error::InvalidArgument("dataset needs at least one image and one label".into()));
        }
        if size == 0 || size % 16 != 0 {
            return Err(Error::InvalidArgument(format!("image size {size} must be a positive multiple of 16")));
        }
        let truths = assign_labels(n, t, &mut Rng::derive(seed, LABEL_STREAM));
        let motifs: Vec<Motif> = (0..t)
            .map(|l| Motif::draw(MotifKind::of_label(l), size, &mut Rng::derive(seed, MOTIF_STREAM + l as u64)))
            .collect();
        let mut noise = Rng::derive(seed, NOISE_STREAM);
        let plane = size * size;
        let mut pixels = vec![0.0; n * 3 * plane];
        for i in 0..n {
            let img = &mut pixels[i * 3 * plane..(i + 1) * 3 * plane];
            img.iter_mut().for_each(|p| *p = NOISE * noise.uniform());
            for (l, motif) in motifs.iter().enumerate() {
                if !truths[i * t + l] {
                    continue;
                }
                for y in 0..size {
                    for x in 0..size {
                        let v = motif.intensity(y, x, size);
                        for c in 0..3 {
                            img[c * plane + y * size + x] += v * motif.color[c];
                        }
                    }
                }
            }
        }
        pixels.iter_mut().for_each(|p| *p = *p as f32 as f64);
        Ok(Self {
            meta: DatasetMeta { seed, images: n, labels: t, size },
            images: Tensor::new(pixels, &[n, 3, size, size])?,
            truths: Tensor::new(truths.iter().map(|&b| b as u8 as f64).collect(), &[n, t])?,
        })
    }

    pub fn len(&self) -> usize {
        self.meta.images
    }

    pub fn is_empty(&self) -> bool {
        self.meta.images == 0
    }

    pub fn num_labels(&self) -> usize {
        self.meta.labels
    }

    pub fn truth_flags(&self) -> Vec<bool> {
        self.truths.data().iter().map(|&v| v == 1.0).collect()
    }

    /// Images and truths of the listed samples, in order.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Tensor)> {
        let per_image = self.images.numel() / self.len();
        let t = self.num_labels();
        let mut img = Vec::with_capacity(idx.len() * per_image);
        let mut tr = Vec::with_capacity(idx.len() * t);
        for &i in idx {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!("sample {i} outside dataset of {}", self.len())));
            }
            img.extend_from_slice(&self.images.data()[i * per_image..(i + 1) * per_image]);
            tr.extend_from_slice(&self.truths.data()[i * t..(i + 1) * t]);
        }
        let s = self.images.shape();
        Ok((Tensor::new(img, &[idx.len(), s[1], s[2], s[3]])?, Tensor::new(tr, &[idx.len(), t])?))
    }

    /// The serialized containers: images then truths, both 32-bit.
    pub fn container_bytes(&self) -> (Vec<u8>, Vec<u8>) {
        (
            write_container_bytes(&self.images, Precision::F32),
            write_container_bytes(&self.truths, Precision::F32),
        )
    }

    /// Hex SHA-256 over the serialized image and truth containers.
    pub fn digest(&self) -> String {
        let (a, b) = self.container_bytes();
        let mut h = Sha256::new();
        h.update(&a);
        h.update(&b);
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (a, b) = self.container_bytes();
        let write = |name: &str, bytes: &[u8]| {
            let p = dir.join(name);
            std::fs::write(&p, bytes).map_err(|e| Error::io(p, e))
        };
        write("images.hsvt", &a)?;
        write("truths.hsvt", &b)?;
        write("meta.json", serde_json::to_string_pretty(&self.meta).expect("meta serializes").as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
        let images = read_container(dir.join("images.hsvt"))?;
        let truths = read_container(dir.join("truths.hsvt"))?;
        let (n, t, s) = (meta.images, meta.labels, meta.size);
        if images.shape() != [n, 3, s, s] || truths.shape() != [n, t] {
            return Err(Error::format(dir, "container shapes disagree with meta.json"));
        }
        if truths.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::format(dir.join("truths.hsvt"), "truths must be 0 or 1"));
        }
        Ok(Self { meta, images, truths })
    }
}
