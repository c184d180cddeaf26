//! Synthetic labeled image sets and the `DMTD` dataset file.
//!
//! File layout, little-endian:
//!
//! ```text
//! "DMTD" | u32 version (=1) | u32 count | u16 H | u16 W
//! count × ( u8 label | H·W·3 bytes interleaved RGB )
//! ```
//!
//! Pixels map to `[0, 1]` by `/255`.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::TensorBuf;

pub const DATASET_MAGIC: &[u8; 4] = b"DMTD";
pub const DATASET_VERSION: u32 = 1;
pub const TRAIN_FILE: &str = "train.dmtd";
pub const TEST_FILE: &str = "test.dmtd";
/// Four oriented-grating classes: 0°, 45°, 90°, 135°.
pub const NUM_CLASSES: usize = 4;

const HEADER_LEN: usize = 4 + 4 + 4 + 2 + 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    height: usize,
    width: usize,
    labels: Vec<u8>,
    /// Interleaved RGB bytes per record.
    pixels: Vec<Vec<u8>>,
}

impl Dataset {
    pub fn new(height: usize, width: usize, labels: Vec<u8>, pixels: Vec<Vec<u8>>) -> Result<Self> {
        if labels.len() != pixels.len() {
            return Err(Error::Dataset(format!(
                "{} labels for {} images",
                labels.len(),
                pixels.len()
            )));
        }
        if let Some(i) = pixels.iter().position(|p| p.len() != height * width * 3) {
            return Err(Error::Dataset(format!("record {i} has wrong pixel count")));
        }
        Ok(Self {
            height,
            width,
            labels,
            pixels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
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

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0)
    }

    /// Record `i` as a `3 × H × W` tensor in `[0, 1]`.
    pub fn image(&self, i: usize) -> TensorBuf {
        let (h, w) = (self.height, self.width);
        let px = &self.pixels[i];
        let mut data = vec![0.0; 3 * h * w];
        for k in 0..h * w {
            for c in 0..3 {
                data[c * h * w + k] = px[k * 3 + c] as f64 / 255.0;
            }
        }
        TensorBuf::from_parts(vec![3, h, w], data)
    }

    pub fn images(&self) -> Vec<TensorBuf> {
        (0..self.len()).map(|i| self.image(i)).collect()
    }

    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            height: self.height,
            width: self.width,
            labels: self.labels[..n].to_vec(),
            pixels: self.pixels[..n].to_vec(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.len() * (1 + self.height * self.width * 3));
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u16).to_le_bytes());
        out.extend_from_slice(&(self.width as u16).to_le_bytes());
        for (l, p) in self.labels.iter().zip(&self.pixels) {
            out.push(*l);
            out.extend_from_slice(p);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Dataset("file shorter than header".into()));
        }
        if &bytes[..4] != DATASET_MAGIC {
            return Err(Error::Dataset(format!("bad magic {:?}", &bytes[..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != DATASET_VERSION {
            return Err(Error::Dataset(format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let h = u16::from_le_bytes(bytes[12..14].try_into().unwrap()) as usize;
        let w = u16::from_le_bytes(bytes[14..16].try_into().unwrap()) as usize;
        let rec = 1 + h * w * 3;
        let body = &bytes[HEADER_LEN..];
        if body.len() != count * rec {
            return Err(Error::Dataset(format!(
                "{count} records of {rec} bytes need {} bytes, found {}",
                count * rec,
                body.len()
            )));
        }
        let (labels, pixels) = body
            .chunks(rec)
            .map(|r| (r[0], r[1..].to_vec()))
            .unzip();
        Self::new(h, w, labels, pixels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Procedural oriented gratings: label `k` fixes the stripe angle at `k·45°`;
/// frequency, phase, the two stripe colors and additive noise vary per sample.
pub fn generate_synthetic(n: usize, size: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.05).unwrap();
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.random_range(0..NUM_CLASSES);
        let angle = label as f64 * PI / 4.0;
        let (ca, sa) = (angle.cos(), angle.sin());
        let freq = rng.random_range(0.12..0.3);
        let phase = rng.random_range(0.0..2.0 * PI);
        let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..0.45));
        let c2: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.55..1.0));
        let mut px = Vec::with_capacity(size * size * 3);
        for y in 0..size {
            for x in 0..size {
                let t = 0.5 + 0.5 * (2.0 * PI * freq * (x as f64 * ca + y as f64 * sa) + phase).sin();
                for c in 0..3 {
                    let v = c1[c] + (c2[c] - c1[c]) * t + noise.sample(&mut rng);
                    px.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        labels.push(label as u8);
        pixels.push(px);
    }
    Dataset {
        height: size,
        width: size,
        labels,
        pixels,
    }
}

/// Writes `train.dmtd` and `test.dmtd` into `out_dir` and returns their paths.
pub fn gen_data(out_dir: &Path, n_train: usize, n_test: usize, seed: u64) -> Result<(PathBuf, PathBuf)> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::InvalidArgument("dataset counts must be >= 1".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let train = out_dir.join(TRAIN_FILE);
    let test = out_dir.join(TEST_FILE);
    generate_synthetic(n_train, 16, seed).save(&train)?;
    generate_synthetic(n_test, 16, seed ^ 0x5eed_7e57).save(&test)?;
    Ok((train, test))
}

pub fn load_split(dir: &Path) -> Result<(Dataset, Dataset)> {
    Ok((Dataset::load(&dir.join(TRAIN_FILE))?, Dataset::load(&dir.join(TEST_FILE))?))
}
