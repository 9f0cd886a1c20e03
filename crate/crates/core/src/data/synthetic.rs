//! Seeded stand-in for a product-defect dataset: smooth periodic textures,
//! with a flat square patch of contrasting intensity on the anomalies.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use pyrad_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{encode_ppm, ImageSample, Label};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_train: usize,
    pub n_test_normal: usize,
    pub n_test_anomalous: usize,
    /// Square image side in pixels (≥ 8).
    pub size: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 1,
            n_train: 64,
            n_test_normal: 32,
            n_test_anomalous: 32,
            size: 32,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DefectBox {
    pub top: usize,
    pub left: usize,
    pub side: usize,
    pub value: f32,
}

#[derive(Clone, Debug)]
pub struct SyntheticBenchmark {
    pub train: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
    /// Parallel to `test`.
    pub defects: Vec<Option<DefectBox>>,
    /// Defect-free version of each test image, parallel to `test`.
    pub clean_test: Vec<Tensor<f32>>,
}

const AMPLITUDE: f64 = 0.2;

/// Snap to the 8-bit grid so images survive a PPM round trip bit-exactly.
fn snap(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0
}

fn texture(rng: &mut ChaCha8Rng, size: usize) -> Tensor<f32> {
    let cycles = rng.random_range(1.0..2.0);
    let theta = rng.random_range(0.0..PI);
    let phase = rng.random_range(0.0..2.0 * PI);
    let base: [f64; 3] = std::array::from_fn(|_| 0.5 + rng.random_range(-0.05..0.05));
    let (c, s) = (theta.cos(), theta.sin());
    let k = 2.0 * PI * cycles / size as f64;
    Tensor::from_fn([3, size, size], |i| {
        let (ch, y, x) = (i / (size * size), (i / size) % size, i % size);
        snap(base[ch] + AMPLITUDE * (k * (x as f64 * c + y as f64 * s) + phase).sin())
    })
}

fn add_defect(rng: &mut ChaCha8Rng, img: &mut Tensor<f32>, size: usize) -> DefectBox {
    let area = (size * size) as f64;
    let lo = (0.04 * area).sqrt().ceil() as usize;
    let hi = ((0.10 * area).sqrt().floor() as usize).max(lo);
    let side = rng.random_range(lo..=hi);
    let top = rng.random_range(0..=size - side);
    let left = rng.random_range(0..=size - side);
    let d = img.data_mut();
    let mut under = 0.0f64;
    for ch in 0..3 {
        for y in top..top + side {
            for x in left..left + side {
                under += f64::from(d[(ch * size + y) * size + x]);
            }
        }
    }
    under /= (3 * side * side) as f64;
    let value = if under < 0.5 { 1.0 } else { 0.0 };
    for ch in 0..3 {
        for y in top..top + side {
            for x in left..left + side {
                d[(ch * size + y) * size + x] = value;
            }
        }
    }
    DefectBox { top, left, side, value }
}

/// Deterministic per seed. Image `i` (train first, then test normals,
/// then test anomalies) draws from its own ChaCha stream.
pub fn make_synthetic_benchmark(spec: &SyntheticSpec) -> Result<SyntheticBenchmark> {
    let size = spec.size;
    if size < 8 {
        return Err(Error::Config(format!("synthetic images need a side of at least 8, got {size}")));
    }
    let mut stream = 0u64;
    let mut next_rng = || {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream);
        stream += 1;
        rng
    };
    let sample = |pixels, label, split: &str, category: &str, i: usize| ImageSample {
        pixels,
        label,
        category: category.to_string(),
        source: PathBuf::from(format!("{split}/{category}/{i:03}.ppm")),
    };
    let train = (0..spec.n_train)
        .map(|i| sample(texture(&mut next_rng(), size), Label::Normal, "train", "good", i))
        .collect();
    let mut test = Vec::new();
    let mut defects = Vec::new();
    let mut clean_test = Vec::new();
    for i in 0..spec.n_test_normal {
        let t = texture(&mut next_rng(), size);
        clean_test.push(t.clone());
        test.push(sample(t, Label::Normal, "test", "good", i));
        defects.push(None);
    }
    for i in 0..spec.n_test_anomalous {
        let mut rng = next_rng();
        let clean = texture(&mut rng, size);
        let mut t = clean.clone();
        defects.push(Some(add_defect(&mut rng, &mut t, size)));
        clean_test.push(clean);
        test.push(sample(t, Label::Anomalous, "test", "patch", i));
    }
    Ok(SyntheticBenchmark { train, test, defects, clean_test })
}

impl SyntheticBenchmark {
    /// Write `train/good/*.ppm` and `test/{good,patch}/*.ppm` below `root`.
    pub fn write_layout(&self, root: &Path) -> Result<()> {
        for s in self.train.iter().chain(&self.test) {
            let path = root.join(&s.source);
            let dir = path.parent().expect("relative source has a parent");
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            std::fs::write(&path, encode_ppm(&s.pixels)?).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}
