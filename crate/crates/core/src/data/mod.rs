//! Dataset ingestion. Every loader yields 3×H×W images in [0, 1].

mod directory;
mod idx;
mod pnm;
mod synthetic;

use std::fmt;
use std::path::{Path, PathBuf};

use pyrad_tensor::{kernels, Tensor};

use crate::error::{Error, Result};

pub use directory::{list_images, load_directory_dataset, load_image};
pub use idx::{parse_idx, parse_idx_bytes, IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC};
pub use pnm::{decode_pnm, encode_pgm, encode_ppm, PnmImage};
pub use synthetic::{make_synthetic_benchmark, DefectBox, SyntheticBenchmark, SyntheticSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Normal,
    Anomalous,
}

impl Label {
    pub fn is_anomalous(self) -> bool {
        self == Label::Anomalous
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Normal => "normal",
            Label::Anomalous => "anomalous",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    /// 3×H×W, values in [0, 1].
    pub pixels: Tensor<f32>,
    pub label: Label,
    pub category: String,
    pub source: PathBuf,
}

impl ImageSample {
    pub fn id(&self) -> String {
        self.source.display().to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Idx,
    Directory,
    Synthetic,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "idx" => Ok(Self::Idx),
            "directory" => Ok(Self::Directory),
            "synthetic" => Ok(Self::Synthetic),
            _ => Err(Error::Config(format!("unknown data.kind `{s}` (expected idx, directory or synthetic)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub root: PathBuf,
    /// Digit treated as normal under the one-class protocol (idx only).
    pub normal_class: u8,
    pub resize_to: Option<(usize, usize)>,
    /// Generator parameters (synthetic only).
    pub synthetic: SyntheticSpec,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kind == DatasetKind::Idx && self.normal_class > 9 {
            return Err(Error::Config(format!("data.normal_class must be in 0..=9, got {}", self.normal_class)));
        }
        if matches!(self.resize_to, Some((0, _)) | Some((_, 0))) {
            return Err(Error::Config("resize extents must be positive".into()));
        }
        Ok(())
    }

    pub fn load(&self, split: Split) -> Result<Vec<ImageSample>> {
        self.validate()?;
        let samples = match self.kind {
            DatasetKind::Directory => return load_directory_dataset(&self.root, split, self.resize_to),
            DatasetKind::Idx => {
                let (img, lbl) = match split {
                    Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
                    Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
                };
                let all = parse_idx(&self.root.join(img), &self.root.join(lbl), self.normal_class)?;
                match split {
                    Split::Train => all.into_iter().filter(|s| s.label == Label::Normal).collect(),
                    Split::Test => all,
                }
            }
            DatasetKind::Synthetic => {
                let b = make_synthetic_benchmark(&self.synthetic)?;
                match split {
                    Split::Train => b.train,
                    Split::Test => b.test,
                }
            }
        };
        match self.resize_to {
            Some((h, w)) => samples
                .into_iter()
                .map(|mut s| {
                    s.pixels = resize_image(&s.pixels, h, w)?;
                    Ok(s)
                })
                .collect(),
            None => Ok(samples),
        }
    }
}

/// Bilinear resize of a 3×H×W image (half-pixel centres); the input is
/// returned unchanged when the extents already match.
pub fn resize_image(img: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let &[c, h, w] = img.shape() else {
        return Err(Error::Config(format!("expected a C×H×W image, got {:?}", img.shape())));
    };
    let x = img.reshape([1, c, h, w])?;
    Ok(kernels::resize_bilinear(&x, out_h, out_w)?.reshape([c, out_h, out_w])?)
}

/// Stack samples into an N×3×H×W batch.
pub fn stack_batch(samples: &[&ImageSample]) -> Result<Tensor<f32>> {
    let parts: Vec<Tensor<f32>> = samples.iter().map(|s| s.pixels.clone()).collect();
    Ok(Tensor::stack(&parts)?)
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
