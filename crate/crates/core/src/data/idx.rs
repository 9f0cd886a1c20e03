//! Big-endian IDX digit files.

use std::path::Path;

use pyrad_tensor::Tensor;

use super::{read_file, ImageSample, Label};
use crate::error::{Error, Result};

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
}

fn header(bytes: &[u8], magic: u32, ndims: usize, path: &Path) -> Result<Vec<usize>> {
    let found = be_u32(bytes, 0).ok_or_else(|| Error::format(path, "file shorter than the IDX magic"))?;
    if found != magic {
        return Err(Error::format(path, format!("bad IDX magic {found:#010x}, expected {magic:#010x}")));
    }
    (0..ndims)
        .map(|i| {
            be_u32(bytes, 4 + 4 * i)
                .map(|d| d as usize)
                .ok_or_else(|| Error::format(path, "truncated IDX header"))
        })
        .collect()
}

fn payload<'a>(bytes: &'a [u8], start: usize, len: usize, path: &Path) -> Result<&'a [u8]> {
    match bytes.len().cmp(&(start + len)) {
        std::cmp::Ordering::Less => Err(Error::format(
            path,
            format!("truncated payload: header promises {len} bytes, file has {}", bytes.len() - start),
        )),
        std::cmp::Ordering::Greater => Err(Error::format(
            path,
            format!("{} trailing bytes after the payload", bytes.len() - start - len),
        )),
        std::cmp::Ordering::Equal => Ok(&bytes[start..]),
    }
}

/// Decode in-memory IDX image and label files. Labels other than
/// `normal_class` become anomalous; the digit is kept as the category.
pub fn parse_idx_bytes(images: &[u8], labels: &[u8], normal_class: u8, images_path: &Path, labels_path: &Path) -> Result<Vec<ImageSample>> {
    let dims = header(images, IDX_IMAGE_MAGIC, 3, images_path)?;
    let (count, rows, cols) = (dims[0], dims[1], dims[2]);
    let pixels = payload(images, 16, count * rows * cols, images_path)?;
    let ldims = header(labels, IDX_LABEL_MAGIC, 1, labels_path)?;
    let digits = payload(labels, 8, ldims[0], labels_path)?;
    if ldims[0] != count {
        return Err(Error::format(
            labels_path,
            format!("{} labels for {count} images in {}", ldims[0], images_path.display()),
        ));
    }
    let plane = rows * cols;
    Ok(pixels
        .chunks_exact(plane.max(1))
        .take(count)
        .zip(digits)
        .enumerate()
        .map(|(i, (img, &digit))| {
            let gray: Vec<f32> = img.iter().map(|&p| f32::from(p) / 255.0).collect();
            ImageSample {
                pixels: Tensor::new([3, rows, cols], gray.repeat(3)).expect("sized"),
                label: if digit == normal_class { Label::Normal } else { Label::Anomalous },
                category: digit.to_string(),
                source: format!("{}#{i}", images_path.display()).into(),
            }
        })
        .collect())
}

pub fn parse_idx(images_path: &Path, labels_path: &Path, normal_class: u8) -> Result<Vec<ImageSample>> {
    parse_idx_bytes(&read_file(images_path)?, &read_file(labels_path)?, normal_class, images_path, labels_path)
}
