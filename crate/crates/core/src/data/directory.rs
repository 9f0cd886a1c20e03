//! `root/train/good/*` and `root/test/<category>/*` product datasets.

use std::path::{Path, PathBuf};

use pyrad_tensor::Tensor;

use super::{decode_pnm, read_file, resize_image, ImageSample, Label, Split};
use crate::error::{Error, Result};

const GOOD: &str = "good";

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if entry.file_name().to_string_lossy().starts_with('.') {
            continue;
        }
        if path.is_dir() == want_dirs {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Regular, non-hidden files of a directory sorted by path.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    sorted_entries(dir, false)
}

/// Decode a PGM/PPM file to 3×H×W, optionally resized.
pub fn load_image(path: &Path, resize_to: Option<(usize, usize)>) -> Result<Tensor<f32>> {
    let img = decode_pnm(&read_file(path)?, path)?.to_tensor();
    match resize_to {
        Some((h, w)) => resize_image(&img, h, w),
        None => Ok(img),
    }
}

fn load_folder(dir: &Path, label: Label, category: &str, resize_to: Option<(usize, usize)>) -> Result<Vec<ImageSample>> {
    list_images(dir)?
        .into_iter()
        .map(|source| {
            Ok(ImageSample {
                pixels: load_image(&source, resize_to)?,
                label,
                category: category.to_string(),
                source,
            })
        })
        .collect()
}

/// Train yields every image of `train/good` (all normal). Test yields
/// every image below `test/`, anomalous unless its folder is `good`.
pub fn load_directory_dataset(root: &Path, split: Split, resize_to: Option<(usize, usize)>) -> Result<Vec<ImageSample>> {
    match split {
        Split::Train => {
            let dir = root.join("train").join(GOOD);
            if !dir.is_dir() {
                return Err(Error::Dataset(format!("missing directory {}", dir.display())));
            }
            let samples = load_folder(&dir, Label::Normal, GOOD, resize_to)?;
            if samples.is_empty() {
                return Err(Error::Dataset(format!("no training images in {}", dir.display())));
            }
            Ok(samples)
        }
        Split::Test => {
            let dir = root.join("test");
            if !dir.is_dir() {
                return Err(Error::Dataset(format!("missing directory {}", dir.display())));
            }
            let mut samples = Vec::new();
            for sub in sorted_entries(&dir, true)? {
                let name = sub.file_name().expect("entry name").to_string_lossy().into_owned();
                let label = if name == GOOD { Label::Normal } else { Label::Anomalous };
                samples.extend(load_folder(&sub, label, &name, resize_to)?);
            }
            if samples.is_empty() {
                return Err(Error::Dataset(format!("no test images below {}", dir.display())));
            }
            Ok(samples)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{encode_pgm, encode_ppm};

    fn write(path: &Path, bytes: &[u8]) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(path, bytes).unwrap();
    }

    #[test]
    fn layout_rules() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::full([3, 4, 4], 0.2f32);
        let ppm = encode_ppm(&img).unwrap();
        write(&dir.path().join("train/good/b.ppm"), &ppm);
        write(&dir.path().join("train/good/a.pgm"), &encode_pgm(&img).unwrap());
        write(&dir.path().join("test/good/img.ppm"), &ppm);
        write(&dir.path().join("test/broken/img.ppm"), &ppm);

        let train = load_directory_dataset(dir.path(), Split::Train, Some((8, 8))).unwrap();
        assert_eq!(train.len(), 2);
        assert!(train[0].source.ends_with("a.pgm"));
        assert_eq!(train[0].pixels.shape(), &[3, 8, 8]);
        let test = load_directory_dataset(dir.path(), Split::Test, None).unwrap();
        let labels: Vec<_> = test.iter().map(|s| (s.category.as_str(), s.label)).collect();
        assert_eq!(labels, [("broken", Label::Anomalous), ("good", Label::Normal)]);

        let again = load_directory_dataset(dir.path(), Split::Test, None).unwrap();
        assert_eq!(test, again);
    }

    #[test]
    fn empty_train_and_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("train/good")).unwrap();
        let err = load_directory_dataset(dir.path(), Split::Train, None).unwrap_err();
        assert!(matches!(err, Error::Dataset(_)));
        write(&dir.path().join("train/good/x.png"), b"\x89PNG");
        let err = load_directory_dataset(dir.path(), Split::Train, None).unwrap_err().to_string();
        assert!(err.contains("x.png"), "{err}");
    }
}
