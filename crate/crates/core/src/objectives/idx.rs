//! Big-endian IDX files (the MNIST distribution format).

use std::path::{Path, PathBuf};

use super::Dataset;
use crate::error::{Error, Result};

const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;

/// Images with pixels scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f32>,
}

impl ImageSet {
    pub fn pixels_per_image(&self) -> usize {
        self.rows * self.cols
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, "truncated IDX header"))
}

pub fn load_idx_images(path: &Path) -> Result<ImageSet> {
    let bytes = read(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::format(
            path,
            format!("bad image magic {magic}, expected {IMAGE_MAGIC}"),
        ));
    }
    let count = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let expected = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < expected {
        return Err(Error::format(
            path,
            format!(
                "truncated: {count} images of {rows}x{cols} need {expected} bytes, found {}",
                body.len()
            ),
        ));
    }
    let pixels = body[..expected].iter().map(|&b| b as f32 / 255.0).collect();
    Ok(ImageSet {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != LABEL_MAGIC {
        return Err(Error::format(
            path,
            format!("bad label magic {magic}, expected {LABEL_MAGIC}"),
        ));
    }
    let count = be_u32(&bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::format(
            path,
            format!(
                "truncated: header declares {count} labels, found {}",
                body.len()
            ),
        ));
    }
    Ok(body[..count].to_vec())
}

/// Training and test sets read from an MNIST directory.
#[derive(Debug, Clone)]
pub struct MnistSplit {
    pub train: Dataset,
    pub test: Dataset,
}

fn locate(dir: &Path, stem: &str) -> PathBuf {
    // Accept both `train-images-idx3-ubyte` and `train-images.idx3-ubyte`.
    let dashed = dir.join(stem);
    if dashed.exists() {
        return dashed;
    }
    let dotted = dir.join(stem.replacen("-idx", ".idx", 1));
    if dotted.exists() {
        dotted
    } else {
        dashed
    }
}

fn load_pair(dir: &Path, images: &str, labels: &str, limit: Option<usize>) -> Result<Dataset> {
    let img_path = locate(dir, images);
    let lbl_path = locate(dir, labels);
    let imgs = load_idx_images(&img_path)?;
    let lbls = load_idx_labels(&lbl_path)?;
    if imgs.count != lbls.len() {
        return Err(Error::format(
            &lbl_path,
            format!("{} labels for {} images", lbls.len(), imgs.count),
        ));
    }
    let d = imgs.pixels_per_image();
    let data = Dataset::new(imgs.pixels, lbls, d, 10)
        .map_err(|e| Error::format(&lbl_path, e.to_string()))?;
    Ok(match limit {
        Some(n) => data.truncated(n),
        None => data,
    })
}

/// Reads `train-*` and `t10k-*` IDX files from `dir`, keeping at most
/// `train_limit` / `test_limit` samples of each.
pub fn load_mnist_dir(
    dir: &Path,
    train_limit: Option<usize>,
    test_limit: Option<usize>,
) -> Result<MnistSplit> {
    Ok(MnistSplit {
        train: load_pair(
            dir,
            "train-images-idx3-ubyte",
            "train-labels-idx1-ubyte",
            train_limit,
        )?,
        test: load_pair(
            dir,
            "t10k-images-idx3-ubyte",
            "t10k-labels-idx1-ubyte",
            test_limit,
        )?,
    })
}
