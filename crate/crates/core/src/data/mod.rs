//! IDX (MNIST) dataset files.

use std::path::Path;

use crate::error::{OsnnError, Result};
use crate::numerics::RealTensor;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Grayscale images scaled to `[0, 1]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<f64>,
    labels: Vec<u8>,
    rows: usize,
    cols: usize,
    pub split: String,
}

impl Dataset {
    pub fn new(images: Vec<f64>, labels: Vec<u8>, rows: usize, cols: usize, split: impl Into<String>) -> Result<Self> {
        if images.len() != labels.len() * rows * cols {
            return Err(OsnnError::shape(
                "dataset",
                format!("{} pixels for {} images of {}x{}", images.len(), labels.len(), rows, cols),
            ));
        }
        Ok(Self {
            images,
            labels,
            rows,
            cols,
            split: split.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.rows * self.cols;
        &self.images[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// `[N, 1, rows, cols]`.
    pub fn images_tensor(&self) -> RealTensor {
        RealTensor::new(vec![self.len(), 1, self.rows, self.cols], self.images.clone()).expect("consistent sizes")
    }

    /// Examples `indices`, in that order.
    pub fn select(&self, indices: &[usize], split: impl Into<String>) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.rows * self.cols);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            images,
            labels,
            rows: self.rows,
            cols: self.cols,
            split: split.into(),
        }
    }

    /// The first `n` examples (all of them if `n` is larger).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx, self.split.clone())
    }

    /// Count of each label `0..classes`.
    pub fn label_histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        for &l in &self.labels {
            if (l as usize) < classes {
                h[l as usize] += 1;
            }
        }
        h
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(OsnnError::Idx {
            offset,
            reason: format!("file ends before a 4-byte header field ({} bytes)", bytes.len()),
        })
}

fn check_magic(bytes: &[u8], want: u32) -> Result<()> {
    let magic = read_u32(bytes, 0)?;
    if magic != want {
        return Err(OsnnError::Idx {
            offset: 0,
            reason: format!("magic {:#010x}, expected {:#010x}", magic, want),
        });
    }
    Ok(())
}

fn check_payload(bytes: &[u8], header: usize, expected: usize) -> Result<()> {
    let have = bytes.len() - header;
    if have != expected {
        return Err(OsnnError::Idx {
            offset: header + have.min(expected),
            reason: format!("header promises {} payload bytes, file has {}", expected, have),
        });
    }
    Ok(())
}

/// Parses an IDX3 image file: `(count, rows, cols, pixels / 255)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f64>)> {
    check_magic(bytes, IMAGE_MAGIC)?;
    let n = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    check_payload(bytes, 16, n * rows * cols)?;
    Ok((n, rows, cols, bytes[16..].iter().map(|&b| b as f64 / 255.0).collect()))
}

/// Parses an IDX1 label file; labels must be digits.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABEL_MAGIC)?;
    let n = read_u32(bytes, 4)? as usize;
    check_payload(bytes, 8, n)?;
    if let Some(pos) = bytes[8..].iter().position(|&l| l > 9) {
        return Err(OsnnError::Idx {
            offset: 8 + pos,
            reason: format!("label {} outside 0..=9", bytes[8 + pos]),
        });
    }
    Ok(bytes[8..].to_vec())
}

pub fn load_mnist(image_path: &Path, label_path: &Path, split: &str) -> Result<Dataset> {
    let (n, rows, cols, images) = parse_idx_images(&std::fs::read(image_path)?)?;
    let labels = parse_idx_labels(&std::fs::read(label_path)?)?;
    if labels.len() != n {
        return Err(OsnnError::Idx {
            offset: 4,
            reason: format!("{} images but {} labels", n, labels.len()),
        });
    }
    Dataset::new(images, labels, rows, cols, split)
}

/// Encodes images (values in `[0, 1]`, rounded to bytes) as IDX3.
pub fn encode_idx_images(count: usize, rows: usize, cols: usize, pixels: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGE_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(pixels.iter().map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    for v in [LABEL_MAGIC, labels.len() as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(labels);
    out
}
