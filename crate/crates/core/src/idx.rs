//! Big-endian IDX files as distributed with MNIST.
//!
//! Readers cover unsigned-byte images (`0x00000803`) and labels
//! (`0x00000801`). Writers additionally produce 32-bit float image stacks
//! (`0x00000D03`) for reconstructed datasets.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::radiometry::ReferenceImage;

pub const IMAGES_U8_MAGIC: u32 = 0x0000_0803;
pub const LABELS_U8_MAGIC: u32 = 0x0000_0801;
pub const IMAGES_F32_MAGIC: u32 = 0x0000_0D03;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("{path}: magic 0x{found:08x} at offset 0, expected 0x{expected:08x}")]
    Magic { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: truncated at offset {offset}: expected {expected} bytes, found {actual}")]
    Truncated {
        path: PathBuf,
        offset: u64,
        expected: u64,
        actual: u64,
    },
    #[error("{path}: {extra} unexpected trailing bytes at offset {offset}")]
    Trailing { path: PathBuf, offset: u64, extra: u64 },
    #[error("image file holds {images} images but label file holds {labels} labels")]
    CountMismatch { images: u32, labels: u32 },
    #[error("{path}: invalid image shape {rows}x{cols}")]
    Shape { path: PathBuf, rows: u32, cols: u32 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// Images and labels loaded from a pair of IDX files. Pixels are kept as raw
/// bytes; [`LabeledImages::image`] normalizes them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn raw(&self, index: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.pixels[index * n..(index + 1) * n]
    }

    /// Image `index` scaled to `[0, 1]` by 255.
    pub fn image(&self, index: usize) -> ReferenceImage {
        ReferenceImage::from_u8(self.cols, self.rows, self.raw(index)).expect("shape checked at load time")
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes(bytes[offset..offset + 4].try_into().expect("4-byte slice"))
}

fn need(path: &Path, bytes: &[u8], offset: usize, len: u64) -> Result<(), IdxError> {
    let actual = bytes.len().saturating_sub(offset) as u64;
    if actual < len {
        return Err(IdxError::Truncated {
            path: path.to_path_buf(),
            offset: offset as u64,
            expected: len,
            actual,
        });
    }
    Ok(())
}

fn read_all(path: &Path) -> Result<Vec<u8>, IdxError> {
    fs::read(path).map_err(|source| IdxError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn check_magic(path: &Path, bytes: &[u8], expected: u32) -> Result<(), IdxError> {
    need(path, bytes, 0, 4)?;
    let found = be_u32(bytes, 0);
    if found != expected {
        return Err(IdxError::Magic {
            path: path.to_path_buf(),
            found,
            expected,
        });
    }
    Ok(())
}

fn check_end(path: &Path, bytes: &[u8], end: u64) -> Result<(), IdxError> {
    if bytes.len() as u64 > end {
        return Err(IdxError::Trailing {
            path: path.to_path_buf(),
            offset: end,
            extra: bytes.len() as u64 - end,
        });
    }
    Ok(())
}

/// Returns `(count, rows, cols, pixels)`.
pub fn parse_images(path: &Path, bytes: &[u8]) -> Result<(u32, u32, u32, Vec<u8>), IdxError> {
    check_magic(path, bytes, IMAGES_U8_MAGIC)?;
    need(path, bytes, 4, 12)?;
    let (count, rows, cols) = (be_u32(bytes, 4), be_u32(bytes, 8), be_u32(bytes, 12));
    if rows == 0 || cols == 0 {
        return Err(IdxError::Shape {
            path: path.to_path_buf(),
            rows,
            cols,
        });
    }
    let payload = u64::from(count) * u64::from(rows) * u64::from(cols);
    need(path, bytes, 16, payload)?;
    check_end(path, bytes, 16 + payload)?;
    Ok((count, rows, cols, bytes[16..].to_vec()))
}

pub fn parse_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>, IdxError> {
    check_magic(path, bytes, LABELS_U8_MAGIC)?;
    need(path, bytes, 4, 4)?;
    let count = be_u32(bytes, 4);
    need(path, bytes, 8, u64::from(count))?;
    check_end(path, bytes, 8 + u64::from(count))?;
    Ok(bytes[8..].to_vec())
}

pub fn read_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledImages, IdxError> {
    let (count, rows, cols, pixels) = parse_images(images_path, &read_all(images_path)?)?;
    let labels = parse_labels(labels_path, &read_all(labels_path)?)?;
    if labels.len() as u64 != u64::from(count) {
        return Err(IdxError::CountMismatch {
            images: count,
            labels: labels.len() as u32,
        });
    }
    Ok(LabeledImages {
        rows: rows as usize,
        cols: cols as usize,
        pixels,
        labels,
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), IdxError> {
    let mut f = fs::File::create(path).map_err(|source| IdxError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    f.write_all(bytes).map_err(|source| IdxError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn encode_images_u8(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let count = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for word in [IMAGES_U8_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&word.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_U8_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn encode_images_f32(rows: usize, cols: usize, values: &[f32]) -> Vec<u8> {
    let count = values.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + 4 * values.len());
    for word in [IMAGES_F32_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&word.to_be_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

pub fn write_images_u8(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<(), IdxError> {
    write_bytes(path, &encode_images_u8(rows, cols, pixels))
}

pub fn write_labels(path: &Path, labels: &[u8]) -> Result<(), IdxError> {
    write_bytes(path, &encode_labels(labels))
}

pub fn write_images_f32(path: &Path, rows: usize, cols: usize, values: &[f32]) -> Result<(), IdxError> {
    write_bytes(path, &encode_images_f32(rows, cols, values))
}

/// Reads a float image stack written by [`write_images_f32`]. Returns
/// `(count, rows, cols, values)`.
pub fn read_images_f32(path: &Path) -> Result<(u32, u32, u32, Vec<f32>), IdxError> {
    let bytes = read_all(path)?;
    check_magic(path, &bytes, IMAGES_F32_MAGIC)?;
    need(path, &bytes, 4, 12)?;
    let (count, rows, cols) = (be_u32(&bytes, 4), be_u32(&bytes, 8), be_u32(&bytes, 12));
    let payload = 4 * u64::from(count) * u64::from(rows) * u64::from(cols);
    need(path, &bytes, 16, payload)?;
    check_end(path, &bytes, 16 + payload)?;
    let values = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_be_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    Ok((count, rows, cols, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn parses_images_and_labels() {
        let bytes = encode_images_u8(2, 3, &[0, 255, 1, 2, 3, 4, 9, 9, 9, 9, 9, 9]);
        let (count, rows, cols, px) = parse_images(p(), &bytes).unwrap();
        assert_eq!((count, rows, cols), (2, 2, 3));
        assert_eq!(px.len(), 12);
        assert_eq!(parse_labels(p(), &encode_labels(&[7, 1])).unwrap(), vec![7, 1]);
    }

    #[test]
    fn magic_mismatch() {
        let bytes = encode_labels(&[1]);
        assert!(matches!(parse_images(p(), &bytes), Err(IdxError::Magic { found: 0x801, .. })));
    }

    #[test]
    fn truncated_payload_reports_sizes() {
        let bytes = encode_images_u8(28, 28, &[0; 784 * 2]);
        match parse_images(p(), &bytes[..bytes.len() - 100]) {
            Err(IdxError::Truncated { offset, expected, actual, .. }) => {
                assert_eq!((offset, expected, actual), (16, 1568, 1468));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_labels(p(), &[0, 0, 8]), Err(IdxError::Truncated { .. })));
    }

    #[test]
    fn count_mismatch_between_files() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = (dir.path().join("i"), dir.path().join("l"));
        write_images_u8(&img, 2, 2, &[0; 8]).unwrap();
        write_labels(&lbl, &[1, 2, 3]).unwrap();
        assert!(matches!(read_idx(&img, &lbl), Err(IdxError::CountMismatch { images: 2, labels: 3 })));
        write_labels(&lbl, &[1, 2]).unwrap();
        let set = read_idx(&img, &lbl).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.image(1).width(), 2);
    }

    #[test]
    fn float_stack_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f");
        let values = [0.0f32, 1.5, 3.0, 0.25];
        write_images_f32(&path, 2, 2, &values).unwrap();
        let (count, rows, cols, back) = read_images_f32(&path).unwrap();
        assert_eq!((count, rows, cols), (1, 2, 2));
        assert_eq!(back, values);
    }

    #[test]
    fn normalizes_by_255() {
        let set = LabeledImages {
            rows: 1,
            cols: 2,
            pixels: vec![255, 51],
            labels: vec![0],
        };
        assert_eq!(set.image(0).values(), &[1.0, 0.2]);
    }
}
