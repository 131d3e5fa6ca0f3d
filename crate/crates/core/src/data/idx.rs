//! IDX image/label files as used by MNIST and Fashion-MNIST.
//!
//! Both files start with a big-endian `u32` magic, followed by one
//! big-endian `u32` per dimension and then the unsigned bytes.

use std::path::Path;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format { offset, message: "truncated header".into() })
}

fn expect_magic(bytes: &[u8], magic: u32, what: &str) -> Result<()> {
    let found = be_u32(bytes, 0)?;
    if found != magic {
        return Err(Error::Format {
            offset: 0,
            message: format!("{what} file has magic {found:#010x}, expected {magic:#010x}"),
        });
    }
    Ok(())
}

/// Returns `(count, rows, cols, pixels)` with pixels scaled to `[0, 1]`.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f64>)> {
    expect_magic(bytes, IMAGES_MAGIC, "image")?;
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let body = &bytes[16..];
    let needed = n * rows * cols;
    if body.len() < needed {
        return Err(Error::Format {
            offset: 16 + body.len(),
            message: format!("truncated pixel data: {needed} bytes declared, {} present", body.len()),
        });
    }
    let pixels = body[..needed].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok((n, rows, cols, pixels))
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    expect_magic(bytes, LABELS_MAGIC, "label")?;
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Format {
            offset: 8 + body.len(),
            message: format!("truncated labels: {n} declared, {} present", body.len()),
        });
    }
    Ok(body[..n].iter().map(|&b| usize::from(b)).collect())
}

/// Decodes an image/label file pair already in memory.
pub fn decode_idx(images: &[u8], labels: &[u8]) -> Result<LabeledDataset> {
    let (n, rows, cols, pixels) = parse_images(images)?;
    let labels = parse_labels(labels)?;
    if labels.len() != n {
        return Err(Error::Format {
            offset: 4,
            message: format!("{n} images but {} labels", labels.len()),
        });
    }
    if n == 0 {
        return Err(Error::Data("IDX files contain no examples".into()));
    }
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    LabeledDataset::new(Tensor::new(vec![n, rows * cols], pixels)?, labels, num_classes)
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    decode_idx(&images, &labels)
}

#[cfg(test)]
pub(crate) fn encode_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    for v in [IMAGES_MAGIC, n, rows, cols] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

#[cfg(test)]
pub(crate) fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_blank_image() {
        let d = decode_idx(&encode_images(1, 2, 2, &[0; 4]), &encode_labels(&[7])).unwrap();
        assert_eq!(d.features().values(), &[0.0; 4]);
        assert_eq!(d.labels(), &[7]);
        assert_eq!(d.num_classes(), 8);
    }

    #[test]
    fn three_image_fixture() {
        let pixels = [0u8, 255, 51, 102, 204, 153, 1, 2, 3, 4, 5, 6];
        let d = decode_idx(&encode_images(3, 2, 2, &pixels), &encode_labels(&[0, 2, 1])).unwrap();
        assert_eq!(d.features().shape(), &[3, 4]);
        assert_eq!(d.features().row(0), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(d.features().row(1), &[0.8, 0.6, 1.0 / 255.0, 2.0 / 255.0]);
        assert_eq!(d.features().row(2), &[3.0 / 255.0, 4.0 / 255.0, 5.0 / 255.0, 6.0 / 255.0]);
        assert_eq!(d.labels(), &[0, 2, 1]);
    }

    #[test]
    fn label_magic_in_image_file_is_rejected() {
        let err = decode_idx(&encode_labels(&[1, 2]), &encode_labels(&[1])).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");
    }

    #[test]
    fn truncated_pixels_report_offset() {
        let bytes = encode_images(2, 2, 2, &[9; 5]);
        match parse_images(&bytes).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset, 21),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn count_mismatch() {
        let err = decode_idx(&encode_images(2, 1, 1, &[0, 0]), &encode_labels(&[1])).unwrap_err();
        assert!(err.to_string().contains("2 images but 1 labels"));
    }
}
