//! IDX binary files: big-endian `u32` magic, big-endian `u32` dimensions,
//! then unsigned bytes.

use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn u32(&mut self, what: &str) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self.bytes.get(self.pos..end).ok_or_else(|| Error::Format {
            offset: self.pos,
            msg: format!("truncated while reading {what}"),
        })?;
        self.pos = end;
        Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
    }

    fn payload(&self, len: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if available != len {
            return Err(Error::Format {
                offset: self.pos,
                msg: format!("header declares {len} payload bytes, file holds {available}"),
            });
        }
        Ok(&self.bytes[self.pos..])
    }
}

fn header(bytes: &[u8], magic: u32, dims: usize) -> Result<(Reader<'_>, Vec<usize>)> {
    let mut r = Reader { bytes, pos: 0 };
    let found = r.u32("magic number")?;
    if found != magic {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic 0x{found:08x}, expected 0x{magic:08x}"),
        });
    }
    let sizes = (0..dims)
        .map(|i| r.u32(&format!("dimension {i}")).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    Ok((r, sizes))
}

/// Image file (`0x00000803`, dims `n × rows × cols`) → `n × (rows·cols)`
/// matrix scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Matrix> {
    let (r, dims) = header(bytes, IMAGES_MAGIC, 3)?;
    let per_item = dims[1] * dims[2];
    let payload = r.payload(dims[0] * per_item)?;
    let data = payload.iter().map(|&b| b as f64 / 255.0).collect();
    Matrix::from_vec(dims[0], per_item, data)
}

/// Label file (`0x00000801`, one dim).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let (r, dims) = header(bytes, LABELS_MAGIC, 1)?;
    Ok(r.payload(dims[0])?.iter().map(|&b| b as usize).collect())
}

/// Reads an image file and its companion label file.
pub fn load_idx(images: &Path, labels: &Path, num_classes: Option<usize>) -> Result<Dataset> {
    let img = std::fs::read(images).map_err(|e| Error::io(images, e))?;
    let lab = std::fs::read(labels).map_err(|e| Error::io(labels, e))?;
    let features = parse_idx_images(&img)?;
    let labels = parse_idx_labels(&lab)?;
    let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    Dataset::new(features, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images_fixture() -> Vec<u8> {
        // 4 images of 1x2 pixels
        let mut b = vec![0, 0, 8, 3, 0, 0, 0, 4, 0, 0, 0, 1, 0, 0, 0, 2];
        b.extend_from_slice(&[0, 255, 51, 102, 255, 0, 153, 204]);
        b
    }

    #[test]
    fn parses_hand_built_fixture() {
        let m = parse_idx_images(&images_fixture()).unwrap();
        assert_eq!((m.rows(), m.cols()), (4, 2));
        assert_eq!(m.as_slice(), &[0.0, 1.0, 0.2, 0.4, 1.0, 0.0, 0.6, 0.8]);

        let labels = parse_idx_labels(&[0, 0, 8, 1, 0, 0, 0, 4, 3, 1, 0, 9]).unwrap();
        assert_eq!(labels, vec![3, 1, 0, 9]);
    }

    #[test]
    fn format_errors_carry_offsets() {
        match parse_idx_images(&[]) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let mut bad_magic = images_fixture();
        bad_magic[3] = 1;
        assert!(matches!(
            parse_idx_images(&bad_magic),
            Err(Error::Format { offset: 0, .. })
        ));

        let mut short = images_fixture();
        short.pop();
        assert!(matches!(
            parse_idx_images(&short),
            Err(Error::Format { offset: 16, .. })
        ));

        let truncated_header = &images_fixture()[..10];
        assert!(matches!(
            parse_idx_images(truncated_header),
            Err(Error::Format { offset: 8, .. })
        ));
    }

    #[test]
    fn load_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        std::fs::write(&ip, images_fixture()).unwrap();
        std::fs::write(&lp, [0, 0, 8, 1, 0, 0, 0, 4, 0, 1, 1, 0]).unwrap();
        let ds = load_idx(&ip, &lp, None).unwrap();
        assert_eq!(ds.num_classes, 2);
        assert_eq!(ds.len(), 4);
        assert!(matches!(
            load_idx(&dir.path().join("missing"), &lp, None),
            Err(Error::Io { .. })
        ));
    }
}
