//! IDX files as used by MNIST: a big-endian header followed by raw bytes.
//!
//! ```text
//! images: 0x00000803 | n: u32 | rows: u32 | cols: u32 | n·rows·cols bytes
//! labels: 0x00000801 | n: u32 | n bytes
//! ```

use std::fs;
use std::path::Path;

use super::Split;
use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Images and labels read from an IDX pair. Images are single-channel.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxSplit {
    pub rows: usize,
    pub cols: usize,
    pub split: Split,
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
}

impl Reader<'_> {
    fn fail(&self, offset: usize, detail: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            detail: detail.into(),
        }
    }

    fn u32_at(&self, offset: usize) -> Result<u32> {
        let b = self
            .bytes
            .get(offset..offset + 4)
            .ok_or_else(|| self.fail(self.bytes.len(), "file ends inside the header"))?;
        Ok(u32::from_be_bytes(b.try_into().expect("4 bytes")))
    }

    fn magic(&self, expected: u32) -> Result<()> {
        let actual = self.u32_at(0)?;
        if actual != expected {
            return Err(self.fail(0, format!("magic 0x{actual:08x}, expected 0x{expected:08x}")));
        }
        Ok(())
    }

    fn payload(&self, start: usize, len: usize) -> Result<&[u8]> {
        self.bytes.get(start..start + len).ok_or_else(|| {
            self.fail(
                self.bytes.len(),
                format!("payload needs {len} bytes from offset {start}, file has {}", self.bytes.len()),
            )
        })
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<IdxSplit> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let (ib, lb) = (read(ip)?, read(lp)?);
    let img = Reader { path: ip, bytes: &ib };
    img.magic(IMAGE_MAGIC)?;
    let n = img.u32_at(4)? as usize;
    let rows = img.u32_at(8)? as usize;
    let cols = img.u32_at(12)? as usize;
    let images = img.payload(16, n * rows * cols)?.to_vec();

    let lab = Reader { path: lp, bytes: &lb };
    lab.magic(LABEL_MAGIC)?;
    let nl = lab.u32_at(4)? as usize;
    if nl != n {
        return Err(lab.fail(4, format!("{nl} labels for {n} images")));
    }
    let labels = lab.payload(8, n)?.iter().map(|&b| b as usize).collect();
    Ok(IdxSplit {
        rows,
        cols,
        split: Split { images, labels },
    })
}

pub fn write_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    rows: usize,
    cols: usize,
    split: &Split,
) -> Result<()> {
    let n = split.len();
    if split.images.len() != n * rows * cols {
        return Err(Error::Data(format!(
            "{} pixels for {n} images of {rows}×{cols}",
            split.images.len()
        )));
    }
    if let Some(&l) = split.labels.iter().find(|&&l| l > 255) {
        return Err(Error::Data(format!("label {l} does not fit in one byte")));
    }
    let mut ib = Vec::with_capacity(16 + split.images.len());
    for v in [IMAGE_MAGIC, n as u32, rows as u32, cols as u32] {
        ib.extend_from_slice(&v.to_be_bytes());
    }
    ib.extend_from_slice(&split.images);
    let mut lb = Vec::with_capacity(8 + n);
    for v in [LABEL_MAGIC, n as u32] {
        lb.extend_from_slice(&v.to_be_bytes());
    }
    lb.extend(split.labels.iter().map(|&l| l as u8));
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    fs::write(ip, ib).map_err(|e| Error::io(ip, e))?;
    fs::write(lp, lb).map_err(|e| Error::io(lp, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use sha2::{Digest, Sha256};

    fn fixture() -> Split {
        Split {
            images: (0..10 * 4 * 3).map(|i| (i * 7 % 256) as u8).collect(),
            labels: (0..10).map(|i| i % 3).collect(),
        }
    }

    #[test]
    fn roundtrip_preserves_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
        let s = fixture();
        write_idx(&ip, &lp, 4, 3, &s).unwrap();
        let back = load_idx(&ip, &lp).unwrap();
        assert_eq!((back.rows, back.cols), (4, 3));
        assert_eq!(Sha256::digest(&back.split.images), Sha256::digest(&s.images));
        assert_eq!(back.split.labels, s.labels);
    }

    #[test]
    fn header_only_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        write_idx(&ip, &lp, 28, 28, &Split::default()).unwrap();
        let back = load_idx(&ip, &lp).unwrap();
        assert!(back.split.is_empty());
        assert_eq!(back.rows, 28);
    }

    #[test]
    fn bad_magic_names_both_values() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        write_idx(&ip, &lp, 4, 3, &fixture()).unwrap();
        // swap the files: image reader sees the label magic
        let err = load_idx(&lp, &ip).unwrap_err().to_string();
        assert!(err.contains("0x00000801") && err.contains("0x00000803"), "{err}");
    }

    #[test]
    fn truncation_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        write_idx(&ip, &lp, 4, 3, &fixture()).unwrap();
        let mut b = fs::read(&ip).unwrap();
        b.truncate(50);
        fs::write(&ip, b).unwrap();
        match load_idx(&ip, &lp) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 50),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
