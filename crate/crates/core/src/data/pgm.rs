//! Binary PGM (P5) images listed in a `path,label` CSV manifest.

use std::fs;
use std::path::Path;

use serde::Deserialize;

use super::{resize_nearest, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_pgm(path: &Path, bytes: &[u8]) -> Result<Pgm> {
    let fail = |offset: usize, detail: String| Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        detail,
    };
    if bytes.get(..2) != Some(b"P5") {
        return Err(fail(0, "expected P5 magic".into()));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and '#' comments may separate header fields
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(fail(pos, "expected a decimal header field".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|e| fail(start, format!("{e}")))?;
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(fail(pos, format!("maxval {maxval} unsupported, need 1..=255")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(fail(pos, "missing whitespace after header".into()));
    }
    pos += 1;
    let n = width * height;
    let raw = bytes
        .get(pos..pos + n)
        .ok_or_else(|| fail(bytes.len(), format!("expected {n} pixel bytes from offset {pos}")))?;
    let pixels = raw
        .iter()
        .map(|&v| ((v as usize * 255 + maxval / 2) / maxval).min(255) as u8)
        .collect();
    Ok(Pgm { width, height, pixels })
}

pub fn write_pgm(path: &Path, pgm: &Pgm) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", pgm.width, pgm.height).into_bytes();
    out.extend_from_slice(&pgm.pixels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    path: String,
    label: usize,
}

/// Loads every image of a manifest, resized to `size × size`. Relative
/// paths resolve against the manifest's directory.
pub fn load_manifest(manifest: impl AsRef<Path>, size: usize) -> Result<Split> {
    let manifest = manifest.as_ref();
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(manifest)?;
    let mut split = Split::default();
    for row in reader.deserialize() {
        let row: ManifestRow = row?;
        let p = base.join(&row.path);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let img = parse_pgm(&p, &bytes)?;
        split
            .images
            .extend(resize_nearest(&img.pixels, 1, img.height, img.width, size));
        split.labels.push(row.label);
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_rescales_maxval() {
        let bytes = b"P5\n# made by hand\n2 1\n15\n\x00\x0f";
        let img = parse_pgm(Path::new("x.pgm"), bytes).unwrap();
        assert_eq!((img.width, img.height), (2, 1));
        assert_eq!(img.pixels, vec![0, 255]);
    }

    #[test]
    fn short_payload_is_a_parse_error() {
        let err = parse_pgm(Path::new("x.pgm"), b"P5 4 4 255\n\x01\x02").unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
        assert!(parse_pgm(Path::new("x.pgm"), b"P2 1 1 255\n0").is_err());
    }

    #[test]
    fn manifest_loads_and_resizes() {
        let dir = tempfile::tempdir().unwrap();
        let img = Pgm {
            width: 2,
            height: 2,
            pixels: vec![10, 20, 30, 40],
        };
        write_pgm(&dir.path().join("a.pgm"), &img).unwrap();
        fs::write(dir.path().join("m.csv"), "path,label\na.pgm,3\na.pgm,1\n").unwrap();
        let s = load_manifest(dir.path().join("m.csv"), 4).unwrap();
        assert_eq!(s.labels, vec![3, 1]);
        assert_eq!(&s.images[..4], &[10, 10, 20, 20]);
        assert_eq!(s.images.len(), 32);
    }
}
