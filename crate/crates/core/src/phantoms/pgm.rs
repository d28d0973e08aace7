//! Binary PGM (`P5`) reading and writing.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{Image, LabelMap};

/// A decoded `P5` raster: raw samples plus the declared maximum value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u8>,
}

fn err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Pgm {
        offset,
        msg: msg.into(),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_ws_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_ws_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(start, format!("{what} out of range")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Pgm> {
    match bytes.get(..2) {
        Some(b"P5") => {}
        Some(b"P2") => return Err(err(0, "ASCII PGM (P2) is not supported; convert to binary P5")),
        _ => return Err(err(0, "missing P5 magic number")),
    }
    let mut c = Cursor { bytes, pos: 2 };
    let width = c.number("width")?;
    let height = c.number("height")?;
    let maxval_at = c.pos;
    let maxval = c.number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(err(maxval_at, format!("maxval {maxval} unsupported (need 1..=255)")));
    }
    match bytes.get(c.pos) {
        Some(b) if b.is_ascii_whitespace() => c.pos += 1,
        _ => return Err(err(c.pos, "expected single whitespace before raster")),
    }
    let n = width * height;
    let raster = &bytes[c.pos..];
    if raster.len() < n {
        return Err(err(
            bytes.len(),
            format!("raster truncated: need {n} bytes, found {}", raster.len()),
        ));
    }
    if let Some(i) = raster[..n].iter().position(|&v| v as usize > maxval) {
        return Err(err(c.pos + i, format!("sample exceeds maxval {maxval}")));
    }
    Ok(Pgm {
        width,
        height,
        maxval: maxval as u16,
        samples: raster[..n].to_vec(),
    })
}

pub fn encode(pgm: &Pgm) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", pgm.width, pgm.height, pgm.maxval).into_bytes();
    out.extend_from_slice(&pgm.samples);
    out
}

fn read(path: &Path) -> Result<Pgm> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Pgm { offset, msg } => Error::format(path, format!("PGM parse error at byte {offset}: {msg}")),
        other => other,
    })
}

fn write(path: &Path, pgm: &Pgm) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, encode(pgm)).map_err(|e| Error::io(path, e))
}

/// Maps samples linearly from `[0, maxval]` to `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Image> {
    let p = read(path)?;
    let max = p.maxval as f64;
    Image::new(p.width, p.height, p.samples.iter().map(|&v| v as f64 / max).collect())
}

/// Maps `[0, 1]` linearly to `[0, 255]` with rounding; values are clamped.
pub fn save_image(path: &Path, img: &Image) -> Result<()> {
    let samples = img
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    write(
        path,
        &Pgm {
            width: img.width,
            height: img.height,
            maxval: 255,
            samples,
        },
    )
}

pub fn load_mask(path: &Path) -> Result<LabelMap> {
    let p = read(path)?;
    LabelMap::new(p.width, p.height, p.samples).map_err(|e| Error::format(path, e))
}

pub fn save_mask(path: &Path, mask: &LabelMap) -> Result<()> {
    write(
        path,
        &Pgm {
            width: mask.width,
            height: mask.height,
            maxval: 3,
            samples: mask.labels.clone(),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_ascii_variant() {
        let e = decode(b"P2\n2 1\n255\n0 255\n").unwrap_err();
        assert!(e.to_string().contains("P2"), "{e}");
    }

    #[test]
    fn rejects_bad_magic_and_reports_offset() {
        assert!(matches!(decode(b"P6\n1 1\n255\n\0"), Err(Error::Pgm { offset: 0, .. })));
        match decode(b"P5\n2 x\n255\n") {
            Err(Error::Pgm { offset, .. }) => assert_eq!(offset, 5),
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode(b"P5\n4 4\n255\n\x01\x02"), Err(Error::Pgm { .. })));
    }

    #[test]
    fn header_comments_are_skipped() {
        let p = decode(b"P5\n# made by hand\n2 1\n255\n\x00\xff").unwrap();
        assert_eq!((p.width, p.height, p.maxval), (2, 1, 255));
        assert_eq!(p.samples, vec![0, 255]);
    }

    #[test]
    fn mask_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let m = LabelMap::new(3, 2, vec![0, 1, 2, 3, 2, 1]).unwrap();
        save_mask(&path, &m).unwrap();
        assert_eq!(load_mask(&path).unwrap(), m);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn image_roundtrip_within_quantization(data in proptest::collection::vec(0.0f64..=1.0, 12)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("x.pgm");
            let img = Image::new(4, 3, data).unwrap();
            save_image(&path, &img).unwrap();
            let back = load_image(&path).unwrap();
            for (a, b) in img.data.iter().zip(&back.data) {
                prop_assert!((a - b).abs() <= 1.0 / 255.0);
            }
        }
    }
}
