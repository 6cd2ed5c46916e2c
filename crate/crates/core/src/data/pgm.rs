//! Binary PGM (`P5`) with maxval 255.

use crate::data::GrayFrame;
use crate::error::{Error, Result};

const FORMAT: &str = "PGM";

struct Header<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.buf.get(self.pos) {
            if b == b'#' {
                while self.buf.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.buf.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(FORMAT, format!("missing {what}")));
        }
        std::str::from_utf8(&self.buf[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(FORMAT, format!("{what} out of range")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<GrayFrame> {
    if !bytes.starts_with(b"P5") {
        return Err(Error::format(FORMAT, "missing P5 signature"));
    }
    let mut h = Header { buf: bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(Error::Unsupported {
            format: FORMAT,
            detail: format!("maxval {maxval} (only 255 is supported)"),
        });
    }
    if width == 0 || height == 0 {
        return Err(Error::format(FORMAT, "zero image dimension"));
    }
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        _ => {
            return Err(Error::format(
                FORMAT,
                "header must end with one whitespace byte",
            ))
        }
    }
    let need = width
        .checked_mul(height)
        .ok_or_else(|| Error::format(FORMAT, "image dimensions overflow"))?;
    let raster = &bytes[h.pos..];
    if raster.len() != need {
        return Err(Error::format(
            FORMAT,
            format!(
                "{width}x{height} raster needs {need} bytes, found {}",
                raster.len()
            ),
        ));
    }
    GrayFrame::new(width, height, raster.to_vec())
}

pub fn encode(frame: &GrayFrame) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    out.extend_from_slice(&frame.pixels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decodes_header_with_comments() {
        let mut bytes = b"P5 # made by hand\n3 # width\n2\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let f = decode(&bytes).unwrap();
        assert_eq!((f.width, f.height), (3, 2));
        assert_eq!(f.get(1, 2), 6);
    }

    #[test]
    fn rejects_other_maxval() {
        let mut bytes = b"P5\n1 1\n65535\n".to_vec();
        bytes.extend_from_slice(&[0, 0]);
        assert!(matches!(decode(&bytes), Err(Error::Unsupported { .. })));
    }

    #[test]
    fn rejects_malformed() {
        assert!(decode(b"P2\n1 1\n255\n0").is_err());
        assert!(decode(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode(b"P5\n0 2\n255\n").is_err());
        assert!(decode(b"P5\n99999999999999999999999 2\n255\n").is_err());
        assert!(decode(b"P5\n1 1\n255").is_err());
    }

    proptest! {
        #[test]
        fn round_trip(w in 1usize..20, h in 1usize..20, seed in any::<u8>()) {
            let pixels = (0..w * h).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
            let f = GrayFrame::new(w, h, pixels).unwrap();
            prop_assert_eq!(decode(&encode(&f)).unwrap(), f);
        }
    }
}
