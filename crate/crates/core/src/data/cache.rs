//! On-disk cache of sampled FCNN patch sequences.
//!
//! A cache directory holds one raw little-endian `f64` blob per sequence and
//! a `manifest.txt` listing `<blob name> <T>x<H>x<W>` per line. Blank lines
//! and `#` comments are ignored.

use std::fs;
use std::path::Path;

use crate::data::PatchSequence;
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.txt";
const FORMAT: &str = "cache manifest";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: [usize; 3],
}

impl ManifestEntry {
    /// Number of `f64` values in the blob.
    pub fn numel(&self) -> Option<usize> {
        self.shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d))
    }
}

/// Blob names stay inside the cache directory.
fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && !name.starts_with('.')
        && name
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-'))
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |d: &str| Error::format(FORMAT, format!("line {}: {d}", i + 1));
        let mut parts = line.split_whitespace();
        let (Some(name), Some(shape), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(bad("expected '<name> <T>x<H>x<W>'"));
        };
        if !valid_name(name) {
            return Err(bad(&format!("invalid blob name '{name}'")));
        }
        let dims: Vec<usize> = shape
            .split('x')
            .map(|d| d.parse::<usize>().ok().filter(|&v| v > 0))
            .collect::<Option<_>>()
            .ok_or_else(|| bad(&format!("invalid shape '{shape}'")))?;
        let shape: [usize; 3] = dims
            .try_into()
            .map_err(|_| bad(&format!("shape '{shape}' must have three dimensions")))?;
        let entry = ManifestEntry {
            name: name.to_string(),
            shape,
        };
        if entry.numel().is_none() {
            return Err(bad("shape overflows"));
        }
        out.push(entry);
    }
    Ok(out)
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut s = String::from("# blob T x H x W\n");
    for e in entries {
        let [t, h, w] = e.shape;
        s.push_str(&format!("{} {t}x{h}x{w}\n", e.name));
    }
    s
}

pub fn write_cache(dir: impl AsRef<Path>, sequences: &[PatchSequence]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(sequences.len());
    for (i, seq) in sequences.iter().enumerate() {
        let name = format!("patch_{i:06}.f64");
        let bytes: Vec<u8> = seq.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = dir.join(&name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(ManifestEntry {
            name,
            shape: seq.shape,
        });
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, format_manifest(&entries)).map_err(|e| Error::io(&path, e))
}

pub fn read_cache(dir: impl AsRef<Path>) -> Result<Vec<PatchSequence>> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    parse_manifest(&text)?
        .into_iter()
        .map(|e| {
            let path = dir.join(&e.name);
            let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
            let numel = e.numel().unwrap_or(usize::MAX);
            if bytes.len() / 8 != numel || bytes.len() % 8 != 0 {
                return Err(Error::format(
                    FORMAT,
                    format!(
                        "blob {} holds {} bytes, shape {:?} needs {numel} values",
                        e.name,
                        bytes.len(),
                        e.shape
                    ),
                ));
            }
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            PatchSequence::new(e.shape, data)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cache_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let seqs = vec![
            PatchSequence::new([2, 1, 3], vec![-1.0, 0.1, 0.2, 1.0, -0.0, 1e-300]).unwrap(),
            PatchSequence::new([1, 2, 1], vec![0.5, -0.5]).unwrap(),
        ];
        write_cache(dir.path(), &seqs).unwrap();
        let back = read_cache(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in seqs.iter().zip(&back) {
            assert_eq!(a.shape, b.shape);
            let bits = |s: &PatchSequence| s.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn manifest_parsing() {
        let m = parse_manifest("# c\n\na.f64 9x48x48\n  b 1x1x1  \n").unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].shape, [9, 48, 48]);
        assert_eq!(parse_manifest(&format_manifest(&m)).unwrap(), m);
    }

    #[test]
    fn manifest_rejects_bad_lines() {
        for bad in [
            "a.f64",
            "a.f64 9x48",
            "a.f64 9x0x48",
            "a.f64 9x48x48 extra",
            "../etc 1x1x1",
            "sub/x 1x1x1",
            ".hidden 1x1x1",
            "a 99999999999x99999999999x99999999999",
        ] {
            assert!(parse_manifest(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn blob_size_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST), "a 1x1x2\n").unwrap();
        fs::write(dir.path().join("a"), [0u8; 8]).unwrap();
        assert!(read_cache(dir.path()).is_err());
    }
}
