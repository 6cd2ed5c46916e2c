//! Grayscale video ingestion, pixel normalization, patch samplers and
//! procedural test videos.

pub mod cache;
pub mod pgm;
pub mod sampler;
pub mod synthetic;
pub mod y4m;

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use sampler::{
    calibrate_motion_threshold, derive_seed, fcnn_minibatch, motion_statistic, sample_fcnn_dataset,
    sample_recurrent_minibatch, ssd, FcnnSampler, PatchSequence, PatchSequenceBatch, Prefetcher,
    Producer, RecurrentSampler, SamplerConfig,
};
pub use synthetic::{gen_synthetic_video, SyntheticKind};

/// One 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayFrame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayFrame {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width.checked_mul(height) != Some(pixels.len()) {
            return Err(Error::Data(format!(
                "frame {width}x{height} needs {} pixels, got {}",
                width.saturating_mul(height),
                pixels.len()
            )));
        }
        Ok(GrayFrame {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        GrayFrame {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Normalized `(1, 1, H, W)` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            [1, 1, self.height, self.width],
            self.pixels.iter().map(|&p| normalize(p)).collect(),
        )
    }

    /// Inverse of [`GrayFrame::to_tensor`] for a single-image tensor, with the
    /// clamp-and-round rule of [`denormalize`].
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [n, c, h, w] = t.shape();
        if n != 1 || c != 1 {
            return Err(Error::shape(
                "GrayFrame::from_tensor",
                format!("expected one image, got {:?}", t.shape()),
            ));
        }
        GrayFrame::new(w, h, t.data().iter().map(|&v| denormalize(v)).collect())
    }
}

/// Frames of one video, all the same size.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSequence {
    pub frames: Vec<GrayFrame>,
    /// Frame rate as `numerator / denominator`, if the container records it.
    pub fps: Option<(u32, u32)>,
    pub source: String,
}

impl VideoSequence {
    pub fn new(frames: Vec<GrayFrame>, source: impl Into<String>) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::Data("a video needs at least one frame".into()));
        };
        let dims = first.dims();
        if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.dims() != dims) {
            return Err(Error::Data(format!(
                "frame {i} is {}x{}, first frame is {}x{}",
                f.width, f.height, dims.1, dims.0
            )));
        }
        Ok(VideoSequence {
            frames,
            fps: None,
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(height, width)`.
    pub fn dims(&self) -> (usize, usize) {
        self.frames[0].dims()
    }

    /// Truncated copy holding the first `len` frames.
    pub fn prefix(&self, len: usize) -> VideoSequence {
        VideoSequence {
            frames: self.frames[..len.min(self.frames.len())].to_vec(),
            fps: self.fps,
            source: self.source.clone(),
        }
    }
}

/// Maps a pixel to `[-1, 1]`: `p / 127.5 - 1`.
pub fn normalize(p: u8) -> f64 {
    f64::from(p) / 127.5 - 1.0
}

/// Clamps to `[-1, 1]`, then maps back to `0..=255` with rounding.
pub fn denormalize(v: f64) -> u8 {
    let v = if v.is_nan() { -1.0 } else { v.clamp(-1.0, 1.0) };
    ((v + 1.0) * 127.5).round() as u8
}

/// BT.601 luma from 8-bit RGB.
pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    (0.299 * f64::from(r) + 0.587 * f64::from(g) + 0.114 * f64::from(b)).round() as u8
}

/// Loads a directory of P5 PGM frames (lexicographic order) or a Y4M file.
pub fn load_sequence(path: impl AsRef<Path>) -> Result<VideoSequence> {
    let path = path.as_ref();
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    let source = path.display().to_string();
    if meta.is_dir() {
        let mut files: Vec<_> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Data(format!("no .pgm files in {source}")));
        }
        let frames = files
            .iter()
            .map(|f| pgm::decode(&fs::read(f).map_err(|e| Error::io(f, e))?))
            .collect::<Result<Vec<_>>>()?;
        return VideoSequence::new(frames, source);
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(y4m::SIGNATURE) {
        let mut video = y4m::decode(&bytes)?;
        video.source = source;
        Ok(video)
    } else if bytes.starts_with(b"P5") {
        VideoSequence::new(vec![pgm::decode(&bytes)?], source)
    } else {
        Err(Error::Unsupported {
            format: "video",
            detail: format!(
                "{source} is neither a Y4M file, a PGM file nor a directory of PGM frames"
            ),
        })
    }
}

/// Writes `video` as a Y4M file when `path` ends in `.y4m`, otherwise as a
/// directory of `frame_NNNNNN.pgm` files.
pub fn save_sequence(video: &VideoSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("y4m"))
    {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        return fs::write(path, y4m::encode(video)).map_err(|e| Error::io(path, e));
    }
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    for (i, frame) in video.frames.iter().enumerate() {
        let file = path.join(format!("frame_{i:06}.pgm"));
        fs::write(&file, pgm::encode(frame)).map_err(|e| Error::io(&file, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_endpoints() {
        assert_eq!(normalize(0), -1.0);
        assert_eq!(normalize(255), 1.0);
        assert_eq!(denormalize(1.7), 255);
        assert_eq!(denormalize(-3.0), 0);
        assert_eq!(denormalize(f64::NAN), 0);
    }

    #[test]
    fn normalization_round_trip_all_levels() {
        for p in 0..=255u8 {
            assert_eq!(denormalize(normalize(p)), p);
        }
    }

    #[test]
    fn video_rejects_mixed_dims() {
        let a = GrayFrame::filled(4, 4, 0);
        let b = GrayFrame::filled(4, 5, 0);
        assert!(VideoSequence::new(vec![a, b], "x").is_err());
        assert!(VideoSequence::new(vec![], "x").is_err());
    }

    #[test]
    fn luma_weights() {
        assert_eq!(luma(255, 255, 255), 255);
        assert_eq!(luma(0, 0, 0), 0);
        assert_eq!(luma(255, 0, 0), 76);
    }

    #[test]
    fn pgm_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let frames = (0..3u8)
            .map(|i| {
                GrayFrame::new(
                    16,
                    16,
                    (0..256).map(|p| (p as u8).wrapping_mul(i + 1)).collect(),
                )
                .unwrap()
            })
            .collect();
        let video = VideoSequence::new(frames, "mem").unwrap();
        save_sequence(&video, dir.path().join("seq")).unwrap();
        let back = load_sequence(dir.path().join("seq")).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back.dims(), (16, 16));
        assert_eq!(back.frames, video.frames);
    }

    #[test]
    fn y4m_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let video = gen_synthetic_video(SyntheticKind::Translate, (12, 10), 5, (1, 0), 3).unwrap();
        let path = dir.path().join("v.y4m");
        save_sequence(&video, &path).unwrap();
        assert_eq!(load_sequence(&path).unwrap().frames, video.frames);
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_sequence(dir.path().join("nope")),
            Err(Error::Io { .. })
        ));
        assert!(matches!(load_sequence(dir.path()), Err(Error::Data(_))));
        let junk = dir.path().join("junk.bin");
        fs::write(&junk, b"hello").unwrap();
        assert!(load_sequence(&junk).is_err());
        let sub = dir.path().join("mixed");
        fs::create_dir(&sub).unwrap();
        fs::write(sub.join("a.pgm"), pgm::encode(&GrayFrame::filled(4, 4, 1))).unwrap();
        fs::write(sub.join("b.pgm"), pgm::encode(&GrayFrame::filled(5, 4, 1))).unwrap();
        assert!(matches!(load_sequence(&sub), Err(Error::Data(_))));
    }
}
