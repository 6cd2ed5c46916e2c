//! Procedural grayscale videos for desk-scale experiments.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{GrayFrame, VideoSequence};
use crate::error::{Error, Result};

/// Period, in frames, of the oscillating motion.
pub const OSCILLATION_PERIOD: usize = 24;

const BLUR_RADIUS: usize = 2;
const BLUR_PASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Fixed texture shifted circularly by `velocity` pixels per frame.
    Translate,
    /// Fixed texture moving back and forth along `velocity`, peak speed
    /// `|velocity|`, period [`OSCILLATION_PERIOD`].
    Oscillate,
    /// Independent uniform noise per frame.
    Noise,
}

impl SyntheticKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SyntheticKind::Translate => "translate",
            SyntheticKind::Oscillate => "oscillate",
            SyntheticKind::Noise => "noise",
        }
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "translate" => Ok(SyntheticKind::Translate),
            "oscillate" => Ok(SyntheticKind::Oscillate),
            "noise" => Ok(SyntheticKind::Noise),
            other => Err(Error::Config(format!(
                "unknown video kind '{other}' (expected translate, oscillate or noise)"
            ))),
        }
    }
}

/// Smooth random texture spanning the full 0..=255 range.
fn texture(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<u8> {
    let mut img: Vec<f64> = (0..h * w).map(|_| rng.random::<f64>()).collect();
    let r = BLUR_RADIUS as isize;
    let wrap = |i: isize, n: usize| i.rem_euclid(n as isize) as usize;
    for _ in 0..BLUR_PASSES {
        let mut tmp = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = (-r..=r).map(|d| img[y * w + wrap(x as isize + d, w)]).sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                img[y * w + x] = (-r..=r).map(|d| tmp[wrap(y as isize + d, h) * w + x]).sum();
            }
        }
    }
    let lo = img.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = img.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    img.iter()
        .map(|v| ((v - lo) / span * 255.0).round() as u8)
        .collect()
}

fn shifted(tex: &[u8], h: usize, w: usize, dy: i64, dx: i64) -> GrayFrame {
    let (hi, wi) = (h as i64, w as i64);
    let mut pixels = Vec::with_capacity(h * w);
    for y in 0..hi {
        let sy = (y - dy).rem_euclid(hi) as usize;
        for x in 0..wi {
            pixels.push(tex[sy * w + (x - dx).rem_euclid(wi) as usize]);
        }
    }
    GrayFrame {
        width: w,
        height: h,
        pixels,
    }
}

/// Deterministic procedural video of `length` frames sized `dims = (h, w)`.
/// `velocity = (dy, dx)` is in pixels per frame; noise ignores it.
pub fn gen_synthetic_video(
    kind: SyntheticKind,
    dims: (usize, usize),
    length: usize,
    velocity: (i64, i64),
    seed: u64,
) -> Result<VideoSequence> {
    let (h, w) = dims;
    if h == 0 || w == 0 || length == 0 {
        return Err(Error::Config(format!(
            "video dims {h}x{w} and length {length} must be positive"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = match kind {
        SyntheticKind::Translate => {
            let tex = texture(&mut rng, h, w);
            (0..length as i64)
                .map(|t| {
                    shifted(
                        &tex,
                        h,
                        w,
                        velocity.0.wrapping_mul(t),
                        velocity.1.wrapping_mul(t),
                    )
                })
                .collect()
        }
        SyntheticKind::Oscillate => {
            let tex = texture(&mut rng, h, w);
            let reach = OSCILLATION_PERIOD as f64 / TAU;
            (0..length)
                .map(|t| {
                    let s = (TAU * t as f64 / OSCILLATION_PERIOD as f64).sin() * reach;
                    let d = |v: i64| (v as f64 * s).round() as i64;
                    shifted(&tex, h, w, d(velocity.0), d(velocity.1))
                })
                .collect()
        }
        SyntheticKind::Noise => (0..length)
            .map(|_| GrayFrame {
                width: w,
                height: h,
                pixels: (0..h * w).map(|_| rng.random::<u8>()).collect(),
            })
            .collect(),
    };
    let mut video = VideoSequence::new(frames, format!("synthetic:{kind}:seed={seed}"))?;
    video.fps = Some((25, 1));
    Ok(video)
}
