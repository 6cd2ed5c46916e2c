//! YUV4MPEG2 reader (luma plane only) and a monochrome writer.
//!
//! Accepted colorspaces are the 8-bit 4:2:0 variants (`C420`, `C420jpeg`,
//! `C420paldv`, `C420mpeg2`) and `Cmono`. A missing `C` tag means `420jpeg`.
//! Chroma planes are skipped.

use crate::data::{GrayFrame, VideoSequence};
use crate::error::{Error, Result};

pub const SIGNATURE: &[u8] = b"YUV4MPEG2";
const FORMAT: &str = "Y4M";

fn line(bytes: &[u8], pos: usize) -> Result<(&[u8], usize)> {
    let rest = &bytes[pos..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(FORMAT, "unterminated header line"))?;
    Ok((&rest[..end], pos + end + 1))
}

fn dim(token: &str) -> Result<usize> {
    token[1..]
        .parse::<usize>()
        .ok()
        .filter(|&v| v > 0)
        .ok_or_else(|| Error::format(FORMAT, format!("bad dimension '{token}'")))
}

pub fn decode(bytes: &[u8]) -> Result<VideoSequence> {
    if !bytes.starts_with(SIGNATURE) {
        return Err(Error::format(FORMAT, "missing YUV4MPEG2 signature"));
    }
    let (header, mut pos) = line(bytes, 0)?;
    let header =
        std::str::from_utf8(header).map_err(|_| Error::format(FORMAT, "header is not ASCII"))?;
    let mut tokens = header.split(' ').filter(|t| !t.is_empty());
    if tokens.next() != Some("YUV4MPEG2") {
        return Err(Error::format(FORMAT, "missing YUV4MPEG2 signature"));
    }
    let (mut width, mut height, mut fps, mut colorspace) = (None, None, None, "420jpeg");
    for token in tokens {
        match token.as_bytes()[0] {
            b'W' => width = Some(dim(token)?),
            b'H' => height = Some(dim(token)?),
            b'C' => colorspace = &token[1..],
            b'F' => {
                fps = token[1..]
                    .split_once(':')
                    .and_then(|(n, d)| Some((n.parse().ok()?, d.parse().ok()?)))
                    .filter(|&(_, d): &(u32, u32)| d > 0);
            }
            _ => {}
        }
    }
    let (Some(width), Some(height)) = (width, height) else {
        return Err(Error::format(FORMAT, "header lacks W or H"));
    };
    let luma = width
        .checked_mul(height)
        .ok_or_else(|| Error::format(FORMAT, "frame dimensions overflow"))?;
    let chroma = match colorspace {
        "420" | "420jpeg" | "420paldv" | "420mpeg2" => 2 * width.div_ceil(2) * height.div_ceil(2),
        "mono" => 0,
        other => {
            return Err(Error::Unsupported {
                format: FORMAT,
                detail: format!("colorspace C{other}"),
            })
        }
    };
    let mut frames = Vec::new();
    while pos < bytes.len() {
        let (frame_header, next) = line(bytes, pos)?;
        if !frame_header.starts_with(b"FRAME") {
            return Err(Error::format(
                FORMAT,
                format!("expected FRAME marker at byte {pos}"),
            ));
        }
        pos = next;
        let end = pos
            .checked_add(luma)
            .and_then(|e| e.checked_add(chroma))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::format(FORMAT, format!("truncated frame {}", frames.len())))?;
        frames.push(GrayFrame::new(
            width,
            height,
            bytes[pos..pos + luma].to_vec(),
        )?);
        pos = end;
    }
    if frames.is_empty() {
        return Err(Error::format(FORMAT, "no frames"));
    }
    let mut video = VideoSequence::new(frames, "y4m")?;
    video.fps = fps;
    Ok(video)
}

/// Writes a `Cmono` stream.
pub fn encode(video: &VideoSequence) -> Vec<u8> {
    let (h, w) = video.dims();
    let (num, den) = video.fps.unwrap_or((25, 1));
    let mut out = format!("YUV4MPEG2 W{w} H{h} F{num}:{den} Ip A1:1 Cmono\n").into_bytes();
    for f in &video.frames {
        out.extend_from_slice(b"FRAME\n");
        out.extend_from_slice(&f.pixels);
    }
    out
}
