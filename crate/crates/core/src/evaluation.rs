//! Full-frame prediction, PSNR curves, runtime benchmarking and report files.
//!
//! Frame indices in every series are 1-based and name the *target* frame: a
//! recurrent model's first point is frame 2, an FCNN with `K` stacked inputs
//! starts at frame `K + 1`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{normalize, GrayFrame, VideoSequence};
use crate::error::{Error, Result};
use crate::models::{fcnn_forward, recurrent_step, ModelConfig, ModelParams, RecurrentState};
use crate::tensor::Tensor;
use crate::training::TrainLog;

/// Charts draw infinite PSNR at this height.
pub const PSNR_CHART_CAP_DB: f64 = 100.0;
pub const DEFAULT_WARMUP: usize = 3;
pub const PSNR_CSV_HEADER: &str = "frame,psnr";

/// `10 log10(255^2 / MSE)` over 8-bit values; identical frames give
/// `f64::INFINITY`.
pub fn psnr(pred: &GrayFrame, truth: &GrayFrame) -> Result<f64> {
    if pred.dims() != truth.dims() {
        return Err(Error::shape(
            "psnr",
            format!(
                "prediction is {:?}, ground truth is {:?}",
                pred.dims(),
                truth.dims()
            ),
        ));
    }
    let sse: f64 = pred
        .pixels
        .iter()
        .zip(&truth.pixels)
        .map(|(&a, &b)| {
            let d = f64::from(a) - f64::from(b);
            d * d
        })
        .sum();
    if sse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let mse = sse / pred.pixels.len() as f64;
    Ok(10.0 * (255.0 * 255.0 / mse).log10())
}

/// One labelled `(target frame, dB)` curve.
#[derive(Debug, Clone, PartialEq)]
pub struct PsnrSeries {
    pub label: String,
    pub points: Vec<(usize, f64)>,
}

impl PsnrSeries {
    /// Mean dB; infinite if any point is.
    pub fn mean(&self) -> f64 {
        if self.points.is_empty() {
            return f64::NAN;
        }
        self.points.iter().map(|p| p.1).sum::<f64>() / self.points.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{PSNR_CSV_HEADER}\n");
        for &(frame, db) in &self.points {
            let _ = writeln!(s, "{frame},{}", format_db(db));
        }
        s
    }
}

fn format_db(db: f64) -> String {
    if db == f64::INFINITY {
        "inf".into()
    } else {
        db.to_string()
    }
}

/// Reads a `frame,psnr` CSV back into points. `inf` marks identical frames.
pub fn parse_psnr_csv(text: &str) -> Result<Vec<(usize, f64)>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(PSNR_CSV_HEADER) {
        return Err(Error::format(
            "PSNR CSV",
            format!("missing header '{PSNR_CSV_HEADER}'"),
        ));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let bad = || Error::format("PSNR CSV", format!("row {}: '{line}'", i + 1));
            let (frame, db) = line.trim().split_once(',').ok_or_else(bad)?;
            let frame: usize = frame.parse().map_err(|_| bad())?;
            let db: f64 = match db {
                "inf" => f64::INFINITY,
                other => other.parse().map_err(|_| bad())?,
            };
            if db.is_nan() || db < 0.0 {
                return Err(bad());
            }
            Ok((frame, db))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Prediction {
    /// Predicted frames in target order.
    pub frames: Vec<GrayFrame>,
    pub series: PsnrSeries,
}

fn input_frames(video: &VideoSequence, range: std::ops::Range<usize>) -> Tensor {
    let (h, w) = video.dims();
    let k = range.len();
    let data = video.frames[range]
        .iter()
        .flat_map(|f| f.pixels.iter().map(|&p| normalize(p)))
        .collect();
    Tensor::new([1, k, h, w], data)
}

/// Predicts every frame the model can reach. A recurrent model starts from
/// zero state and sees frames one at a time; an FCNN slides a window of its
/// stacked input count. Predictions are converted to 8-bit before scoring.
pub fn predict_video(
    params: &ModelParams,
    video: &VideoSequence,
    label: &str,
) -> Result<Prediction> {
    let params = params.frozen();
    let (h, w) = video.dims();
    let len = video.len();
    let mut frames = Vec::new();
    let mut points = Vec::new();
    match params.config() {
        ModelConfig::Recurrent(cfg) => {
            if len < 2 {
                return Err(Error::Data(format!(
                    "recurrent evaluation needs at least 2 frames, video has {len}"
                )));
            }
            let mut state = RecurrentState::zeros(cfg, 1, h, w);
            for t in 0..len - 1 {
                let (pred, next) = recurrent_step(&video.frames[t].to_tensor(), &state, &params)?;
                state = next;
                let frame = GrayFrame::from_tensor(&pred)?;
                points.push((t + 2, psnr(&frame, &video.frames[t + 1])?));
                frames.push(frame);
            }
        }
        ModelConfig::Fcnn(cfg) => {
            let k = cfg.input_frames;
            if len < k + 1 {
                return Err(Error::Data(format!(
                    "FCNN evaluation needs at least {} frames, video has {len}",
                    k + 1
                )));
            }
            for t in k..len {
                let pred = fcnn_forward(&input_frames(video, t - k..t), &params)?;
                let frame = GrayFrame::from_tensor(&pred)?;
                points.push((t + 1, psnr(&frame, &video.frames[t])?));
                frames.push(frame);
            }
        }
    }
    Ok(Prediction {
        frames,
        series: PsnrSeries {
            label: label.to_string(),
            points,
        },
    })
}

/// Evaluates several videos in parallel.
pub fn predict_videos(
    params: &ModelParams,
    videos: &[VideoSequence],
    label: &str,
) -> Result<Vec<Prediction>> {
    videos
        .par_iter()
        .map(|v| predict_video(params, v, label))
        .collect()
}

/// Scores frame `t` as the prediction of frame `t + 1`.
pub fn copy_last_frame_baseline(video: &VideoSequence) -> Result<PsnrSeries> {
    if video.len() < 2 {
        return Err(Error::Data(format!(
            "baseline needs at least 2 frames, video has {}",
            video.len()
        )));
    }
    let points = video
        .frames
        .windows(2)
        .enumerate()
        .map(|(t, pair)| Ok((t + 2, psnr(&pair[0], &pair[1])?)))
        .collect::<Result<_>>()?;
    Ok(PsnrSeries {
        label: "copy-last-frame".into(),
        points,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub tag: String,
    pub height: usize,
    pub width: usize,
    /// Median per-frame wall time.
    pub ms_per_frame: f64,
    pub fps: f64,
    pub frames: usize,
    pub hardware: String,
}

impl BenchResult {
    pub fn summary_line(&self) -> String {
        format!(
            "bench: model={} h={} w={} ms_per_frame={:.3} fps={:.3}",
            self.tag, self.height, self.width, self.ms_per_frame, self.fps
        )
    }
}

/// CPU model, logical core count and rayon pool size.
pub fn hardware_descriptor() -> String {
    let cpu = fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| format!("unknown {} cpu", std::env::consts::ARCH));
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "{cpu}; {cores} logical cores; {} rayon threads",
        rayon::current_num_threads()
    )
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len().is_multiple_of(2) {
        (xs[m - 1] + xs[m]) / 2.0
    } else {
        xs[m]
    }
}

/// Times full-frame inference on random `dims = (h, w)` frames. Recurrent
/// models carry state across frames; the FCNN predicts from a fixed stack.
/// The first `warmup` frames are not timed.
pub fn bench_runtime(
    params: &ModelParams,
    dims: (usize, usize),
    frames: usize,
    warmup: usize,
    seed: u64,
) -> Result<BenchResult> {
    let (h, w) = dims;
    if frames == 0 || h == 0 || w == 0 {
        return Err(Error::Config(
            "benchmark needs at least one frame of positive size".into(),
        ));
    }
    let params = params.frozen();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random = |c: usize| {
        Tensor::new(
            [1, c, h, w],
            (0..c * h * w)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
    };
    let mut times = Vec::with_capacity(frames);
    match params.config() {
        ModelConfig::Recurrent(cfg) => {
            let frame = random(cfg.in_channels);
            let mut state = RecurrentState::zeros(cfg, 1, h, w);
            for i in 0..warmup + frames {
                let start = Instant::now();
                let (pred, next) = recurrent_step(&frame, &state, &params)?;
                let elapsed = start.elapsed().as_secs_f64() * 1e3;
                std::hint::black_box(pred);
                state = next;
                if i >= warmup {
                    times.push(elapsed);
                }
            }
        }
        ModelConfig::Fcnn(cfg) => {
            let stack = random(cfg.input_frames);
            for i in 0..warmup + frames {
                let start = Instant::now();
                let pred = fcnn_forward(&stack, &params)?;
                let elapsed = start.elapsed().as_secs_f64() * 1e3;
                std::hint::black_box(pred);
                if i >= warmup {
                    times.push(elapsed);
                }
            }
        }
    }
    let ms = median(times);
    Ok(BenchResult {
        tag: params.architecture().to_string(),
        height: h,
        width: w,
        ms_per_frame: ms,
        fps: 1000.0 / ms,
        frames,
        hardware: hardware_descriptor(),
    })
}

/// Where report numbers came from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Provenance {
    pub checkpoint: Option<String>,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoReport {
    pub name: String,
    pub series: Vec<PsnrSeries>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub videos: Vec<VideoReport>,
    /// Labelled training curves drawn as loss versus frames processed.
    pub training: Vec<(String, TrainLog)>,
    pub param_count: Option<usize>,
    pub fps: Option<f64>,
    pub provenance: Provenance,
}

fn file_stem(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect();
    let s = s.trim_matches('_');
    if s.is_empty() {
        "unnamed".into()
    } else {
        s.to_string()
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

/// Minimal SVG 1.1 line chart, one polyline per series.
fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> String {
    let (w, h, m) = (640.0, 400.0, 60.0);
    let pts = series.iter().flat_map(|s| s.1.iter().copied());
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for (x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#,
        w / 2.0,
        xml_escape(title)
    );
    let _ = writeln!(
        s,
        r#"<path d="M{m} {m} V{} H{}" fill="none" stroke="black"/>"#,
        h - m,
        w - m
    );
    let label = |s: &mut String, x: f64, y: f64, anchor: &str, text: &str| {
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{y:.1}" text-anchor="{anchor}" font-family="sans-serif" font-size="11">{}</text>"#,
            xml_escape(text)
        );
    };
    label(&mut s, m, h - m + 16.0, "middle", &format!("{x0}"));
    label(&mut s, w - m, h - m + 16.0, "middle", &format!("{x1}"));
    label(&mut s, m - 6.0, h - m, "end", &format!("{y0:.3}"));
    label(&mut s, m - 6.0, m + 4.0, "end", &format!("{y1:.3}"));
    label(&mut s, w / 2.0, h - 16.0, "middle", x_label);
    label(&mut s, 14.0, h / 2.0, "middle", y_label);
    for (i, (name, points)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"><title>{}</title></polyline>"#,
            coords.join(" "),
            xml_escape(name)
        );
        label(&mut s, w - m + 4.0, m + 14.0 * i as f64, "start", name);
    }
    s.push_str("</svg>\n");
    s
}

fn write(path: PathBuf, contents: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

/// Writes per-series CSVs, one PSNR chart per video, a training-curve chart
/// when logs are present, and `summary.txt`. Returns the paths written.
pub fn emit_report(report: &EvalReport, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    if report.videos.is_empty() && report.training.is_empty() {
        return Err(Error::Contract("nothing to report".into()));
    }
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut summary = String::new();
    let p = &report.provenance;
    let _ = writeln!(summary, "# frame indices are 1-based target frames");
    let _ = writeln!(
        summary,
        "checkpoint={}",
        p.checkpoint.as_deref().unwrap_or("none")
    );
    let _ = writeln!(summary, "seed={}", p.seed);
    let _ = writeln!(summary, "config_hash={}", p.config_hash);
    if let Some(n) = report.param_count {
        let _ = writeln!(summary, "params={n}");
    }
    if let Some(fps) = report.fps {
        let _ = writeln!(summary, "fps={fps}");
    }
    for video in &report.videos {
        let stem = file_stem(&video.name);
        let mut chart = Vec::new();
        for series in &video.series {
            let name = format!("{stem}__{}.csv", file_stem(&series.label));
            write(dir.join(name), &series.to_csv(), &mut written)?;
            let _ = writeln!(
                summary,
                "mean_psnr.{stem}.{}={}",
                file_stem(&series.label),
                format_db(series.mean())
            );
            let capped = series
                .points
                .iter()
                .map(|&(f, db)| (f as f64, db.min(PSNR_CHART_CAP_DB)))
                .collect();
            chart.push((series.label.clone(), capped));
        }
        let svg = line_chart(
            &format!("Prediction PSNR: {}", video.name),
            "frame",
            "PSNR (dB)",
            &chart,
        );
        write(dir.join(format!("{stem}.svg")), &svg, &mut written)?;
    }
    if !report.training.is_empty() {
        let curves: Vec<_> = report
            .training
            .iter()
            .map(|(label, log)| {
                (
                    label.clone(),
                    log.rows.iter().map(|r| (r.frames as f64, r.loss)).collect(),
                )
            })
            .collect();
        let svg = line_chart("Training loss", "frames processed", "loss", &curves);
        write(dir.join("training_curve.svg"), &svg, &mut written)?;
        for (label, log) in &report.training {
            write(
                dir.join(format!("train_{}.csv", file_stem(label))),
                &log.to_csv(),
                &mut written,
            )?;
        }
    }
    write(dir.join("summary.txt"), &summary, &mut written)?;
    Ok(written)
}
