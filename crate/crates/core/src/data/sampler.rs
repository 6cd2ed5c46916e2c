//! Seeded patch-sequence samplers.
//!
//! The recurrent sampler emits aligned input/target sequences with the
//! target one frame behind. The FCNN sampler draws fixed-length sequences
//! and keeps them by a motion-gated rejection rule: a candidate passes when
//! the smallest squared difference between consecutive patches exceeds the
//! threshold; anything else survives with a small fixed probability.

use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{normalize, VideoSequence};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_LOW_MOTION_ACCEPT: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    /// `(height, width)` of each crop.
    pub patch: (usize, usize),
    /// Frames per sequence. For the FCNN sampler this includes the target.
    pub duration: usize,
    pub batch: usize,
    pub motion_threshold: f64,
    pub low_motion_accept_prob: f64,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(patch: (usize, usize), duration: usize, batch: usize, seed: u64) -> Self {
        SamplerConfig {
            patch,
            duration,
            batch,
            motion_threshold: 0.0,
            low_motion_accept_prob: DEFAULT_LOW_MOTION_ACCEPT,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch.0 == 0 || self.patch.1 == 0 {
            return bad(format!("patch {:?} must be positive", self.patch));
        }
        if self.duration < 2 {
            return bad(format!("duration {} must be at least 2", self.duration));
        }
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if !(self.motion_threshold >= 0.0 && self.motion_threshold.is_finite()) {
            return bad(format!(
                "motion threshold {} must be finite and >= 0",
                self.motion_threshold
            ));
        }
        if !(0.0..=1.0).contains(&self.low_motion_accept_prob) {
            return bad(format!(
                "low-motion acceptance {} must lie in [0, 1]",
                self.low_motion_accept_prob
            ));
        }
        Ok(())
    }
}

/// Indices of videos with at least `frames` frames and room for the patch.
fn eligible(videos: &[VideoSequence], patch: (usize, usize), frames: usize) -> Result<Vec<usize>> {
    let idx: Vec<usize> = videos
        .iter()
        .enumerate()
        .filter(|(_, v)| {
            let (h, w) = v.dims();
            v.len() >= frames && h >= patch.0 && w >= patch.1
        })
        .map(|(i, _)| i)
        .collect();
    if idx.is_empty() {
        return Err(Error::Data(format!(
            "no eligible videos: need at least {frames} frames of at least {}x{} pixels among {} video(s)",
            patch.1,
            patch.0,
            videos.len()
        )));
    }
    Ok(idx)
}

/// Random `(video, start, y, x)` for a crop of `frames` frames.
fn draw_window(
    rng: &mut ChaCha8Rng,
    videos: &[VideoSequence],
    eligible: &[usize],
    patch: (usize, usize),
    frames: usize,
) -> (usize, usize, usize, usize) {
    let vi = eligible[rng.random_range(0..eligible.len())];
    let v = &videos[vi];
    let (h, w) = v.dims();
    let start = rng.random_range(0..=v.len() - frames);
    let y = rng.random_range(0..=h - patch.0);
    let x = rng.random_range(0..=w - patch.1);
    (vi, start, y, x)
}

fn crop_into(
    out: &mut Vec<f64>,
    video: &VideoSequence,
    frames: std::ops::Range<usize>,
    y: usize,
    x: usize,
    patch: (usize, usize),
) {
    for f in &video.frames[frames] {
        for row in y..y + patch.0 {
            let base = row * f.width + x;
            out.extend(f.pixels[base..base + patch.1].iter().map(|&p| normalize(p)));
        }
    }
}

/// A normalized `(T, ph, pw)` crop.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    pub shape: [usize; 3],
    pub data: Vec<f64>,
}

impl PatchSequence {
    pub fn new(shape: [usize; 3], data: Vec<f64>) -> Result<Self> {
        let need = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        if need != Some(data.len()) {
            return Err(Error::Data(format!(
                "patch sequence {shape:?} cannot hold {} values",
                data.len()
            )));
        }
        Ok(PatchSequence { shape, data })
    }

    pub fn len(&self) -> usize {
        self.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.shape[0] == 0
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.shape[1] * self.shape[2];
        &self.data[t * n..(t + 1) * n]
    }
}

/// Squared difference summed over all pixels.
pub fn ssd(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Smallest SSD over consecutive frame pairs. Zero for single-frame input.
pub fn motion_statistic(seq: &PatchSequence) -> f64 {
    (1..seq.len())
        .map(|t| ssd(seq.frame(t - 1), seq.frame(t)))
        .reduce(f64::min)
        .unwrap_or(0.0)
}

/// Minibatch of aligned patch sequences, shape `(N, T, ph, pw)` each.
#[derive(Debug, Clone)]
pub struct PatchSequenceBatch {
    pub inputs: Tensor,
    pub targets: Tensor,
}

impl PatchSequenceBatch {
    pub fn batch_size(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn duration(&self) -> usize {
        self.inputs.shape()[1]
    }

    /// Input frame `t` of every sample as `(N, 1, ph, pw)`.
    pub fn input_frame(&self, t: usize) -> Tensor {
        self.inputs.channel(t)
    }

    pub fn target_frame(&self, t: usize) -> Tensor {
        self.targets.channel(t)
    }
}

/// One recurrent minibatch: `batch` independent windows of `duration + 1`
/// frames, split into inputs `[s, s+T)` and targets `[s+1, s+T]`.
pub fn sample_recurrent_minibatch(
    videos: &[VideoSequence],
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PatchSequenceBatch> {
    cfg.validate()?;
    let ok = eligible(videos, cfg.patch, cfg.duration + 1)?;
    Ok(recurrent_batch(videos, &ok, cfg, rng))
}

fn recurrent_batch(
    videos: &[VideoSequence],
    eligible: &[usize],
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> PatchSequenceBatch {
    let (t, (ph, pw)) = (cfg.duration, cfg.patch);
    let per = t * ph * pw;
    let mut inputs = Vec::with_capacity(cfg.batch * per);
    let mut targets = Vec::with_capacity(cfg.batch * per);
    for _ in 0..cfg.batch {
        let (vi, s, y, x) = draw_window(rng, videos, eligible, cfg.patch, t + 1);
        crop_into(&mut inputs, &videos[vi], s..s + t, y, x, cfg.patch);
        crop_into(&mut targets, &videos[vi], s + 1..s + t + 1, y, x, cfg.patch);
    }
    let shape = [cfg.batch, t, ph, pw];
    PatchSequenceBatch {
        inputs: Tensor::new(shape, inputs),
        targets: Tensor::new(shape, targets),
    }
}

/// Stream of recurrent minibatches seeded from the config.
pub struct RecurrentSampler {
    videos: Arc<[VideoSequence]>,
    eligible: Vec<usize>,
    cfg: SamplerConfig,
    rng: ChaCha8Rng,
}

impl RecurrentSampler {
    pub fn new(videos: impl Into<Arc<[VideoSequence]>>, cfg: SamplerConfig) -> Result<Self> {
        cfg.validate()?;
        let videos = videos.into();
        let eligible = eligible(&videos, cfg.patch, cfg.duration + 1)?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(RecurrentSampler {
            videos,
            eligible,
            cfg,
            rng,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    pub fn next_batch(&mut self) -> PatchSequenceBatch {
        recurrent_batch(&self.videos, &self.eligible, &self.cfg, &mut self.rng)
    }
}

/// Motion-gated rejection sampler for fixed-length FCNN sequences.
pub struct FcnnSampler {
    videos: Arc<[VideoSequence]>,
    eligible: Vec<usize>,
    cfg: SamplerConfig,
    rng: ChaCha8Rng,
}

impl FcnnSampler {
    pub fn new(videos: impl Into<Arc<[VideoSequence]>>, cfg: SamplerConfig) -> Result<Self> {
        cfg.validate()?;
        let videos = videos.into();
        let eligible = eligible(&videos, cfg.patch, cfg.duration)?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(FcnnSampler {
            videos,
            eligible,
            cfg,
            rng,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    /// Uniform crop with no motion test.
    pub fn draw_candidate(&mut self) -> PatchSequence {
        let (t, (ph, pw)) = (self.cfg.duration, self.cfg.patch);
        let (vi, s, y, x) = draw_window(
            &mut self.rng,
            &self.videos,
            &self.eligible,
            self.cfg.patch,
            t,
        );
        let mut data = Vec::with_capacity(t * ph * pw);
        crop_into(&mut data, &self.videos[vi], s..s + t, y, x, self.cfg.patch);
        PatchSequence {
            shape: [t, ph, pw],
            data,
        }
    }

    /// One rejection-sampling attempt. A zero threshold accepts everything.
    pub fn try_candidate(&mut self) -> Option<PatchSequence> {
        let cand = self.draw_candidate();
        let tau = self.cfg.motion_threshold;
        if tau == 0.0 || motion_statistic(&cand) > tau {
            return Some(cand);
        }
        (self.rng.random::<f64>() < self.cfg.low_motion_accept_prob).then_some(cand)
    }
}

/// Collects `count` accepted sequences within `max_attempts` draws.
pub fn sample_fcnn_dataset(
    videos: impl Into<Arc<[VideoSequence]>>,
    cfg: &SamplerConfig,
    count: usize,
    max_attempts: usize,
) -> Result<Vec<PatchSequence>> {
    let mut sampler = FcnnSampler::new(videos, cfg.clone())?;
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        if attempts == max_attempts {
            return Err(Error::Data(format!(
                "accepted only {} of {count} sequences within the attempt budget of {max_attempts}",
                out.len()
            )));
        }
        attempts += 1;
        out.extend(sampler.try_candidate());
    }
    Ok(out)
}

/// Threshold at which roughly `accept_fraction` of uniformly drawn
/// candidates count as high-motion. Uses `probes` candidates drawn from a
/// stream independent of the training sampler.
pub fn calibrate_motion_threshold(
    videos: impl Into<Arc<[VideoSequence]>>,
    cfg: &SamplerConfig,
    probes: usize,
    accept_fraction: f64,
) -> Result<f64> {
    if probes == 0 || !(0.0..=1.0).contains(&accept_fraction) {
        return Err(Error::Config(format!(
            "calibration needs probes > 0 and a fraction in [0, 1], got {probes} and {accept_fraction}"
        )));
    }
    let mut probe_cfg = cfg.clone();
    probe_cfg.seed = derive_seed(cfg.seed, u64::MAX);
    let mut sampler = FcnnSampler::new(videos, probe_cfg)?;
    let mut stats: Vec<f64> = (0..probes)
        .map(|_| motion_statistic(&sampler.draw_candidate()))
        .collect();
    stats.sort_by(f64::total_cmp);
    let rank = ((1.0 - accept_fraction) * probes as f64).floor() as usize;
    // Strict `>` keeps everything ranked at or above `rank`.
    Ok(if rank == 0 { 0.0 } else { stats[rank - 1] })
}

/// Random FCNN minibatch from a sampled dataset: the first `T - 1` frames
/// stacked as channels `(N, T-1, ph, pw)` and the last frame `(N, 1, ph, pw)`.
pub fn fcnn_minibatch(
    dataset: &[PatchSequence],
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Tensor)> {
    let Some(first) = dataset.first() else {
        return Err(Error::Data("empty FCNN dataset".into()));
    };
    let [t, ph, pw] = first.shape;
    if t < 2 || dataset.iter().any(|s| s.shape != first.shape) {
        return Err(Error::Data(
            "FCNN dataset needs uniform sequences of at least 2 frames".into(),
        ));
    }
    let n = ph * pw;
    let mut inputs = Vec::with_capacity(batch * (t - 1) * n);
    let mut targets = Vec::with_capacity(batch * n);
    for _ in 0..batch {
        let s = &dataset[rng.random_range(0..dataset.len())];
        inputs.extend_from_slice(&s.data[..(t - 1) * n]);
        targets.extend_from_slice(s.frame(t - 1));
    }
    Ok((
        Tensor::new([batch, t - 1, ph, pw], inputs),
        Tensor::new([batch, 1, ph, pw], targets),
    ))
}

/// Independent stream seed for `worker` under `master` (SplitMix64 mix).
pub fn derive_seed(master: u64, worker: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(master ^ mix(worker))
}

/// Item generator run on a worker thread.
pub type Producer<T> = Box<dyn FnMut() -> Result<T> + Send>;

/// Runs producers on background threads and hands out their items
/// round-robin, so the sequence depends only on the seeds and worker count.
pub struct Prefetcher<T> {
    receivers: Vec<Receiver<Result<T>>>,
    handles: Vec<JoinHandle<()>>,
    next: usize,
}

impl<T: Send + 'static> Prefetcher<T> {
    /// `make(worker_seed)` builds each worker's producer; `depth` bounds the
    /// number of items buffered per worker.
    pub fn spawn(
        workers: usize,
        master_seed: u64,
        depth: usize,
        make: impl Fn(u64) -> Result<Producer<T>>,
    ) -> Result<Self> {
        if workers == 0 {
            return Err(Error::Config(
                "prefetching needs at least one worker".into(),
            ));
        }
        let mut receivers = Vec::with_capacity(workers);
        let mut handles = Vec::with_capacity(workers);
        for w in 0..workers {
            let mut produce = make(derive_seed(master_seed, w as u64))?;
            let (tx, rx) = sync_channel(depth.max(1));
            handles.push(std::thread::spawn(move || loop {
                let item = produce();
                let stop = item.is_err();
                if tx.send(item).is_err() || stop {
                    break;
                }
            }));
            receivers.push(rx);
        }
        Ok(Prefetcher {
            receivers,
            handles,
            next: 0,
        })
    }

    pub fn next_item(&mut self) -> Result<T> {
        let rx = &self.receivers[self.next % self.receivers.len()];
        self.next += 1;
        rx.recv()
            .map_err(|_| Error::Data("sampler worker stopped".into()))?
    }
}

impl<T> Drop for Prefetcher<T> {
    fn drop(&mut self) {
        self.receivers.clear();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}
