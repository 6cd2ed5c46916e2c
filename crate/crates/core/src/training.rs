//! Training procedures: stateless truncated BPTT over whole sequences,
//! stateful one-frame BPTT with carried detached state, and FCNN minibatch
//! training, plus the loss-versus-frames log.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{save_checkpoint, Checkpoint, OptimizerSnapshot};
use crate::data::cache::{read_cache, write_cache, MANIFEST};
use crate::data::sampler::DEFAULT_LOW_MOTION_ACCEPT;
use crate::data::{
    calibrate_motion_threshold, fcnn_minibatch, FcnnSampler, PatchSequence, PatchSequenceBatch,
    Prefetcher, Producer, RecurrentSampler, SamplerConfig, VideoSequence,
};
use crate::error::{Error, Result};
use crate::models::{
    fcnn_forward, recurrent_step, Architecture, ModelConfig, ModelParams, RecurrentState,
};
use crate::ops::mse_loss;
use crate::optim::{adam_step, AdamState, PlateauSchedule};
use crate::tensor::{GradTape, Tensor};

/// Candidates drawn when calibrating the FCNN motion threshold.
pub const CALIBRATION_PROBES: usize = 1000;
/// Share of candidates the calibrated threshold classifies as high-motion.
pub const CALIBRATION_ACCEPT: f64 = 0.3;
/// Draws allowed per requested FCNN sequence before sampling gives up.
pub const ATTEMPTS_PER_SEQUENCE: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Stateless,
    Stateful,
    Fcnn,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Stateless => "stateless",
            TrainMode::Stateful => "stateful",
            TrainMode::Fcnn => "fcnn",
        }
    }

    fn accepts(self, arch: Architecture) -> bool {
        arch.is_recurrent() != (self == TrainMode::Fcnn)
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stateless" => Ok(TrainMode::Stateless),
            "stateful" => Ok(TrainMode::Stateful),
            "fcnn" => Ok(TrainMode::Fcnn),
            other => Err(Error::Config(format!(
                "unknown training mode '{other}' (expected stateless, stateful or fcnn)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub lr: f64,
    pub batch: usize,
    /// Frames per backward pass: the whole sequence when stateless, 1 when stateful.
    pub trunc: usize,
    /// Frames per sampled sequence. For FCNN, the stacked inputs plus the target.
    pub seq_len: usize,
    /// `(height, width)` of training crops.
    pub patch: (usize, usize),
    /// Update budget.
    pub total_steps: u64,
    /// Optional frame budget; training stops at whichever budget runs out first.
    pub max_frames: Option<u64>,
    pub seed: u64,
    pub log_every: u64,
    /// Background sampling threads; 0 samples synchronously.
    pub workers: usize,
    /// FCNN motion threshold; `None` calibrates one from the data.
    pub motion_threshold: Option<f64>,
    pub low_motion_accept_prob: f64,
    /// FCNN sequences drawn into the cache when `fcnn_cache` is empty.
    pub fcnn_dataset_size: usize,
    /// Directory of cached FCNN sequences, reused when it already holds a manifest.
    pub fcnn_cache: Option<PathBuf>,
    pub plateau_patience: u64,
    pub plateau_factor: f64,
    /// Receives `latest.ckpt` and `train_log.csv` at every log point.
    pub run_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn defaults(mode: TrainMode) -> Self {
        let plateau = PlateauSchedule::default();
        let (lr, batch, trunc, seq_len, patch) = match mode {
            TrainMode::Stateless => (1e-5, 4, 8, 8, (184, 184)),
            TrainMode::Stateful => (1e-5, 4, 1, 96, (184, 184)),
            TrainMode::Fcnn => (1e-4, 32, 9, 9, (48, 48)),
        };
        TrainConfig {
            mode,
            lr,
            batch,
            trunc,
            seq_len,
            patch,
            total_steps: 1000,
            max_frames: None,
            seed: 0,
            log_every: 100,
            workers: 0,
            motion_threshold: None,
            low_motion_accept_prob: DEFAULT_LOW_MOTION_ACCEPT,
            fcnn_dataset_size: 10_000,
            fcnn_cache: None,
            plateau_patience: plateau.patience,
            plateau_factor: plateau.factor,
            run_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if self.batch == 0 || self.total_steps == 0 || self.log_every == 0 || self.seq_len < 2 {
            return bad(
                "batch, steps and log interval must be positive and sequences at least 2 frames"
                    .into(),
            );
        }
        if self.patch.0 == 0 || self.patch.1 == 0 {
            return bad(format!("patch {:?} must be positive", self.patch));
        }
        match self.mode {
            TrainMode::Stateless if self.trunc != self.seq_len => {
                return bad(format!(
                    "stateless training backpropagates through the whole sequence: trunc {} must equal seq_len {}",
                    self.trunc, self.seq_len
                ))
            }
            TrainMode::Stateful if self.trunc != 1 => {
                return bad(format!("stateful training backpropagates one frame: trunc must be 1, got {}", self.trunc))
            }
            _ => {}
        }
        if self.mode == TrainMode::Fcnn {
            PlateauSchedule::new(self.plateau_patience, self.plateau_factor)?;
        }
        Ok(())
    }

    /// Input frames consumed by one parameter update.
    pub fn frames_per_update(&self) -> u64 {
        let n = self.batch as u64;
        match self.mode {
            TrainMode::Stateless => n * self.seq_len as u64,
            TrainMode::Stateful => n,
            TrainMode::Fcnn => n * (self.seq_len as u64 - 1),
        }
    }

    fn sampler_config(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            motion_threshold: self.motion_threshold.unwrap_or(0.0),
            low_motion_accept_prob: self.low_motion_accept_prob,
            ..SamplerConfig::new(self.patch, self.seq_len, self.batch, seed)
        }
    }
}

/// Result of one parameter update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    /// Operations recorded on the autograd graph for this update.
    pub graph_nodes: usize,
}

/// `live` holds every graph output still referenced when backward starts.
fn finish_step(
    loss: Tensor,
    live: &[Tensor],
    params: &mut ModelParams,
    opt: &mut AdamState,
    context: &str,
) -> Result<StepReport> {
    let value = loss.item();
    if !value.is_finite() {
        return Err(Error::Divergence {
            context: format!("{context} at update {}", opt.step + 1),
            loss: value,
        });
    }
    let mut roots = live.to_vec();
    roots.push(loss.clone());
    let graph_nodes = GradTape::from_roots(&roots).len();
    loss.backward()?;
    adam_step(params, opt)?;
    Ok(StepReport {
        loss: value,
        graph_nodes,
    })
}

/// Zero state, `T` recurrent steps on one graph, loss on the last frame only,
/// one update. The predictions for every step stay alive until backward, as
/// with a sequence-output recurrent network.
pub fn train_stateless_step(
    params: &mut ModelParams,
    batch: &PatchSequenceBatch,
    opt: &mut AdamState,
) -> Result<StepReport> {
    let ModelConfig::Recurrent(cfg) = params.config() else {
        return Err(Error::Contract(
            "stateless training needs a recurrent model".into(),
        ));
    };
    let [n, t, h, w] = batch.inputs.shape();
    let mut state = RecurrentState::zeros(cfg, n, h, w);
    let mut preds = Vec::with_capacity(t);
    for step in 0..t {
        let (p, next) = recurrent_step(&batch.input_frame(step), &state, params)?;
        state = next;
        preds.push(p);
    }
    let last = preds
        .last()
        .ok_or_else(|| Error::Contract("empty sequence".into()))?;
    let loss = mse_loss(last, &batch.target_frame(t - 1))?;
    finish_step(loss, &preds, params, opt, "stateless step")
}

/// One recurrent step from a detached carried state, one update. Returns the
/// detached next state.
pub fn train_stateful_step(
    params: &mut ModelParams,
    state: &RecurrentState,
    frame: &Tensor,
    target: &Tensor,
    opt: &mut AdamState,
) -> Result<(StepReport, RecurrentState)> {
    if state.requires_grad() {
        return Err(Error::Contract("carried state must be detached".into()));
    }
    let (pred, next) = recurrent_step(frame, state, params)?;
    let loss = mse_loss(&pred, target)?;
    let report = finish_step(loss, &[pred], params, opt, "stateful step")?;
    Ok((report, next.detach()))
}

/// FCNN update on stacked history `(N, K, H, W)` and target `(N, 1, H, W)`,
/// followed by the plateau schedule.
pub fn train_fcnn_step(
    params: &mut ModelParams,
    inputs: &Tensor,
    target: &Tensor,
    opt: &mut AdamState,
    schedule: &mut PlateauSchedule,
) -> Result<StepReport> {
    let pred = fcnn_forward(inputs, params)?;
    let loss = mse_loss(&pred, target)?;
    let report = finish_step(loss, &[pred], params, opt, "fcnn step")?;
    schedule.update(report.loss, &mut opt.lr)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub frames: u64,
    pub updates: u64,
    pub loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

pub const LOG_HEADER: &str = "frames,updates,loss,lr,seconds";

impl TrainLog {
    pub fn last(&self) -> Option<&LogRow> {
        self.rows.last()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{LOG_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.frames, r.updates, r.loss, r.lr, r.seconds
            );
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(LOG_HEADER) {
            return Err(Error::format(
                "training log",
                format!("missing header '{LOG_HEADER}'"),
            ));
        }
        let rows = lines
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, line)| {
                let bad = || Error::format("training log", format!("row {}: '{line}'", i + 1));
                let f: Vec<&str> = line.trim().split(',').collect();
                let [frames, updates, loss, lr, seconds] = f[..] else {
                    return Err(bad());
                };
                Ok(LogRow {
                    frames: frames.parse().map_err(|_| bad())?,
                    updates: updates.parse().map_err(|_| bad())?,
                    loss: loss.parse().map_err(|_| bad())?,
                    lr: lr.parse().map_err(|_| bad())?,
                    seconds: seconds.parse().map_err(|_| bad())?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(TrainLog { rows })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub optimizer: OptimizerSnapshot,
    pub log: TrainLog,
    /// Largest per-update graph size seen.
    pub peak_graph_nodes: usize,
    /// Motion threshold used by the FCNN sampler, if any.
    pub motion_threshold: Option<f64>,
}

enum Batches {
    Recurrent(RecurrentSampler),
    RecurrentPrefetch(Prefetcher<PatchSequenceBatch>),
    Cached {
        dataset: Vec<PatchSequence>,
        rng: ChaCha8Rng,
    },
    Fcnn(FcnnSampler),
    FcnnPrefetch(Prefetcher<(Tensor, Tensor)>),
}

fn fcnn_draw(sampler: &mut FcnnSampler) -> Result<(Tensor, Tensor)> {
    let cfg = sampler.config();
    let (batch, budget) = (cfg.batch, cfg.batch * ATTEMPTS_PER_SEQUENCE);
    let mut seqs = Vec::with_capacity(batch);
    for _ in 0..budget {
        seqs.extend(sampler.try_candidate());
        if seqs.len() == batch {
            return Ok(stack_fcnn(&seqs));
        }
    }
    Err(Error::Data(format!(
        "accepted only {} of {batch} sequences within the attempt budget of {budget}",
        seqs.len()
    )))
}

/// History frames as channels and the final frame as target, in draw order.
fn stack_fcnn(seqs: &[PatchSequence]) -> (Tensor, Tensor) {
    let [t, ph, pw] = seqs[0].shape;
    let n = ph * pw;
    let mut inputs = Vec::with_capacity(seqs.len() * (t - 1) * n);
    let mut targets = Vec::with_capacity(seqs.len() * n);
    for s in seqs {
        inputs.extend_from_slice(&s.data[..(t - 1) * n]);
        targets.extend_from_slice(s.frame(t - 1));
    }
    (
        Tensor::new([seqs.len(), t - 1, ph, pw], inputs),
        Tensor::new([seqs.len(), 1, ph, pw], targets),
    )
}

impl Batches {
    fn recurrent(cfg: &TrainConfig, videos: &Arc<[VideoSequence]>) -> Result<Self> {
        if cfg.workers == 0 {
            return Ok(Batches::Recurrent(RecurrentSampler::new(
                videos.clone(),
                cfg.sampler_config(cfg.seed),
            )?));
        }
        RecurrentSampler::new(videos.clone(), cfg.sampler_config(cfg.seed))?;
        let (videos, cfg) = (videos.clone(), cfg.clone());
        Ok(Batches::RecurrentPrefetch(Prefetcher::spawn(
            cfg.workers,
            cfg.seed,
            2,
            move |seed| {
                let mut s = RecurrentSampler::new(videos.clone(), cfg.sampler_config(seed))?;
                Ok(Box::new(move || Ok(s.next_batch())) as Producer<PatchSequenceBatch>)
            },
        )?))
    }

    fn fcnn(cfg: &TrainConfig, videos: &Arc<[VideoSequence]>, tau: f64) -> Result<Self> {
        let mut scfg = cfg.sampler_config(cfg.seed);
        scfg.motion_threshold = tau;
        if let Some(dir) = &cfg.fcnn_cache {
            let dataset = if dir.join(MANIFEST).exists() {
                read_cache(dir)?
            } else {
                let seqs = crate::data::sample_fcnn_dataset(
                    videos.clone(),
                    &scfg,
                    cfg.fcnn_dataset_size,
                    cfg.fcnn_dataset_size.saturating_mul(ATTEMPTS_PER_SEQUENCE),
                )?;
                write_cache(dir, &seqs)?;
                seqs
            };
            let expected = [cfg.seq_len, cfg.patch.0, cfg.patch.1];
            if dataset.iter().any(|s| s.shape != expected) || dataset.is_empty() {
                return Err(Error::Data(format!(
                    "cache {} does not hold {expected:?} sequences",
                    dir.display()
                )));
            }
            return Ok(Batches::Cached {
                dataset,
                rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            });
        }
        if cfg.workers == 0 {
            return Ok(Batches::Fcnn(FcnnSampler::new(videos.clone(), scfg)?));
        }
        FcnnSampler::new(videos.clone(), scfg.clone())?;
        let videos = videos.clone();
        Ok(Batches::FcnnPrefetch(Prefetcher::spawn(
            cfg.workers,
            cfg.seed,
            2,
            move |seed| {
                let mut s = FcnnSampler::new(
                    videos.clone(),
                    SamplerConfig {
                        seed,
                        ..scfg.clone()
                    },
                )?;
                Ok(Box::new(move || fcnn_draw(&mut s)) as Producer<(Tensor, Tensor)>)
            },
        )?))
    }

    fn next_sequence(&mut self) -> Result<PatchSequenceBatch> {
        match self {
            Batches::Recurrent(s) => Ok(s.next_batch()),
            Batches::RecurrentPrefetch(p) => p.next_item(),
            _ => Err(Error::Contract(
                "recurrent batch requested from an FCNN sampler".into(),
            )),
        }
    }

    fn next_fcnn(&mut self, batch: usize) -> Result<(Tensor, Tensor)> {
        match self {
            Batches::Cached { dataset, rng } => fcnn_minibatch(dataset, batch, rng),
            Batches::Fcnn(s) => fcnn_draw(s),
            Batches::FcnnPrefetch(p) => p.next_item(),
            _ => Err(Error::Contract(
                "FCNN batch requested from a recurrent sampler".into(),
            )),
        }
    }
}

struct Run<'a> {
    cfg: &'a TrainConfig,
    on_row: &'a mut dyn FnMut(&LogRow),
    params: ModelParams,
    adam: AdamState,
    plateau: Option<PlateauSchedule>,
    log: TrainLog,
    frames: u64,
    window: Vec<f64>,
    peak_graph_nodes: usize,
    started: Instant,
}

impl Run<'_> {
    fn snapshot(&self) -> OptimizerSnapshot {
        OptimizerSnapshot {
            adam: self.adam.clone(),
            plateau: self.plateau.clone(),
        }
    }

    fn persist(&self) -> Result<()> {
        let Some(dir) = &self.cfg.run_dir else {
            return Ok(());
        };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let ckpt = Checkpoint {
            params: self.params.clone(),
            optimizer: Some(self.snapshot()),
        };
        save_checkpoint(&ckpt, dir.join("latest.ckpt"))?;
        self.log.write_csv(dir.join("train_log.csv"))
    }

    fn record(&mut self, report: StepReport) -> Result<()> {
        self.frames += self.cfg.frames_per_update();
        self.window.push(report.loss);
        self.peak_graph_nodes = self.peak_graph_nodes.max(report.graph_nodes);
        if self.adam.step.is_multiple_of(self.cfg.log_every) {
            self.flush()?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if self.window.is_empty() {
            return Ok(());
        }
        let loss = self.window.iter().sum::<f64>() / self.window.len() as f64;
        self.window.clear();
        self.log.rows.push(LogRow {
            frames: self.frames,
            updates: self.adam.step,
            loss,
            lr: self.adam.lr,
            seconds: self.started.elapsed().as_secs_f64(),
        });
        (self.on_row)(self.log.rows.last().expect("row just pushed"));
        self.persist()
    }

    fn done(&self, target_steps: u64) -> bool {
        self.adam.step >= target_steps || self.cfg.max_frames.is_some_and(|m| self.frames >= m)
    }

    /// Saves the last good state, then hands the error back.
    fn abort(&mut self, err: Error) -> Error {
        let _ = self.flush();
        if let Err(e) = self.persist() {
            return Error::Data(format!(
                "{err}; saving the last good checkpoint also failed: {e}"
            ));
        }
        err
    }
}

/// Trains `params` from scratch under `cfg` on `videos`.
pub fn run_training(
    cfg: &TrainConfig,
    videos: &[VideoSequence],
    params: ModelParams,
) -> Result<TrainOutcome> {
    train_observed(cfg, videos, Checkpoint::new(params), &mut |_| {})
}

/// Continues from a checkpoint, reusing its optimizer state when present.
/// `cfg.total_steps` counts updates since the start of the original run.
/// Sampling restarts from `cfg.seed`, so a resumed run does not replay the
/// batches an uninterrupted run would have drawn.
pub fn resume_training(
    cfg: &TrainConfig,
    videos: &[VideoSequence],
    checkpoint: Checkpoint,
) -> Result<TrainOutcome> {
    train_observed(cfg, videos, checkpoint, &mut |_| {})
}

/// Trains from `start` (fresh parameters or a checkpoint), calling `on_row`
/// with every log row as it is written.
pub fn train_observed(
    cfg: &TrainConfig,
    videos: &[VideoSequence],
    start: Checkpoint,
    on_row: &mut dyn FnMut(&LogRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let arch = start.params.architecture();
    if !cfg.mode.accepts(arch) {
        return Err(Error::Config(format!(
            "{} training cannot drive a {arch} model",
            cfg.mode
        )));
    }
    if let ModelConfig::Fcnn(f) = start.params.config() {
        if f.input_frames + 1 != cfg.seq_len {
            return Err(Error::Config(format!(
                "FCNN with {} input frames needs seq_len {}, got {}",
                f.input_frames,
                f.input_frames + 1,
                cfg.seq_len
            )));
        }
    }
    let videos: Arc<[VideoSequence]> = videos.to_vec().into();
    let (adam, plateau) = match start.optimizer {
        Some(s) if s.adam.matches(&start.params) => (s.adam, s.plateau),
        Some(_) => {
            return Err(Error::Contract(
                "checkpoint optimizer state does not match its parameters".into(),
            ))
        }
        None => (AdamState::new(&start.params, cfg.lr), None),
    };
    let plateau = match cfg.mode {
        TrainMode::Fcnn => Some(plateau.map_or_else(
            || PlateauSchedule::new(cfg.plateau_patience, cfg.plateau_factor),
            Ok,
        )?),
        _ => None,
    };
    let mut tau = None;
    let mut batches = match cfg.mode {
        TrainMode::Fcnn => {
            let threshold = match cfg.motion_threshold {
                Some(t) => t,
                None => calibrate_motion_threshold(
                    videos.clone(),
                    &cfg.sampler_config(cfg.seed),
                    CALIBRATION_PROBES,
                    CALIBRATION_ACCEPT,
                )?,
            };
            tau = Some(threshold);
            Batches::fcnn(cfg, &videos, threshold)?
        }
        _ => Batches::recurrent(cfg, &videos)?,
    };
    let mut run = Run {
        cfg,
        on_row,
        frames: adam.step * cfg.frames_per_update(),
        params: start.params,
        adam,
        plateau,
        log: TrainLog::default(),
        window: Vec::new(),
        peak_graph_nodes: 0,
        started: Instant::now(),
    };
    let target = cfg.total_steps;
    let result = (|| -> Result<()> {
        while !run.done(target) {
            match cfg.mode {
                TrainMode::Stateless => {
                    let batch = batches.next_sequence()?;
                    let report = train_stateless_step(&mut run.params, &batch, &mut run.adam)?;
                    run.record(report)?;
                }
                TrainMode::Stateful => {
                    let batch = batches.next_sequence()?;
                    let ModelConfig::Recurrent(rc) = run.params.config() else {
                        unreachable!()
                    };
                    let [n, t, h, w] = batch.inputs.shape();
                    let mut state = RecurrentState::zeros(rc, n, h, w);
                    for step in 0..t {
                        if run.done(target) {
                            break;
                        }
                        let (report, next) = train_stateful_step(
                            &mut run.params,
                            &state,
                            &batch.input_frame(step),
                            &batch.target_frame(step),
                            &mut run.adam,
                        )?;
                        state = next;
                        run.record(report)?;
                    }
                }
                TrainMode::Fcnn => {
                    let (x, y) = batches.next_fcnn(cfg.batch)?;
                    let schedule = run.plateau.as_mut().expect("fcnn runs carry a schedule");
                    let report = train_fcnn_step(&mut run.params, &x, &y, &mut run.adam, schedule)?;
                    run.record(report)?;
                }
            }
        }
        run.flush()
    })();
    if let Err(e) = result {
        return Err(run.abort(e));
    }
    Ok(TrainOutcome {
        optimizer: run.snapshot(),
        params: run.params,
        log: run.log,
        peak_graph_nodes: run.peak_graph_nodes,
        motion_threshold: tau,
    })
}
