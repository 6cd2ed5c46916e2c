use std::path::{Path, PathBuf};

use predlab::checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint};
use predlab::config::KeyValues;
use predlab::data::{
    gen_synthetic_video, load_sequence, save_sequence, SyntheticKind, VideoSequence,
};
use predlab::evaluation::{
    bench_runtime, copy_last_frame_baseline, emit_report, predict_videos, EvalReport, Provenance,
    VideoReport,
};
use predlab::gradcheck::{gradcheck_all, TOLERANCE};
use predlab::models::{init_params, Architecture, ModelParams};
use predlab::training::{train_observed, LogRow, TrainLog};

use crate::settings::{self, env_seed};
use crate::{
    BenchArgs, CliError, EvalArgs, GenArgs, GradcheckArgs, KindArg, ParamsArgs, Recorder, TrainArgs,
};

fn seed_of(flag: Option<u64>) -> Result<u64, CliError> {
    flag.map_or_else(env_seed, Ok)
}

fn load_videos(paths: &[PathBuf]) -> Result<Vec<VideoSequence>, CliError> {
    paths.iter().map(|p| Ok(load_sequence(p)?)).collect()
}

fn train_flags(a: &TrainArgs) -> KeyValues {
    let mut kv = KeyValues::default();
    let mut put = |key: &str, v: Option<String>| {
        if let Some(v) = v {
            kv.set(key, v);
        }
    };
    put("model", a.model.map(|m| m.architecture().to_string()));
    put("mode", a.mode.map(|m| format!("{m:?}").to_lowercase()));
    if !a.data.is_empty() {
        let joined: Vec<String> = a.data.iter().map(|p| p.display().to_string()).collect();
        put("data", Some(joined.join(",")));
    }
    put("lr", a.lr.map(|v| format!("{v:e}")));
    put("batch", a.batch.map(|v| v.to_string()));
    put("seq_len", a.seq_len.map(|v| v.to_string()));
    put("patch", a.patch.clone());
    put("steps", a.steps.map(|v| v.to_string()));
    put("frames", a.frames.map(|v| v.to_string()));
    put("log_every", a.log_every.map(|v| v.to_string()));
    put("workers", a.workers.map(|v| v.to_string()));
    put(
        "motion_threshold",
        a.motion_threshold.map(|v| v.to_string()),
    );
    put(
        "low_motion_accept",
        a.low_motion_accept.map(|v| v.to_string()),
    );
    put("dataset_size", a.dataset_size.map(|v| v.to_string()));
    put("cache", a.cache.as_ref().map(|p| p.display().to_string()));
    put(
        "plateau_patience",
        a.plateau_patience.map(|v| v.to_string()),
    );
    put("plateau_factor", a.plateau_factor.map(|v| v.to_string()));
    put("channels", a.channels.map(|v| v.to_string()));
    put("res_blocks", a.res_blocks.map(|v| v.to_string()));
    put("res_scale", a.res_scale.map(|v| v.to_string()));
    put("seed", a.common.seed.map(|v| v.to_string()));
    put("out", a.out.as_ref().map(|p| p.display().to_string()));
    put("resume", a.resume.as_ref().map(|p| p.display().to_string()));
    kv
}

/// Synthetic clip used when no training data is given: a translating
/// texture with margin around the crop and enough frames for one sequence.
fn fallback_video(
    patch: (usize, usize),
    seq_len: usize,
    seed: u64,
) -> Result<VideoSequence, CliError> {
    let dims = (patch.0 + 16, patch.1 + 16);
    Ok(gen_synthetic_video(
        SyntheticKind::Translate,
        dims,
        seq_len + 24,
        (1, 1),
        seed,
    )?)
}

pub fn train(a: &TrainArgs, rec: &mut Recorder) -> Result<(), CliError> {
    let file = match &a.config {
        Some(p) => settings::read_config_file(p)?,
        None => KeyValues::default(),
    };
    let resolved = settings::resolve_train(&file, &train_flags(a))?;
    let plan = settings::train_plan(&resolved)?;
    let cfg = &plan.train;
    rec.begin(
        "train",
        &resolved,
        cfg.seed,
        Some(plan.out.join("manifest.json")),
    );
    for (k, v) in resolved.iter() {
        println!("config {k}={v}");
    }
    let videos = if plan.data.is_empty() {
        println!("no --data given: training on a synthetic translating clip");
        vec![fallback_video(cfg.patch, cfg.seq_len, cfg.seed)?]
    } else {
        load_videos(&plan.data)?
    };
    let arch = plan.model.architecture();
    let start = match &plan.resume {
        Some(path) => {
            let ckpt = load_checkpoint_for(path, arch)?;
            if ckpt.params.config() != &plan.model {
                return Err(CliError::Usage(format!(
                    "checkpoint {} was built with a different {arch} configuration",
                    path.display()
                )));
            }
            ckpt
        }
        None => Checkpoint::new(init_params(&plan.model, cfg.seed)?),
    };
    println!("model {arch}: {} parameters", plan.model.param_count());
    let mut print_row = |r: &LogRow| {
        println!(
            "update {} frames {} loss {:.6e} lr {:e} elapsed {:.1}s",
            r.updates, r.frames, r.loss, r.lr, r.seconds
        )
    };
    let result = train_observed(cfg, &videos, start, &mut print_row);
    let latest = plan.out.join("latest.ckpt");
    let log = plan.out.join("train_log.csv");
    for p in [&latest, &log] {
        if p.exists() {
            rec.artifact(p.clone());
        }
    }
    let outcome = result?;
    let final_path = plan.out.join("final.ckpt");
    save_checkpoint(
        &Checkpoint {
            params: outcome.params,
            optimizer: Some(outcome.optimizer),
        },
        &final_path,
    )?;
    rec.artifact(final_path.clone());
    let last = outcome.log.last().copied();
    if let Some(t) = outcome.motion_threshold {
        println!("motion threshold {t}");
    }
    if let Some(r) = last {
        println!(
            "done: updates={} frames={} final_loss={:.6e} peak_graph_nodes={} checkpoint={}",
            r.updates,
            r.frames,
            r.loss,
            outcome.peak_graph_nodes,
            final_path.display()
        );
    }
    Ok(())
}

fn parse_train_logs(
    specs: &[String],
    checkpoint: &Path,
    label: &str,
) -> Result<Vec<(String, TrainLog)>, CliError> {
    let mut out = Vec::new();
    for spec in specs {
        let (name, path) = spec.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("--train-log expects LABEL=PATH, got '{spec}'"))
        })?;
        out.push((name.to_string(), read_log(Path::new(path))?));
    }
    if specs.is_empty() {
        let beside = checkpoint.with_file_name("train_log.csv");
        if beside.is_file() {
            out.push((label.to_string(), read_log(&beside)?));
        }
    }
    Ok(out)
}

fn read_log(path: &Path) -> Result<TrainLog, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| predlab::Error::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(TrainLog::parse_csv(&text)?)
}

fn video_name(path: &Path) -> String {
    path.file_name().map_or_else(
        || path.display().to_string(),
        |n| n.to_string_lossy().into_owned(),
    )
}

pub fn eval(a: &EvalArgs, rec: &mut Recorder) -> Result<(), CliError> {
    let seed = seed_of(a.common.seed)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let params = ckpt.params;
    let label = a
        .label
        .clone()
        .unwrap_or_else(|| params.architecture().to_string());
    let mut config = params.config().to_key_values();
    config.set("checkpoint", a.checkpoint.display());
    let data: Vec<String> = a.data.iter().map(|p| p.display().to_string()).collect();
    config.set("data", data.join(","));
    config.set("label", &label);
    config.set("baseline", !a.no_baseline);
    config.set("seed", seed);
    rec.begin("eval", &config, seed, Some(a.out.join("manifest.json")));

    let videos = load_videos(&a.data)?;
    let predictions = predict_videos(&params, &videos, &label)?;
    let mut reports = Vec::with_capacity(videos.len());
    for ((path, video), pred) in a.data.iter().zip(&videos).zip(predictions) {
        let name = video_name(path);
        println!(
            "{name}: {label} mean PSNR {:.3} dB over {} frames",
            pred.series.mean(),
            pred.series.points.len()
        );
        if a.save_predictions {
            let out = a.out.join(format!(
                "{}__pred.y4m",
                name.replace(|c: char| !c.is_ascii_alphanumeric() && c != '-', "_")
            ));
            std::fs::create_dir_all(&a.out)
                .map_err(|e| predlab::Error::Data(format!("{}: {e}", a.out.display())))?;
            save_sequence(
                &VideoSequence::new(pred.frames, format!("prediction of {name}"))?,
                &out,
            )?;
            rec.artifact(out);
        }
        let mut series = vec![pred.series];
        if !a.no_baseline {
            let base = copy_last_frame_baseline(video)?;
            println!("{name}: {} mean PSNR {:.3} dB", base.label, base.mean());
            series.push(base);
        }
        reports.push(VideoReport { name, series });
    }
    let fps = if a.bench_frames > 0 {
        let dims = videos[0].dims();
        let r = bench_runtime(
            &params,
            dims,
            a.bench_frames,
            predlab::evaluation::DEFAULT_WARMUP,
            seed,
        )?;
        println!("{}", r.summary_line());
        Some(r.fps)
    } else {
        None
    };
    let report = EvalReport {
        videos: reports,
        training: parse_train_logs(&a.train_log, &a.checkpoint, &label)?,
        param_count: Some(params.param_count()),
        fps,
        provenance: Provenance {
            checkpoint: Some(a.checkpoint.display().to_string()),
            seed,
            config_hash: rec.config_hash(),
        },
    };
    for path in emit_report(&report, &a.out)? {
        rec.artifact(path);
    }
    println!("report written to {}", a.out.display());
    Ok(())
}

fn bench_params(a: &BenchArgs, seed: u64) -> Result<ModelParams, CliError> {
    match &a.checkpoint {
        Some(p) => Ok(load_checkpoint(p)?.params),
        None => Ok(init_params(&a.model.architecture().default_config(), seed)?),
    }
}

pub fn bench(a: &BenchArgs, rec: &mut Recorder) -> Result<(), CliError> {
    let seed = seed_of(a.common.seed)?;
    let params = bench_params(a, seed)?;
    let mut config = params.config().to_key_values();
    config.set("dims", format!("{}x{}", a.dims.0, a.dims.1));
    config.set("frames", a.frames);
    config.set("warmup", a.warmup);
    config.set("seed", seed);
    rec.begin("bench", &config, seed, None);
    let r = bench_runtime(&params, a.dims, a.frames, a.warmup, seed)?;
    println!("hardware: {}", r.hardware);
    println!("{}", r.summary_line());
    Ok(())
}

fn kind_of(k: KindArg) -> SyntheticKind {
    match k {
        KindArg::Translate => SyntheticKind::Translate,
        KindArg::Oscillate => SyntheticKind::Oscillate,
        KindArg::Noise => SyntheticKind::Noise,
    }
}

pub fn gen(a: &GenArgs, rec: &mut Recorder) -> Result<(), CliError> {
    let seed = seed_of(a.common.seed)?;
    let kind = kind_of(a.kind);
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{kind}-{seed}.y4m")));
    let mut config = KeyValues::default();
    config.set("kind", kind);
    config.set("dims", format!("{}x{}", a.dims.0, a.dims.1));
    config.set("len", a.len);
    config.set("velocity", format!("{},{}", a.velocity.0, a.velocity.1));
    config.set("seed", seed);
    config.set("out", out.display());
    let mut manifest = out.clone().into_os_string();
    manifest.push(".manifest.json");
    rec.begin("gen", &config, seed, Some(manifest.into()));
    let video = gen_synthetic_video(kind, a.dims, a.len, a.velocity, seed)?;
    save_sequence(&video, &out)?;
    rec.artifact(out.clone());
    println!(
        "wrote {} ({} frames, {}x{})",
        out.display(),
        video.len(),
        a.dims.0,
        a.dims.1
    );
    Ok(())
}

pub fn params(a: &ParamsArgs, rec: &mut Recorder) -> Result<(), CliError> {
    let seed = seed_of(a.common.seed)?;
    let mut config = KeyValues::default();
    config.set(
        "model",
        a.model
            .map_or("all".to_string(), |m| m.architecture().to_string()),
    );
    rec.begin("params", &config, seed, None);
    match a.model {
        Some(m) => println!("{}", m.architecture().default_config().param_count()),
        None => {
            for arch in [Architecture::Crnn, Architecture::Clstm, Architecture::Fcnn] {
                println!("{arch} {}", arch.default_config().param_count());
            }
        }
    }
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs, rec: &mut Recorder) -> Result<(), CliError> {
    let seed = seed_of(a.common.seed)?;
    if a.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let mut config = KeyValues::default();
    config.set("seed", seed);
    config.set("seeds", a.seeds);
    rec.begin("gradcheck", &config, seed, None);
    let mut worst = 0.0f64;
    for s in seed..seed.saturating_add(a.seeds) {
        let report = gradcheck_all(s)?;
        for c in &report.cases {
            println!(
                "seed {s} {:<18} max_rel_err {:.3e} over {} elements",
                c.name, c.max_rel_err, c.elements
            );
        }
        worst = worst.max(report.max_rel_err());
    }
    let pass = worst < TOLERANCE;
    println!(
        "gradcheck: max_rel_err={worst:.3e} tolerance={TOLERANCE:e} {}",
        if pass { "PASS" } else { "FAIL" }
    );
    if !pass {
        return Err(CliError::Verification(format!(
            "max relative error {worst:.3e} exceeds {TOLERANCE:e}"
        )));
    }
    Ok(())
}
