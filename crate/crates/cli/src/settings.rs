//! Layered run settings: built-in defaults, then a `key=value` config file,
//! then command-line flags. The resolved set is what gets hashed and stored
//! in the run manifest.

use std::path::{Path, PathBuf};

use predlab::config::KeyValues;
use predlab::models::{Architecture, ModelConfig};
use predlab::training::{TrainConfig, TrainMode};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const SEED_ENV: &str = "PREDLAB_SEED";

/// Keys a training config file may set.
pub const TRAIN_KEYS: &[&str] = &[
    "model",
    "mode",
    "data",
    "lr",
    "batch",
    "seq_len",
    "patch",
    "steps",
    "frames",
    "log_every",
    "workers",
    "motion_threshold",
    "low_motion_accept",
    "dataset_size",
    "cache",
    "plateau_patience",
    "plateau_factor",
    "channels",
    "res_blocks",
    "res_scale",
    "seed",
    "out",
    "resume",
];

/// Seed from `PREDLAB_SEED`, else 0.
pub fn env_seed() -> Result<u64, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}='{v}' is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

pub fn parse_dims(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once('x')
        .ok_or_else(|| format!("expected HxW, got '{s}'"))?;
    let dim = |v: &str| {
        v.trim()
            .parse::<usize>()
            .ok()
            .filter(|&d| d > 0)
            .ok_or_else(|| format!("'{v}' is not a positive integer"))
    };
    Ok((dim(h)?, dim(w)?))
}

pub fn parse_velocity(s: &str) -> Result<(i64, i64), String> {
    let (dy, dx) = s
        .split_once(',')
        .ok_or_else(|| format!("expected DY,DX, got '{s}'"))?;
    let v = |t: &str| {
        t.trim()
            .parse::<i64>()
            .map_err(|_| format!("'{t}' is not an integer"))
    };
    Ok((v(dy)?, v(dx)?))
}

pub fn read_config_file(path: &Path) -> Result<KeyValues, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config file {}: {e}", path.display())))?;
    let raw = KeyValues::parse(&text).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut kv = KeyValues::default();
    for (k, v) in raw.iter() {
        let key = k.replace('-', "_");
        if !TRAIN_KEYS.contains(&key.as_str()) {
            return Err(CliError::Usage(format!(
                "unknown config key '{k}' in {}",
                path.display()
            )));
        }
        kv.set(&key, v);
    }
    Ok(kv)
}

fn model_default(arch: Architecture) -> (usize, usize, f64) {
    match arch.default_config() {
        ModelConfig::Recurrent(c) => (c.channels, c.num_res_blocks, c.res_scale),
        ModelConfig::Fcnn(c) => (c.channels, c.num_res_blocks, c.res_scale),
    }
}

/// Built-in defaults for one model and training procedure.
pub fn train_defaults(arch: Architecture, mode: TrainMode) -> KeyValues {
    let t = TrainConfig::defaults(mode);
    let (channels, blocks, scale) = model_default(arch);
    let mut kv = KeyValues::default();
    kv.set("model", arch);
    kv.set("mode", mode);
    kv.set("data", "");
    kv.set("lr", format!("{:e}", t.lr));
    kv.set("batch", t.batch);
    kv.set("seq_len", t.seq_len);
    kv.set("patch", format!("{}x{}", t.patch.0, t.patch.1));
    kv.set("steps", t.total_steps);
    kv.set("frames", "none");
    kv.set("log_every", t.log_every);
    kv.set("workers", t.workers);
    kv.set("motion_threshold", "auto");
    kv.set("low_motion_accept", t.low_motion_accept_prob);
    kv.set("dataset_size", t.fcnn_dataset_size);
    kv.set("cache", "");
    kv.set("plateau_patience", t.plateau_patience);
    kv.set("plateau_factor", t.plateau_factor);
    kv.set("channels", channels);
    kv.set("res_blocks", blocks);
    kv.set("res_scale", scale);
    kv.set("seed", 0);
    kv.set("out", "run");
    kv.set("resume", "");
    kv
}

/// Resolves model and mode first, since the other defaults depend on them.
pub fn resolve_train(file: &KeyValues, flags: &KeyValues) -> Result<KeyValues, CliError> {
    let pick = |key: &str| flags.get(key).or_else(|| file.get(key));
    let arch: Architecture = pick("model").unwrap_or("crnn").parse()?;
    let mode = match (arch, pick("mode")) {
        (Architecture::Fcnn, None | Some("fcnn")) => TrainMode::Fcnn,
        (Architecture::Fcnn, Some(m)) => {
            return Err(CliError::Usage(format!(
                "--mode {m} applies to recurrent models; the FCNN has no recurrent state and trains feedforward"
            )))
        }
        (_, None) => TrainMode::Stateful,
        (_, Some("fcnn")) => return Err(CliError::Usage(format!("mode fcnn cannot train a {arch} model"))),
        (_, Some(m)) => m.parse()?,
    };
    let mut kv = train_defaults(arch, mode);
    let seed = match pick("seed") {
        Some(s) => s.to_string(),
        None => env_seed()?.to_string(),
    };
    for (k, v) in file.iter().chain(flags.iter()) {
        kv.set(k, v);
    }
    kv.set("model", arch);
    kv.set("mode", mode);
    kv.set("seed", seed);
    Ok(kv)
}

fn optional<'a>(kv: &'a KeyValues, key: &str, none: &str) -> Option<&'a str> {
    kv.get(key).filter(|v| !v.is_empty() && *v != none)
}

fn value<T: std::str::FromStr>(kv: &KeyValues, key: &str) -> Result<T, CliError> {
    let v = kv.get(key).unwrap_or_default();
    v.parse()
        .map_err(|_| CliError::Usage(format!("invalid value '{v}' for {key}")))
}

pub struct TrainPlan {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: Vec<PathBuf>,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
}

pub fn train_plan(kv: &KeyValues) -> Result<TrainPlan, CliError> {
    let mode: TrainMode = value(kv, "mode")?;
    let seq_len: usize = value(kv, "seq_len")?;
    let mut model = KeyValues::default();
    model.set("arch", kv.get("model").unwrap_or_default());
    model.set("channels", kv.get("channels").unwrap_or_default());
    model.set("num_res_blocks", kv.get("res_blocks").unwrap_or_default());
    model.set("res_scale", kv.get("res_scale").unwrap_or_default());
    if mode == TrainMode::Fcnn {
        if seq_len < 2 {
            return Err(CliError::Usage(
                "FCNN seq_len must be at least 2 (inputs plus target)".into(),
            ));
        }
        model.set("input_frames", seq_len - 1);
    }
    let model = ModelConfig::from_key_values(&model)?;
    let out = PathBuf::from(kv.get("out").unwrap_or("run"));
    let train = TrainConfig {
        mode,
        lr: value(kv, "lr")?,
        batch: value(kv, "batch")?,
        trunc: if mode == TrainMode::Stateful {
            1
        } else {
            seq_len
        },
        seq_len,
        patch: parse_dims(kv.get("patch").unwrap_or_default()).map_err(CliError::Usage)?,
        total_steps: value(kv, "steps")?,
        max_frames: optional(kv, "frames", "none")
            .map(|v| {
                v.parse()
                    .map_err(|_| CliError::Usage(format!("invalid value '{v}' for frames")))
            })
            .transpose()?,
        seed: value(kv, "seed")?,
        log_every: value(kv, "log_every")?,
        workers: value(kv, "workers")?,
        motion_threshold: optional(kv, "motion_threshold", "auto")
            .map(|v| {
                v.parse().map_err(|_| {
                    CliError::Usage(format!("invalid value '{v}' for motion_threshold"))
                })
            })
            .transpose()?,
        low_motion_accept_prob: value(kv, "low_motion_accept")?,
        fcnn_dataset_size: value(kv, "dataset_size")?,
        fcnn_cache: optional(kv, "cache", "none").map(PathBuf::from),
        plateau_patience: value(kv, "plateau_patience")?,
        plateau_factor: value(kv, "plateau_factor")?,
        run_dir: Some(out.clone()),
    };
    train.validate()?;
    let data = optional(kv, "data", "none")
        .map(|v| v.split(',').map(|p| PathBuf::from(p.trim())).collect())
        .unwrap_or_default();
    Ok(TrainPlan {
        model,
        train,
        data,
        out,
        resume: optional(kv, "resume", "none").map(PathBuf::from),
    })
}

/// Hex SHA-256 of the resolved settings in their canonical text form.
pub fn config_hash(kv: &KeyValues) -> String {
    let digest = Sha256::digest(kv.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(pairs: &[(&str, &str)]) -> KeyValues {
        let mut kv = KeyValues::default();
        for (k, v) in pairs {
            kv.set(k, v);
        }
        kv
    }

    #[test]
    fn flags_beat_file_beats_defaults() {
        let file = kv(&[("lr", "3e-4"), ("batch", "2"), ("seed", "5")]);
        let flags = kv(&[("batch", "7")]);
        let r = resolve_train(&file, &flags).unwrap();
        assert_eq!(r.get("lr"), Some("3e-4"));
        assert_eq!(r.get("batch"), Some("7"));
        assert_eq!(r.get("seed"), Some("5"));
        assert_eq!(r.get("seq_len"), Some("96"));
    }

    #[test]
    fn defaults_follow_model_and_mode() {
        let r = resolve_train(&KeyValues::default(), &kv(&[("model", "fcnn")])).unwrap();
        assert_eq!(r.get("lr"), Some("1e-4"));
        assert_eq!(r.get("patch"), Some("48x48"));
        let r = resolve_train(&kv(&[("mode", "stateless")]), &KeyValues::default()).unwrap();
        assert_eq!(r.get("lr"), Some("1e-5"));
        assert_eq!(r.get("seq_len"), Some("8"));
    }

    #[test]
    fn fcnn_rejects_recurrent_modes() {
        let err = resolve_train(
            &KeyValues::default(),
            &kv(&[("model", "fcnn"), ("mode", "stateful")]),
        );
        assert!(matches!(err, Err(CliError::Usage(_))));
    }

    #[test]
    fn plan_derives_truncation() {
        let r = resolve_train(
            &KeyValues::default(),
            &kv(&[("mode", "stateless"), ("seq_len", "5")]),
        )
        .unwrap();
        let plan = train_plan(&r).unwrap();
        assert_eq!(plan.train.trunc, 5);
        let r = resolve_train(
            &KeyValues::default(),
            &kv(&[("model", "fcnn"), ("seq_len", "4")]),
        )
        .unwrap();
        let ModelConfig::Fcnn(f) = train_plan(&r).unwrap().model else {
            panic!()
        };
        assert_eq!(f.input_frames, 3);
    }

    #[test]
    fn dims_and_velocity() {
        assert_eq!(parse_dims("64x48"), Ok((64, 48)));
        assert!(parse_dims("64").is_err());
        assert!(parse_dims("0x4").is_err());
        assert_eq!(parse_velocity("-1,2"), Ok((-1, 2)));
        assert!(parse_velocity("1").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = kv(&[("lr", "1e-5")]);
        let b = kv(&[("lr", "1e-4")]);
        assert_eq!(config_hash(&a).len(), 64);
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a), config_hash(&a.clone()));
    }
}
