//! Binary checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        8 bytes   "PLABCKPT"
//! version      u32       1
//! arch         u8        0 = crnn, 1 = clstm, 2 = fcnn
//! config       u32 length + UTF-8 key=value text
//! tensors      u32 count, then per tensor:
//!                u16 name length + UTF-8 name, 4 × u32 dims
//! optimizer    u8 flag; if 1:
//!                u64 step, f64 lr,
//!                u8 plateau flag; if 1: f64 best (NaN = none), u64 since,
//!                                       u64 patience, f64 factor
//! payload      f64 values of every tensor in directory order,
//!              then (if optimizer) all first moments, then all second moments
//! ```
//!
//! Loading validates the directory against the layout implied by the config,
//! so a file can never produce parameters of the wrong shape.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::models::{Architecture, ModelConfig, ModelParams};
use crate::optim::{AdamState, PlateauSchedule};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PLABCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct OptimizerSnapshot {
    pub adam: AdamState,
    pub plateau: Option<PlateauSchedule>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: Option<OptimizerSnapshot>,
}

impl Checkpoint {
    pub fn new(params: ModelParams) -> Self {
        Checkpoint {
            params,
            optimizer: None,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let p = &self.params;
        let mut out = Vec::with_capacity(64 + 8 * p.param_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(p.architecture().code());
        let config = p.config().to_key_values().to_string();
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        out.extend_from_slice(&(p.len() as u32).to_le_bytes());
        for (name, t) in p.iter() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                out.extend_from_slice(&opt.adam.step.to_le_bytes());
                out.extend_from_slice(&opt.adam.lr.to_le_bytes());
                match &opt.plateau {
                    None => out.push(0),
                    Some(s) => {
                        out.push(1);
                        out.extend_from_slice(&s.best_loss.unwrap_or(f64::NAN).to_le_bytes());
                        out.extend_from_slice(&s.steps_since_improvement.to_le_bytes());
                        out.extend_from_slice(&s.patience.to_le_bytes());
                        out.extend_from_slice(&s.factor.to_le_bytes());
                    }
                }
            }
        }
        let mut put = |values: &[f64]| {
            values
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes()))
        };
        for (_, t) in p.iter() {
            put(t.data());
        }
        if let Some(opt) = &self.optimizer {
            opt.adam.m.iter().for_each(|m| put(m));
            opt.adam.v.iter().for_each(|v| put(v));
        }
        out
    }

    /// Parses a checkpoint from untrusted bytes.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(bad("bad magic bytes"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Unsupported {
                format: "checkpoint",
                detail: format!("version {version}"),
            });
        }
        let arch =
            Architecture::from_code(r.u8()?).ok_or_else(|| bad("unknown architecture code"))?;
        let config_len = r.u32()? as usize;
        let config_text =
            std::str::from_utf8(r.take(config_len)?).map_err(|_| bad("config is not UTF-8"))?;
        let config = ModelConfig::from_key_values(&KeyValues::parse(config_text)?)?;
        if config.architecture() != arch {
            return Err(bad("architecture tag disagrees with config"));
        }
        let layout = config.layout();
        let count = r.u32()? as usize;
        if count != layout.len() {
            return Err(Error::shape(
                "checkpoint",
                format!(
                    "file lists {count} tensors, config implies {}",
                    layout.len()
                ),
            ));
        }
        for (name, shape) in &layout {
            let len = r.u16()? as usize;
            let got =
                std::str::from_utf8(r.take(len)?).map_err(|_| bad("tensor name is not UTF-8"))?;
            let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|d| d as usize);
            if got != name || dims != *shape {
                return Err(Error::shape(
                    "checkpoint",
                    format!("expected {name} {shape:?}, file has {got} {dims:?}"),
                ));
            }
        }
        let opt_header = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let lr = r.f64()?;
                let plateau = match r.u8()? {
                    0 => None,
                    1 => {
                        let best = r.f64()?;
                        Some(PlateauSchedule {
                            best_loss: (!best.is_nan()).then_some(best),
                            steps_since_improvement: r.u64()?,
                            patience: r.u64()?,
                            factor: r.f64()?,
                        })
                    }
                    _ => return Err(bad("invalid plateau flag")),
                };
                Some((step, lr, plateau))
            }
            _ => return Err(bad("invalid optimizer flag")),
        };
        let mut tensors = IndexMap::with_capacity(layout.len());
        for (name, shape) in &layout {
            let values = r.f64s(shape.iter().product())?;
            tensors.insert(name.clone(), Tensor::param(*shape, values));
        }
        let params = ModelParams::from_tensors(config, tensors)?;
        let optimizer = match opt_header {
            None => None,
            Some((step, lr, plateau)) => {
                let mut adam = AdamState::new(&params, lr);
                adam.step = step;
                for m in adam.m.iter_mut() {
                    *m = r.f64s(m.len())?;
                }
                for v in adam.v.iter_mut() {
                    *v = r.f64s(v.len())?;
                }
                Some(OptimizerSnapshot { adam, plateau })
            }
        };
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Checkpoint { params, optimizer })
    }
}

fn bad(detail: &str) -> Error {
    Error::format("checkpoint", detail)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| bad("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("take returns N bytes"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        self.array().map(u16::from_le_bytes)
    }

    fn u32(&mut self) -> Result<u32> {
        self.array().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Result<u64> {
        self.array().map(u64::from_le_bytes)
    }

    fn f64(&mut self) -> Result<f64> {
        self.array().map(f64::from_le_bytes)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| bad("payload size overflow"))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunks of 8")))
            .collect())
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("partial");
    fs::write(&tmp, checkpoint.encode()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes)
}

/// Loads a checkpoint and checks that it holds the expected architecture.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: Architecture) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    let found = ckpt.params.architecture();
    if found != expected {
        return Err(Error::ArchMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        });
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init_params, CellKind, FcnnConfig, RecurrentConfig};

    fn small(arch: Architecture) -> ModelConfig {
        match arch {
            Architecture::Fcnn => ModelConfig::Fcnn(FcnnConfig {
                channels: 3,
                num_res_blocks: 1,
                ..FcnnConfig::default()
            }),
            a => ModelConfig::Recurrent(RecurrentConfig {
                channels: 2,
                num_res_blocks: 1,
                ..RecurrentConfig::new(if a == Architecture::Crnn {
                    CellKind::Crnn
                } else {
                    CellKind::Clstm
                })
            }),
        }
    }

    fn assert_same(a: &ModelParams, b: &ModelParams) {
        assert_eq!(a.config(), b.config());
        for ((na, ta), (nb, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(ta), bits(tb));
        }
    }

    #[test]
    fn round_trip_with_optimizer() {
        let params = init_params(&small(Architecture::Clstm), 3).unwrap();
        let mut adam = AdamState::new(&params, 1e-5);
        adam.step = 17;
        adam.m[0][0] = 0.125;
        adam.v[2][1] = 3.5e-9;
        let plateau = PlateauSchedule {
            best_loss: Some(0.01),
            steps_since_improvement: 12,
            ..Default::default()
        };
        let ckpt = Checkpoint {
            params,
            optimizer: Some(OptimizerSnapshot {
                adam: adam.clone(),
                plateau: Some(plateau.clone()),
            }),
        };
        let back = Checkpoint::decode(&ckpt.encode()).unwrap();
        assert_same(&ckpt.params, &back.params);
        let opt = back.optimizer.unwrap();
        assert_eq!(opt.adam, adam);
        assert_eq!(opt.plateau, Some(plateau));
    }

    #[test]
    fn file_round_trip_and_tag_guard() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("crnn.ckpt");
        let params = init_params(&small(Architecture::Crnn), 1).unwrap();
        save_checkpoint(&Checkpoint::new(params.clone()), &path).unwrap();
        assert_same(&load_checkpoint(&path).unwrap().params, &params);
        assert!(matches!(
            load_checkpoint_for(&path, Architecture::Clstm),
            Err(Error::ArchMismatch { .. })
        ));
        assert!(matches!(
            load_checkpoint(dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn rejects_corruption() {
        let bytes = Checkpoint::new(init_params(&small(Architecture::Fcnn), 2).unwrap()).encode();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::decode(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Checkpoint::decode(&magic).is_err());
        let mut arch = bytes.clone();
        arch[12] = 0;
        assert!(Checkpoint::decode(&arch).is_err());
        // first dim of the first tensor
        let config_len = u32::from_le_bytes(bytes[13..17].try_into().unwrap()) as usize;
        let name_len_at = 17 + config_len + 4;
        let name_len =
            u16::from_le_bytes(bytes[name_len_at..name_len_at + 2].try_into().unwrap()) as usize;
        let mut dims = bytes.clone();
        dims[name_len_at + 2 + name_len] ^= 1;
        assert!(matches!(
            Checkpoint::decode(&dims),
            Err(Error::Shape { .. })
        ));
    }
}
