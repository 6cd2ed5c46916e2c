//! The two-layer convolutional recurrent predictor (CRNN or CLSTM cells) and
//! the stacked-frame residual FCNN predictor.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::layers::{
    clstm_step, crnn_step, residual_block, ClstmCellParams, ConvParams, CrnnCellParams, GatePaths,
    ResBlockParams,
};
use crate::ops;
use crate::tensor::{Shape, Tensor};

/// Upper bound on channel counts accepted from configs and checkpoints.
pub const MAX_CHANNELS: usize = 4096;
/// Upper bound on residual-stack depth accepted from configs and checkpoints.
pub const MAX_RES_BLOCKS: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellKind {
    Crnn,
    Clstm,
}

/// Architecture tag stored in checkpoints and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Architecture {
    Crnn,
    Clstm,
    Fcnn,
}

impl Architecture {
    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Crnn => "crnn",
            Architecture::Clstm => "clstm",
            Architecture::Fcnn => "fcnn",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Architecture::Crnn => 0,
            Architecture::Clstm => 1,
            Architecture::Fcnn => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Architecture::Crnn),
            1 => Some(Architecture::Clstm),
            2 => Some(Architecture::Fcnn),
            _ => None,
        }
    }

    pub fn is_recurrent(self) -> bool {
        self != Architecture::Fcnn
    }

    /// Paper-default configuration of this architecture.
    pub fn default_config(self) -> ModelConfig {
        match self {
            Architecture::Crnn => ModelConfig::Recurrent(RecurrentConfig::new(CellKind::Crnn)),
            Architecture::Clstm => ModelConfig::Recurrent(RecurrentConfig::new(CellKind::Clstm)),
            Architecture::Fcnn => ModelConfig::Fcnn(FcnnConfig::default()),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "crnn" => Ok(Architecture::Crnn),
            "clstm" => Ok(Architecture::Clstm),
            "fcnn" => Ok(Architecture::Fcnn),
            other => Err(Error::Config(format!(
                "unknown model '{other}' (expected crnn, clstm or fcnn)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentConfig {
    pub cell: CellKind,
    pub channels: usize,
    pub num_res_blocks: usize,
    pub res_scale: f64,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl RecurrentConfig {
    pub fn new(cell: CellKind) -> Self {
        RecurrentConfig {
            cell,
            channels: 64,
            num_res_blocks: 8,
            res_scale: 1.0,
            in_channels: 1,
            out_channels: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.channels > MAX_CHANNELS {
            return Err(Error::Config(format!(
                "recurrent channels must be in 1..={MAX_CHANNELS}"
            )));
        }
        if self.num_res_blocks > MAX_RES_BLOCKS {
            return Err(Error::Config(format!(
                "at most {MAX_RES_BLOCKS} residual blocks"
            )));
        }
        if !(self.res_scale > 0.0 && self.res_scale <= 1.0) {
            return Err(Error::Config(format!(
                "res_scale {} outside (0, 1]",
                self.res_scale
            )));
        }
        if self.in_channels != 1 || self.out_channels != 1 {
            return Err(Error::Config(
                "only single-channel (grayscale) input and output are supported".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcnnConfig {
    pub input_frames: usize,
    pub channels: usize,
    pub num_res_blocks: usize,
    pub res_scale: f64,
    pub out_channels: usize,
}

impl Default for FcnnConfig {
    fn default() -> Self {
        FcnnConfig {
            input_frames: 8,
            channels: 256,
            num_res_blocks: 32,
            res_scale: 0.1,
            out_channels: 1,
        }
    }
}

impl FcnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_frames == 0
            || self.input_frames > MAX_CHANNELS
            || self.channels == 0
            || self.channels > MAX_CHANNELS
        {
            return Err(Error::Config(format!(
                "fcnn input_frames and channels must be in 1..={MAX_CHANNELS}"
            )));
        }
        if self.num_res_blocks > MAX_RES_BLOCKS {
            return Err(Error::Config(format!(
                "at most {MAX_RES_BLOCKS} residual blocks"
            )));
        }
        if !(self.res_scale > 0.0 && self.res_scale <= 1.0) {
            return Err(Error::Config(format!(
                "res_scale {} outside (0, 1]",
                self.res_scale
            )));
        }
        if self.out_channels != 1 {
            return Err(Error::Config(
                "only single-channel output is supported".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelConfig {
    Recurrent(RecurrentConfig),
    Fcnn(FcnnConfig),
}

impl ModelConfig {
    pub fn architecture(&self) -> Architecture {
        match self {
            ModelConfig::Recurrent(c) if c.cell == CellKind::Crnn => Architecture::Crnn,
            ModelConfig::Recurrent(_) => Architecture::Clstm,
            ModelConfig::Fcnn(_) => Architecture::Fcnn,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Recurrent(c) => c.validate(),
            ModelConfig::Fcnn(c) => c.validate(),
        }
    }

    /// Ordered `(name, shape)` list of every learnable tensor.
    pub fn layout(&self) -> Vec<(String, Shape)> {
        let mut out = Vec::new();
        let mut conv = |name: &str, cin: usize, cout: usize| {
            out.push((format!("{name}.weight"), [cout, cin, 3, 3]));
            out.push((format!("{name}.bias"), [1, cout, 1, 1]));
        };
        match self {
            ModelConfig::Recurrent(c) => {
                let gates: &[&str] = match c.cell {
                    CellKind::Crnn => &["cell"],
                    CellKind::Clstm => &["input", "forget", "output", "candidate"],
                };
                for (layer, cin) in [("rec1", c.in_channels), ("rec2", c.channels)] {
                    for g in gates {
                        conv(&format!("{layer}.{g}.x"), cin, c.channels);
                        conv(&format!("{layer}.{g}.h"), c.channels, c.channels);
                    }
                }
                for k in 0..c.num_res_blocks {
                    conv(&format!("res{k}.conv1"), c.channels, c.channels);
                    conv(&format!("res{k}.conv2"), c.channels, c.channels);
                }
                conv("out", c.channels, c.out_channels);
            }
            ModelConfig::Fcnn(c) => {
                conv("head", c.input_frames, c.channels);
                for k in 0..c.num_res_blocks {
                    conv(&format!("res{k}.conv1"), c.channels, c.channels);
                    conv(&format!("res{k}.conv2"), c.channels, c.channels);
                }
                conv("body_end", c.channels, c.channels);
                conv("tail", c.channels, c.out_channels);
            }
        }
        out
    }

    /// Closed-form learnable scalar count, without allocating.
    pub fn param_count(&self) -> usize {
        self.layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("arch", self.architecture().as_str());
        match self {
            ModelConfig::Recurrent(c) => {
                kv.set("channels", c.channels);
                kv.set("num_res_blocks", c.num_res_blocks);
                kv.set("res_scale", c.res_scale);
                kv.set("in_channels", c.in_channels);
                kv.set("out_channels", c.out_channels);
            }
            ModelConfig::Fcnn(c) => {
                kv.set("input_frames", c.input_frames);
                kv.set("channels", c.channels);
                kv.set("num_res_blocks", c.num_res_blocks);
                kv.set("res_scale", c.res_scale);
                kv.set("out_channels", c.out_channels);
            }
        }
        kv
    }

    /// Inverse of [`ModelConfig::to_key_values`]; missing keys take defaults.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let arch: Architecture = kv
            .get("arch")
            .ok_or_else(|| Error::Config("model config lacks 'arch'".into()))?
            .parse()?;
        let cfg = match arch.default_config() {
            ModelConfig::Recurrent(mut c) => {
                c.channels = kv.parse_or("channels", c.channels)?;
                c.num_res_blocks = kv.parse_or("num_res_blocks", c.num_res_blocks)?;
                c.res_scale = kv.parse_or("res_scale", c.res_scale)?;
                c.in_channels = kv.parse_or("in_channels", c.in_channels)?;
                c.out_channels = kv.parse_or("out_channels", c.out_channels)?;
                ModelConfig::Recurrent(c)
            }
            ModelConfig::Fcnn(mut c) => {
                c.input_frames = kv.parse_or("input_frames", c.input_frames)?;
                c.channels = kv.parse_or("channels", c.channels)?;
                c.num_res_blocks = kv.parse_or("num_res_blocks", c.num_res_blocks)?;
                c.res_scale = kv.parse_or("res_scale", c.res_scale)?;
                c.out_channels = kv.parse_or("out_channels", c.out_channels)?;
                ModelConfig::Fcnn(c)
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Named learnable tensors of one model plus the configuration that shaped them.
#[derive(Debug, Clone)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: IndexMap<String, Tensor>,
}

impl ModelParams {
    /// Assembles parameters, checking names and shapes against the config.
    pub fn from_tensors(config: ModelConfig, tensors: IndexMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != tensors.len() {
            return Err(Error::shape(
                "model params",
                format!("expected {} tensors, got {}", layout.len(), tensors.len()),
            ));
        }
        for ((name, shape), (got_name, t)) in layout.iter().zip(&tensors) {
            if name != got_name || *shape != t.shape() {
                return Err(Error::shape(
                    "model params",
                    format!("expected {name} {shape:?}, got {got_name} {:?}", t.shape()),
                ));
            }
        }
        Ok(ModelParams { config, tensors })
    }

    /// Every tensor zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let tensors = config
            .layout()
            .into_iter()
            .map(|(name, shape)| (name, Tensor::zeros(shape).into_param()))
            .collect();
        Self::from_tensors(config, tensors)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn architecture(&self) -> Architecture {
        self.config.architecture()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Replaces the value of every tensor, in layout order, with fresh leaves.
    pub(crate) fn replace_values(&mut self, values: Vec<Vec<f64>>) {
        assert_eq!(values.len(), self.tensors.len());
        for (t, v) in self.tensors.values_mut().zip(values) {
            *t = Tensor::param(t.shape(), v);
        }
    }

    /// Copy whose tensors carry no gradient, for inference.
    pub fn frozen(&self) -> ModelParams {
        ModelParams {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.detach()))
                .collect(),
        }
    }

    /// Sum of element counts of all learnable tensors.
    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&self) {
        self.tensors.values().for_each(Tensor::zero_grad);
    }

    fn conv(&self, name: &str) -> ConvParams {
        let get = |suffix: &str| {
            self.tensors
                .get(&format!("{name}.{suffix}"))
                .unwrap_or_else(|| panic!("layout guarantees {name}.{suffix}"))
                .clone()
        };
        ConvParams {
            weight: get("weight"),
            bias: get("bias"),
        }
    }

    fn paths(&self, layer: &str, gate: &str) -> GatePaths {
        GatePaths {
            input: self.conv(&format!("{layer}.{gate}.x")),
            hidden: self.conv(&format!("{layer}.{gate}.h")),
        }
    }
}

/// He-uniform fan-in initialization of conv weights, zero biases.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = config
        .layout()
        .into_iter()
        .map(|(name, shape)| {
            let n = shape.iter().product();
            let data = if name.ends_with(".weight") {
                let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                let bound = (6.0 / fan_in).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            } else {
                vec![0.0; n]
            };
            (name, Tensor::param(shape, data))
        })
        .collect();
    ModelParams::from_tensors(config.clone(), tensors)
}

pub fn param_count(params: &ModelParams) -> usize {
    params.param_count()
}

#[allow(clippy::large_enum_variant)]
enum Cell {
    Crnn(CrnnCellParams),
    Clstm(ClstmCellParams),
}

/// Structured view of recurrent-model parameters.
struct RecurrentNet {
    layers: [Cell; 2],
    res: Vec<ResBlockParams>,
    out: ConvParams,
}

impl RecurrentNet {
    fn new(params: &ModelParams, cfg: &RecurrentConfig) -> Self {
        let cell = |layer: &str| match cfg.cell {
            CellKind::Crnn => Cell::Crnn(CrnnCellParams {
                paths: params.paths(layer, "cell"),
            }),
            CellKind::Clstm => Cell::Clstm(ClstmCellParams {
                input_gate: params.paths(layer, "input"),
                forget_gate: params.paths(layer, "forget"),
                output_gate: params.paths(layer, "output"),
                candidate: params.paths(layer, "candidate"),
            }),
        };
        RecurrentNet {
            layers: [cell("rec1"), cell("rec2")],
            res: res_blocks(params, cfg.num_res_blocks, cfg.res_scale),
            out: params.conv("out"),
        }
    }
}

fn res_blocks(params: &ModelParams, count: usize, scale: f64) -> Vec<ResBlockParams> {
    (0..count)
        .map(|k| ResBlockParams {
            conv1: params.conv(&format!("res{k}.conv1")),
            conv2: params.conv(&format!("res{k}.conv2")),
            scale,
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct LayerState {
    pub h: Tensor,
    /// Cell state, present only for CLSTM layers.
    pub c: Option<Tensor>,
}

/// Hidden (and cell) tensors of both recurrent layers.
#[derive(Debug, Clone)]
pub struct RecurrentState {
    pub layers: Vec<LayerState>,
}

impl RecurrentState {
    pub fn zeros(cfg: &RecurrentConfig, batch: usize, height: usize, width: usize) -> Self {
        let shape = [batch, cfg.channels, height, width];
        let layer = || LayerState {
            h: Tensor::zeros(shape),
            c: (cfg.cell == CellKind::Clstm).then(|| Tensor::zeros(shape)),
        };
        RecurrentState {
            layers: vec![layer(), layer()],
        }
    }

    /// Same values with no gradient history.
    pub fn detach(&self) -> Self {
        RecurrentState {
            layers: self
                .layers
                .iter()
                .map(|l| LayerState {
                    h: l.h.detach(),
                    c: l.c.as_ref().map(Tensor::detach),
                })
                .collect(),
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.layers
            .iter()
            .any(|l| l.h.requires_grad() || l.c.as_ref().is_some_and(Tensor::requires_grad))
    }
}

fn recurrent_config(params: &ModelParams) -> Result<&RecurrentConfig> {
    match params.config() {
        ModelConfig::Recurrent(c) => Ok(c),
        ModelConfig::Fcnn(_) => Err(Error::Contract(
            "recurrent step called with FCNN parameters".into(),
        )),
    }
}

/// One time step of the recurrent predictor: both cells update, the second
/// cell's hidden state runs through the residual stack and the linear output
/// convolution.
pub fn recurrent_step(
    frame: &Tensor,
    state: &RecurrentState,
    params: &ModelParams,
) -> Result<(Tensor, RecurrentState)> {
    let cfg = recurrent_config(params)?;
    let [n, c, h, w] = frame.shape();
    if c != cfg.in_channels {
        return Err(Error::shape(
            "recurrent_step",
            format!("frame has {c} channels, model expects {}", cfg.in_channels),
        ));
    }
    if state.layers.len() != 2 {
        return Err(Error::shape(
            "recurrent_step",
            format!("state has {} layers, expected 2", state.layers.len()),
        ));
    }
    let expected = [n, cfg.channels, h, w];
    for layer in &state.layers {
        let c_ok = match (cfg.cell, &layer.c) {
            (CellKind::Clstm, Some(c)) => c.shape() == expected,
            (CellKind::Crnn, None) => true,
            _ => false,
        };
        if layer.h.shape() != expected || !c_ok {
            return Err(Error::shape(
                "recurrent_step",
                format!(
                    "state {:?} does not match frame {:?} with {} channels",
                    layer.h.shape(),
                    frame.shape(),
                    cfg.channels
                ),
            ));
        }
    }
    let net = RecurrentNet::new(params, cfg);
    let mut input = frame.clone();
    let mut next = Vec::with_capacity(2);
    for (cell, layer) in net.layers.iter().zip(&state.layers) {
        let updated = match cell {
            Cell::Crnn(p) => LayerState {
                h: crnn_step(&input, &layer.h, p)?,
                c: None,
            },
            Cell::Clstm(p) => {
                let c_prev = layer.c.as_ref().expect("checked above");
                let (h, c) = clstm_step(&input, &layer.h, c_prev, p)?;
                LayerState { h, c: Some(c) }
            }
        };
        input = updated.h.clone();
        next.push(updated);
    }
    for block in &net.res {
        input = residual_block(&input, block)?;
    }
    let pred = net.out.forward(&input)?;
    Ok((pred, RecurrentState { layers: next }))
}

/// FCNN forward: head conv, residual stack, body-end conv, global skip from the
/// head output, tail conv, tanh.
pub fn fcnn_forward(frames: &Tensor, params: &ModelParams) -> Result<Tensor> {
    let ModelConfig::Fcnn(cfg) = params.config() else {
        return Err(Error::Contract(
            "fcnn_forward called with recurrent parameters".into(),
        ));
    };
    let k = frames.shape()[1];
    if k != cfg.input_frames {
        return Err(Error::shape(
            "fcnn_forward",
            format!("got {k} stacked frames, model expects {}", cfg.input_frames),
        ));
    }
    let head = params.conv("head").forward(frames)?;
    let mut x = head.clone();
    for block in res_blocks(params, cfg.num_res_blocks, cfg.res_scale) {
        x = residual_block(&x, &block)?;
    }
    let body = ops::add(&params.conv("body_end").forward(&x)?, &head)?;
    Ok(ops::tanh(&params.conv("tail").forward(&body)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(cell: CellKind) -> ModelConfig {
        ModelConfig::Recurrent(RecurrentConfig {
            channels: 3,
            num_res_blocks: 1,
            ..RecurrentConfig::new(cell)
        })
    }

    #[test]
    fn default_counts_match_closed_form() {
        let crnn = 37_568 + 73_856 + 8 * 73_856 + 577;
        let clstm = 150_272 + 295_424 + 8 * 73_856 + 577;
        let fcnn = (8 * 9 * 256 + 256)
            + 32 * 2 * (256 * 256 * 9 + 256)
            + (256 * 256 * 9 + 256)
            + (256 * 9 + 1);
        assert_eq!(Architecture::Crnn.default_config().param_count(), crnn);
        assert_eq!(Architecture::Clstm.default_config().param_count(), clstm);
        assert_eq!(Architecture::Fcnn.default_config().param_count(), fcnn);
        assert_eq!(crnn, 702_849);
        assert_eq!(clstm, 1_037_121);
        assert_eq!(fcnn, 38_376_193);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let cfg = tiny(CellKind::Clstm);
        let a = init_params(&cfg, 9).unwrap();
        let b = init_params(&cfg, 9).unwrap();
        let c = init_params(&cfg, 10).unwrap();
        for ((name, ta), (_, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(ta.data(), tb.data());
            if name.ends_with(".bias") {
                assert!(ta.data().iter().all(|&v| v == 0.0));
            }
        }
        assert_ne!(
            a.get("out.weight").unwrap().data(),
            c.get("out.weight").unwrap().data()
        );
    }

    #[test]
    fn he_uniform_std() {
        let cfg = Architecture::Crnn.default_config();
        let p = init_params(&cfg, 1).unwrap();
        let w = p.get("rec2.cell.h.weight").unwrap();
        assert_eq!(w.shape(), [64, 64, 3, 3]);
        let n = w.numel() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        let std = (w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let expected = (2.0 / (64.0 * 9.0f64)).sqrt();
        assert!(
            (std / expected - 1.0).abs() < 0.15,
            "std {std} vs {expected}"
        );
    }

    #[test]
    fn zero_recurrent_model_predicts_zero() {
        for cell in [CellKind::Crnn, CellKind::Clstm] {
            let cfg = tiny(cell);
            let params = ModelParams::zeros(cfg.clone()).unwrap();
            let ModelConfig::Recurrent(rc) = &cfg else {
                unreachable!()
            };
            let state = RecurrentState::zeros(rc, 2, 5, 6);
            let (pred, next) =
                recurrent_step(&Tensor::full([2, 1, 5, 6], 0.9), &state, &params).unwrap();
            assert_eq!(pred.shape(), [2, 1, 5, 6]);
            assert!(pred.data().iter().all(|&v| v == 0.0));
            assert_eq!(next.layers.len(), 2);
            assert_eq!(next.layers[0].c.is_some(), cell == CellKind::Clstm);
        }
    }

    #[test]
    fn recurrent_step_rejects_mismatched_state() {
        let cfg = tiny(CellKind::Crnn);
        let params = ModelParams::zeros(cfg.clone()).unwrap();
        let ModelConfig::Recurrent(rc) = &cfg else {
            unreachable!()
        };
        let state = RecurrentState::zeros(rc, 1, 4, 4);
        assert!(recurrent_step(&Tensor::zeros([1, 1, 5, 4]), &state, &params).is_err());
        let lstm_state = RecurrentState::zeros(
            &RecurrentConfig {
                channels: 3,
                ..RecurrentConfig::new(CellKind::Clstm)
            },
            1,
            4,
            4,
        );
        assert!(recurrent_step(&Tensor::zeros([1, 1, 4, 4]), &lstm_state, &params).is_err());
    }

    #[test]
    fn fcnn_zero_and_bounds() {
        let cfg = ModelConfig::Fcnn(FcnnConfig {
            channels: 4,
            num_res_blocks: 2,
            ..FcnnConfig::default()
        });
        let zero = ModelParams::zeros(cfg.clone()).unwrap();
        let frames = Tensor::full([2, 8, 6, 6], 0.5);
        let y = fcnn_forward(&frames, &zero).unwrap();
        assert_eq!(y.shape(), [2, 1, 6, 6]);
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(fcnn_forward(&Tensor::zeros([1, 7, 6, 6]), &zero).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let frames = Tensor::new(
            [1, 8, 6, 6],
            (0..288).map(|_| rng.random_range(-30.0..30.0)).collect(),
        );
        let y = fcnn_forward(&frames, &init_params(&cfg, 4).unwrap()).unwrap();
        assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn from_tensors_checks_layout() {
        let cfg = tiny(CellKind::Crnn);
        let mut tensors: IndexMap<String, Tensor> = cfg
            .layout()
            .into_iter()
            .map(|(n, s)| (n, Tensor::zeros(s)))
            .collect();
        assert!(ModelParams::from_tensors(cfg.clone(), tensors.clone()).is_ok());
        tensors.insert("out.bias".into(), Tensor::zeros([1, 2, 1, 1]));
        assert!(ModelParams::from_tensors(cfg, tensors).is_err());
    }

    #[test]
    fn config_key_value_round_trip() {
        for arch in [Architecture::Crnn, Architecture::Clstm, Architecture::Fcnn] {
            let cfg = arch.default_config();
            assert_eq!(
                ModelConfig::from_key_values(&cfg.to_key_values()).unwrap(),
                cfg
            );
        }
    }
}
