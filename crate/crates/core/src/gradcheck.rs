//! Finite-difference audit of the analytic gradients.
//!
//! Each case builds a scalar loss `mean((f(inputs) - r)^2)` against a fixed
//! random `r`, backpropagates once, then compares every input element's
//! gradient with a central difference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{
    clstm_step, crnn_step, residual_block, ClstmCellParams, ConvParams, CrnnCellParams, GatePaths,
    ResBlockParams,
};
use crate::ops::{self, Activation, BinaryOp};
use crate::tensor::{Shape, Tensor};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Floor on the relative-error denominator so vanishing gradients are
/// compared in absolute terms.
pub const DENOMINATOR_FLOOR: f64 = 1e-6;

/// Inputs closer than this to the ReLU kink are pushed away before checking.
const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub max_rel_err: f64,
    pub elements: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub seed: u64,
    pub cases: Vec<CaseResult>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR)
}

/// Compares analytic and central-difference gradients of
/// `mean((f(inputs) - r)^2)` with respect to every element of every input.
pub fn check_function(
    name: &str,
    inputs: &[Tensor],
    rng: &mut ChaCha8Rng,
    f: impl Fn(&[Tensor]) -> Result<Tensor>,
) -> Result<CaseResult> {
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|t| Tensor::param(t.shape(), t.to_vec()))
        .collect();
    let out = f(&leaves)?;
    let reference = random_tensor(rng, out.shape(), 1.0);
    let loss = |xs: &[Tensor]| -> Result<Tensor> { ops::mse_loss(&f(xs)?, &reference) };
    loss(&leaves)?.backward()?;
    let plain: Vec<Tensor> = inputs
        .iter()
        .map(|t| Tensor::new(t.shape(), t.to_vec()))
        .collect();
    let mut max_rel_err = 0.0f64;
    let mut elements = 0;
    for (i, leaf) in leaves.iter().enumerate() {
        let grad = leaf
            .grad()
            .ok_or_else(|| Error::Contract(format!("{name}: input {i} received no gradient")))?;
        for j in 0..leaf.numel() {
            let probe = |delta: f64| -> Result<f64> {
                let mut xs = plain.clone();
                let mut v = plain[i].to_vec();
                v[j] += delta;
                xs[i] = Tensor::new(plain[i].shape(), v);
                Ok(loss(&xs)?.item())
            };
            let numeric = (probe(STEP)? - probe(-STEP)?) / (2.0 * STEP);
            max_rel_err = max_rel_err.max(relative_error(grad[j], numeric));
            elements += 1;
        }
    }
    Ok(CaseResult {
        name: name.to_string(),
        max_rel_err,
        elements,
    })
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
}

fn away_from_kink(t: Tensor) -> Tensor {
    let v = t
        .data()
        .iter()
        .map(|&x| {
            if x.abs() < KINK_MARGIN {
                x.signum() * KINK_MARGIN + x
            } else {
                x
            }
        })
        .collect();
    Tensor::new(t.shape(), v)
}

fn conv_from(ts: &[Tensor]) -> ConvParams {
    ConvParams {
        weight: ts[0].clone(),
        bias: ts[1].clone(),
    }
}

fn gate_from(ts: &[Tensor]) -> GatePaths {
    GatePaths {
        input: conv_from(&ts[0..2]),
        hidden: conv_from(&ts[2..4]),
    }
}

fn conv_tensors(rng: &mut ChaCha8Rng, cin: usize, cout: usize) -> Vec<Tensor> {
    let bound = (6.0 / (9 * cin) as f64).sqrt();
    vec![
        random_tensor(rng, [cout, cin, 3, 3], bound),
        random_tensor(rng, [1, cout, 1, 1], 0.1),
    ]
}

/// Every differentiable op, both recurrent cells and the residual block on
/// tiny random shapes.
pub fn gradcheck_all(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let (n, cin, ch, h, w) = (2, 2, 3, 5, 6);
    let mut cases = Vec::new();

    let x = random_tensor(rng, [n, cin, h, w], 1.0);
    let mut conv = vec![x.clone()];
    conv.extend(conv_tensors(rng, cin, ch));
    cases.push(check_function("conv2d", &conv, rng, |t| {
        ops::conv2d(&t[0], &t[1], &t[2])
    })?);

    for kind in [
        Activation::Relu,
        Activation::Tanh,
        Activation::Sigmoid,
        Activation::Linear,
    ] {
        let input = random_tensor(rng, [n, ch, 4, 4], 2.0);
        let input = if kind == Activation::Relu {
            away_from_kink(input)
        } else {
            input
        };
        let name = format!("activation:{kind:?}").to_lowercase();
        cases.push(check_function(&name, &[input], rng, move |t| {
            Ok(ops::activation(&t[0], kind))
        })?);
    }
    for kind in [BinaryOp::Add, BinaryOp::Hadamard] {
        let pair = [
            random_tensor(rng, [n, ch, 4, 4], 1.0),
            random_tensor(rng, [n, ch, 4, 4], 1.0),
        ];
        let name = format!("binary:{kind:?}").to_lowercase();
        cases.push(check_function(&name, &pair, rng, move |t| {
            ops::binary_op(&t[0], &t[1], kind)
        })?);
    }
    let s = random_tensor(rng, [n, ch, 4, 4], 1.0);
    cases.push(check_function("scale", &[s], rng, |t| {
        Ok(ops::scale(&t[0], -0.7))
    })?);
    let pair = [
        random_tensor(rng, [n, ch, 4, 4], 1.0),
        random_tensor(rng, [n, ch, 4, 4], 1.0),
    ];
    cases.push(check_function("mse_loss", &pair[..1], rng, |t| {
        ops::mse_loss(&t[0], &pair[1])
    })?);

    let mut crnn = vec![
        random_tensor(rng, [n, cin, h, w], 1.0),
        random_tensor(rng, [n, ch, h, w], 1.0),
    ];
    crnn.extend(conv_tensors(rng, cin, ch));
    crnn.extend(conv_tensors(rng, ch, ch));
    cases.push(check_function("crnn_cell", &crnn, rng, |t| {
        crnn_step(
            &t[0],
            &t[1],
            &CrnnCellParams {
                paths: gate_from(&t[2..6]),
            },
        )
    })?);

    let mut clstm = vec![
        random_tensor(rng, [n, cin, h, w], 1.0),
        random_tensor(rng, [n, ch, h, w], 1.0),
        random_tensor(rng, [n, ch, h, w], 1.0),
    ];
    for _ in 0..4 {
        clstm.extend(conv_tensors(rng, cin, ch));
        clstm.extend(conv_tensors(rng, ch, ch));
    }
    let cell = |t: &[Tensor]| ClstmCellParams {
        input_gate: gate_from(&t[3..7]),
        forget_gate: gate_from(&t[7..11]),
        output_gate: gate_from(&t[11..15]),
        candidate: gate_from(&t[15..19]),
    };
    // The output gate never reaches c, so both outputs feed one loss.
    cases.push(check_function("clstm_cell", &clstm, rng, |t| {
        let (h, c) = clstm_step(&t[0], &t[1], &t[2], &cell(t))?;
        ops::add(&h, &ops::scale(&c, 0.5))
    })?);

    let mut res = vec![random_tensor(rng, [n, ch, h, w], 1.0)];
    res.extend(conv_tensors(rng, ch, ch));
    res.extend(conv_tensors(rng, ch, ch));
    cases.push(check_function("residual_block", &res, rng, |t| {
        residual_block(
            &t[0],
            &ResBlockParams {
                conv1: conv_from(&t[1..3]),
                conv2: conv_from(&t[3..5]),
                scale: 0.1,
            },
        )
    })?);

    Ok(GradCheckReport { seed, cases })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn audit_passes_for_one_seed() {
        let report = gradcheck_all(3).unwrap();
        assert_eq!(report.cases.len(), 12);
        assert!(report.passed(), "{:?}", report.cases);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::new([1, 1, 2, 2], vec![0.3, -0.2, 0.5, 0.9]);
        // The loss ignores the second input, so its gradient is missing.
        let err = check_function("missing", &[x.clone(), x], &mut rng, |t| {
            Ok(ops::scale(&t[0], 2.0))
        });
        assert!(err.is_err());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.0001) - 1e-4 / 1.0001).abs() < 1e-12);
        assert_eq!(relative_error(1e-9, 0.0), 1e-3);
    }
}
