//! Recurrent cells and the residual block, written as pure functions of their
//! parameters and inputs.

use crate::error::{Error, Result};
use crate::ops::{self, add, conv2d, hadamard};
use crate::tensor::Tensor;

/// A 3×3 convolution's weight `(Cout, Cin, 3, 3)` and bias `(1, Cout, 1, 1)`.
#[derive(Debug, Clone)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvParams {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.weight, &self.bias)
    }

    pub fn zeros(cin: usize, cout: usize) -> Self {
        ConvParams {
            weight: Tensor::zeros([cout, cin, 3, 3]),
            bias: Tensor::zeros([1, cout, 1, 1]),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Learnable scalars in a 3×3 conv with bias.
    pub const fn count(cin: usize, cout: usize) -> usize {
        cout * cin * 9 + cout
    }
}

/// Input-path and hidden-path convolutions of one gate, each with its own bias.
#[derive(Debug, Clone)]
pub struct GatePaths {
    pub input: ConvParams,
    pub hidden: ConvParams,
}

impl GatePaths {
    fn pre_activation(&self, x: &Tensor, h_prev: &Tensor) -> Result<Tensor> {
        add(&self.input.forward(x)?, &self.hidden.forward(h_prev)?)
    }

    pub fn zeros(cin: usize, ch: usize) -> Self {
        GatePaths {
            input: ConvParams::zeros(cin, ch),
            hidden: ConvParams::zeros(ch, ch),
        }
    }

    pub const fn count(cin: usize, ch: usize) -> usize {
        ConvParams::count(cin, ch) + ConvParams::count(ch, ch)
    }
}

/// Elman-style convolutional recurrent cell.
#[derive(Debug, Clone)]
pub struct CrnnCellParams {
    pub paths: GatePaths,
}

impl CrnnCellParams {
    pub const fn count(cin: usize, ch: usize) -> usize {
        GatePaths::count(cin, ch)
    }
}

/// Convolutional LSTM cell without peephole terms.
#[derive(Debug, Clone)]
pub struct ClstmCellParams {
    pub input_gate: GatePaths,
    pub forget_gate: GatePaths,
    pub output_gate: GatePaths,
    pub candidate: GatePaths,
}

impl ClstmCellParams {
    pub const fn count(cin: usize, ch: usize) -> usize {
        4 * GatePaths::count(cin, ch)
    }
}

/// `y = x + scale · conv2(relu(conv1(x)))`.
#[derive(Debug, Clone)]
pub struct ResBlockParams {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
    pub scale: f64,
}

impl ResBlockParams {
    pub const fn count(ch: usize) -> usize {
        2 * ConvParams::count(ch, ch)
    }
}

fn check_spatial(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
        return Err(Error::shape(op, format!("input {sa:?} vs state {sb:?}")));
    }
    Ok(())
}

/// `h = tanh(conv(x; w_x, b_x) + conv(h_prev; w_h, b_h))`.
pub fn crnn_step(x: &Tensor, h_prev: &Tensor, p: &CrnnCellParams) -> Result<Tensor> {
    check_spatial("crnn_step", x, h_prev)?;
    Ok(ops::tanh(&p.paths.pre_activation(x, h_prev)?))
}

/// One ConvLSTM update; returns `(h, c)`.
///
/// ```text
/// i = σ(·)  f = σ(·)  o = σ(·)  c̃ = tanh(·)
/// c = f ∘ c_prev + i ∘ c̃
/// h = o ∘ tanh(c)
/// ```
pub fn clstm_step(
    x: &Tensor,
    h_prev: &Tensor,
    c_prev: &Tensor,
    p: &ClstmCellParams,
) -> Result<(Tensor, Tensor)> {
    check_spatial("clstm_step", x, h_prev)?;
    if h_prev.shape() != c_prev.shape() {
        return Err(Error::shape(
            "clstm_step",
            format!("hidden {:?} vs cell {:?}", h_prev.shape(), c_prev.shape()),
        ));
    }
    let i = ops::sigmoid_act(&p.input_gate.pre_activation(x, h_prev)?);
    let f = ops::sigmoid_act(&p.forget_gate.pre_activation(x, h_prev)?);
    let o = ops::sigmoid_act(&p.output_gate.pre_activation(x, h_prev)?);
    let g = ops::tanh(&p.candidate.pre_activation(x, h_prev)?);
    let c = add(&hadamard(&f, c_prev)?, &hadamard(&i, &g)?)?;
    let h = hadamard(&o, &ops::tanh(&c))?;
    Ok((h, c))
}

pub fn residual_block(x: &Tensor, p: &ResBlockParams) -> Result<Tensor> {
    if x.shape()[1] != p.conv1.in_channels() {
        return Err(Error::shape(
            "residual_block",
            format!(
                "input has {} channels, block expects {}",
                x.shape()[1],
                p.conv1.in_channels()
            ),
        ));
    }
    let branch = p.conv2.forward(&ops::relu(&p.conv1.forward(x)?))?;
    let branch = if p.scale == 1.0 {
        branch
    } else {
        ops::scale(&branch, p.scale)
    };
    add(x, &branch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: [usize; 4], amp: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-amp..amp)).collect())
    }

    fn random_conv(rng: &mut ChaCha8Rng, cin: usize, cout: usize) -> ConvParams {
        ConvParams {
            weight: random(rng, [cout, cin, 3, 3], 0.4),
            bias: random(rng, [1, cout, 1, 1], 0.4),
        }
    }

    fn random_paths(rng: &mut ChaCha8Rng, cin: usize, ch: usize) -> GatePaths {
        GatePaths {
            input: random_conv(rng, cin, ch),
            hidden: random_conv(rng, ch, ch),
        }
    }

    /// Per-pixel scalar-loop convolution, independent of the im2col kernel.
    fn conv_at(x: &Tensor, p: &ConvParams, b: usize, co: usize, y: usize, xx: usize) -> f64 {
        let [_, cin, h, w] = x.shape();
        let (wt, xd) = (p.weight.data(), x.data());
        let mut acc = p.bias.data()[co];
        for ci in 0..cin {
            for ky in 0..3 {
                for kx in 0..3 {
                    let (iy, ix) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                        continue;
                    }
                    acc += wt[((co * cin + ci) * 3 + ky) * 3 + kx]
                        * xd[((b * cin + ci) * h + iy as usize) * w + ix as usize];
                }
            }
        }
        acc
    }

    fn sig(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    #[test]
    fn crnn_zero_params_give_zero_state() {
        let p = CrnnCellParams {
            paths: GatePaths::zeros(1, 3),
        };
        let x = Tensor::full([2, 1, 4, 4], 0.7);
        let h = crnn_step(&x, &Tensor::full([2, 3, 4, 4], -0.3), &p).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn crnn_constant_bias_path() {
        let mut paths = GatePaths::zeros(1, 2);
        paths.input.bias = Tensor::new([1, 2, 1, 1], vec![0.3, -1.0]);
        paths.hidden.bias = Tensor::new([1, 2, 1, 1], vec![0.2, 0.5]);
        let p = CrnnCellParams { paths };
        let h = crnn_step(
            &Tensor::full([1, 1, 3, 3], 9.0),
            &Tensor::full([1, 2, 3, 3], 4.0),
            &p,
        )
        .unwrap();
        for (i, v) in h.data().iter().enumerate() {
            let c: f64 = if i < 9 { 0.5 } else { -0.5 };
            assert_eq!(*v, c.tanh());
        }
    }

    #[test]
    fn crnn_matches_pixel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (cin, ch) = (2, 3);
        let p = CrnnCellParams {
            paths: random_paths(&mut rng, cin, ch),
        };
        let x = random(&mut rng, [2, cin, 5, 4], 1.0);
        let hp = random(&mut rng, [2, ch, 5, 4], 1.0);
        let h = crnn_step(&x, &hp, &p).unwrap();
        for b in 0..2 {
            for c in 0..ch {
                for y in 0..5 {
                    for xx in 0..4 {
                        let e = (conv_at(&x, &p.paths.input, b, c, y, xx)
                            + conv_at(&hp, &p.paths.hidden, b, c, y, xx))
                        .tanh();
                        let got = h.data()[((b * ch + c) * 5 + y) * 4 + xx];
                        assert!((got - e).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn clstm_zero_params() {
        let p = ClstmCellParams {
            input_gate: GatePaths::zeros(1, 2),
            forget_gate: GatePaths::zeros(1, 2),
            output_gate: GatePaths::zeros(1, 2),
            candidate: GatePaths::zeros(1, 2),
        };
        let z = Tensor::zeros([1, 2, 3, 3]);
        let (h, c) = clstm_step(&Tensor::full([1, 1, 3, 3], 0.5), &z, &z, &p).unwrap();
        assert!(h.data().iter().chain(c.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn clstm_saturated_forget_gate_keeps_cell() {
        let mut forget = GatePaths::zeros(1, 2);
        forget.input.bias = Tensor::full([1, 2, 1, 1], 20.0);
        forget.hidden.bias = Tensor::full([1, 2, 1, 1], 20.0);
        let p = ClstmCellParams {
            input_gate: GatePaths::zeros(1, 2),
            forget_gate: forget,
            output_gate: GatePaths::zeros(1, 2),
            candidate: GatePaths::zeros(1, 2),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c_prev = random(&mut rng, [1, 2, 3, 3], 3.0);
        let (_, c) = clstm_step(
            &random(&mut rng, [1, 1, 3, 3], 1.0),
            &Tensor::zeros([1, 2, 3, 3]),
            &c_prev,
            &p,
        )
        .unwrap();
        for (a, b) in c.data().iter().zip(c_prev.data()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn clstm_matches_pixel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (cin, ch) = (1, 2);
        let p = ClstmCellParams {
            input_gate: random_paths(&mut rng, cin, ch),
            forget_gate: random_paths(&mut rng, cin, ch),
            output_gate: random_paths(&mut rng, cin, ch),
            candidate: random_paths(&mut rng, cin, ch),
        };
        let x = random(&mut rng, [1, cin, 4, 6], 1.0);
        let hp = random(&mut rng, [1, ch, 4, 6], 1.0);
        let cp = random(&mut rng, [1, ch, 4, 6], 2.0);
        let (h, c) = clstm_step(&x, &hp, &cp, &p).unwrap();
        let pre = |g: &GatePaths, c: usize, y: usize, xx: usize| {
            conv_at(&x, &g.input, 0, c, y, xx) + conv_at(&hp, &g.hidden, 0, c, y, xx)
        };
        for ci in 0..ch {
            for y in 0..4 {
                for xx in 0..6 {
                    let idx = (ci * 4 + y) * 6 + xx;
                    let i = sig(pre(&p.input_gate, ci, y, xx));
                    let f = sig(pre(&p.forget_gate, ci, y, xx));
                    let o = sig(pre(&p.output_gate, ci, y, xx));
                    let g = pre(&p.candidate, ci, y, xx).tanh();
                    let ce = f * cp.data()[idx] + i * g;
                    let he = o * ce.tanh();
                    assert!((c.data()[idx] - ce).abs() < 1e-12);
                    assert!((h.data()[idx] - he).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn residual_zero_branch_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, [2, 3, 4, 4], 1.0);
        let zero = ResBlockParams {
            conv1: ConvParams::zeros(3, 3),
            conv2: ConvParams::zeros(3, 3),
            scale: 1.0,
        };
        assert_eq!(residual_block(&x, &zero).unwrap().data(), x.data());
        let scaled_out = ResBlockParams {
            conv1: random_conv(&mut rng, 3, 3),
            conv2: random_conv(&mut rng, 3, 3),
            scale: 0.0,
        };
        assert_eq!(residual_block(&x, &scaled_out).unwrap().data(), x.data());
    }

    #[test]
    fn residual_matches_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, [1, 3, 5, 5], 1.0);
        let p = ResBlockParams {
            conv1: random_conv(&mut rng, 3, 3),
            conv2: random_conv(&mut rng, 3, 3),
            scale: 0.1,
        };
        let y = residual_block(&x, &p).unwrap();
        let branch = p
            .conv2
            .forward(&ops::relu(&p.conv1.forward(&x).unwrap()))
            .unwrap();
        for ((yv, xv), bv) in y.data().iter().zip(x.data()).zip(branch.data()) {
            assert!((yv - (xv + 0.1 * bv)).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_errors() {
        let p = CrnnCellParams {
            paths: GatePaths::zeros(1, 2),
        };
        assert!(crnn_step(
            &Tensor::zeros([1, 1, 3, 3]),
            &Tensor::zeros([1, 2, 3, 4]),
            &p
        )
        .is_err());
        assert!(crnn_step(
            &Tensor::zeros([1, 2, 3, 3]),
            &Tensor::zeros([1, 2, 3, 3]),
            &p
        )
        .is_err());
        let r = ResBlockParams {
            conv1: ConvParams::zeros(2, 2),
            conv2: ConvParams::zeros(2, 2),
            scale: 1.0,
        };
        assert!(residual_block(&Tensor::zeros([1, 3, 2, 2]), &r).is_err());
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(CrnnCellParams::count(1, 64), 37_568);
        assert_eq!(CrnnCellParams::count(64, 64), 73_856);
        assert_eq!(ClstmCellParams::count(1, 64), 150_272);
        assert_eq!(ClstmCellParams::count(64, 64), 295_424);
        assert_eq!(ResBlockParams::count(64), 73_856);
    }
}
