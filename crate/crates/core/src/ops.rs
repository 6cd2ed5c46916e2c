//! Differentiable ops on [`Tensor`].

use std::sync::Arc;

use crate::conv;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// 3×3 convolution, stride 1, zero padding 1. `weight` is `(Cout, Cin, 3, 3)`
/// and `bias` is `(1, Cout, 1, 1)`.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let xs = input.shape();
    let [cout, cin, kh, kw] = weight.shape();
    if kh != 3 || kw != 3 {
        return Err(Error::shape(
            "conv2d",
            format!("kernel must be 3x3, got {kh}x{kw}"),
        ));
    }
    if cin != xs[1] {
        return Err(Error::shape(
            "conv2d",
            format!("input has {} channels, weight expects {cin}", xs[1]),
        ));
    }
    if bias.shape() != [1, cout, 1, 1] {
        return Err(Error::shape(
            "conv2d",
            format!("bias shape {:?}, expected [1, {cout}, 1, 1]", bias.shape()),
        ));
    }
    let [n, _, h, w] = xs;
    let out_shape: Shape = [n, cout, h, w];
    let data = conv::forward(input.data(), xs, weight.data(), cout, Some(bias.data()));
    Ok(Tensor::from_op(
        out_shape,
        data,
        "conv2d",
        vec![input.clone(), weight.clone(), bias.clone()],
        Box::new(move |g, inputs| {
            let (x, wt, b) = (&inputs[0], &inputs[1], &inputs[2]);
            let gx = x
                .requires_grad()
                .then(|| conv::grad_input(g, xs, wt.data(), cout));
            let gw = wt
                .requires_grad()
                .then(|| conv::grad_weight(g, x.data(), xs, cout));
            let gb = b
                .requires_grad()
                .then(|| conv::grad_bias(g, n, cout, h * w));
            vec![gx, gw, gb]
        }),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Linear,
}

impl Activation {
    pub fn apply_scalar(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::Sigmoid => sigmoid(v),
            Activation::Linear => v,
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn activation(input: &Tensor, kind: Activation) -> Tensor {
    if kind == Activation::Linear {
        return input.clone();
    }
    let data: Vec<f64> = input.data().iter().map(|&v| kind.apply_scalar(v)).collect();
    let out = Arc::new(data);
    let saved = Arc::clone(&out);
    let name = match kind {
        Activation::Relu => "relu",
        Activation::Tanh => "tanh",
        Activation::Sigmoid => "sigmoid",
        Activation::Linear => unreachable!(),
    };
    Tensor::from_op(
        input.shape(),
        out,
        name,
        vec![input.clone()],
        Box::new(move |g, inputs| {
            let x = inputs[0].data();
            let gx: Vec<f64> = match kind {
                Activation::Relu => g
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
                Activation::Tanh => g
                    .iter()
                    .zip(saved.iter())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect(),
                Activation::Sigmoid => g
                    .iter()
                    .zip(saved.iter())
                    .map(|(g, s)| g * s * (1.0 - s))
                    .collect(),
                Activation::Linear => g.to_vec(),
            };
            vec![Some(gx)]
        }),
    )
}

pub fn relu(x: &Tensor) -> Tensor {
    activation(x, Activation::Relu)
}

pub fn tanh(x: &Tensor) -> Tensor {
    activation(x, Activation::Tanh)
}

pub fn sigmoid_act(x: &Tensor) -> Tensor {
    activation(x, Activation::Sigmoid)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Hadamard,
}

pub fn binary_op(a: &Tensor, b: &Tensor, kind: BinaryOp) -> Result<Tensor> {
    match kind {
        BinaryOp::Add => add(a, b),
        BinaryOp::Hadamard => hadamard(a, b),
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_op(
        a.shape(),
        data,
        "add",
        vec![a.clone(), b.clone()],
        Box::new(|g, inputs| {
            inputs
                .iter()
                .map(|t| t.requires_grad().then(|| g.to_vec()))
                .collect()
        }),
    ))
}

pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("hadamard", a, b)?;
    let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Ok(Tensor::from_op(
        a.shape(),
        data,
        "hadamard",
        vec![a.clone(), b.clone()],
        Box::new(|g, inputs| {
            let (a, b) = (&inputs[0], &inputs[1]);
            let ga = a
                .requires_grad()
                .then(|| g.iter().zip(b.data()).map(|(g, y)| g * y).collect());
            let gb = b
                .requires_grad()
                .then(|| g.iter().zip(a.data()).map(|(g, x)| g * x).collect());
            vec![ga, gb]
        }),
    ))
}

/// Multiplies every element by a constant.
pub fn scale(x: &Tensor, factor: f64) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|v| v * factor).collect();
    Tensor::from_op(
        x.shape(),
        data,
        "scale",
        vec![x.clone()],
        Box::new(move |g, _| vec![Some(g.iter().map(|v| v * factor).collect())]),
    )
}

/// Mean of squared differences. The target is a constant.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_shape("mse_loss", pred, target)?;
    if target.requires_grad() {
        return Err(Error::Contract(
            "mse_loss target must not require a gradient".into(),
        ));
    }
    let count = pred.numel() as f64;
    let value = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / count;
    let tdata = target.data_arc();
    Ok(Tensor::from_op(
        [1, 1, 1, 1],
        vec![value],
        "mse_loss",
        vec![pred.clone()],
        Box::new(move |g, inputs| {
            let k = 2.0 * g[0] / count;
            let gp = inputs[0]
                .data()
                .iter()
                .zip(tdata.iter())
                .map(|(p, t)| k * (p - t))
                .collect();
            vec![Some(gp)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec())
    }

    #[test]
    fn conv_zero_input_yields_bias() {
        let x = Tensor::zeros([1, 1, 3, 3]);
        let w = Tensor::full([1, 1, 3, 3], 0.7);
        let b = t([1, 1, 1, 1], &[2.5]);
        let y = conv2d(&x, &w, &b).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::new(
            [2, 1, 4, 5],
            (0..40).map(|v| v as f64 * 0.3 - 2.0).collect(),
        );
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let y = conv2d(&x, &t([1, 1, 3, 3], &k), &Tensor::zeros([1, 1, 1, 1])).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_all_ones_kernel_hand_values() {
        let x = t([1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let y = conv2d(
            &x,
            &Tensor::full([1, 1, 3, 3], 1.0),
            &Tensor::zeros([1, 1, 1, 1]),
        )
        .unwrap();
        assert_eq!(y.data()[4], 45.0);
        assert_eq!(y.data()[0], 12.0);
    }

    #[test]
    fn conv_shape_errors() {
        let x = Tensor::zeros([1, 2, 3, 3]);
        let b = Tensor::zeros([1, 1, 1, 1]);
        assert!(conv2d(&x, &Tensor::zeros([1, 3, 3, 3]), &b).is_err());
        assert!(conv2d(&x, &Tensor::zeros([1, 2, 5, 5]), &b).is_err());
        assert!(conv2d(
            &x,
            &Tensor::zeros([1, 2, 3, 3]),
            &Tensor::zeros([1, 2, 1, 1])
        )
        .is_err());
    }

    #[test]
    fn activation_values() {
        let x = t([1, 1, 1, 2], &[-2.0, 3.0]);
        assert_eq!(relu(&x).data(), &[0.0, 3.0]);
        let z = Tensor::zeros([1, 1, 1, 1]);
        assert_eq!(tanh(&z).item(), 0.0);
        assert_eq!(sigmoid_act(&z).item(), 0.5);
        assert_eq!(activation(&x, Activation::Linear).data(), x.data());
    }

    #[test]
    fn activation_grad_at_zero() {
        for (kind, expected) in [(Activation::Tanh, 1.0), (Activation::Sigmoid, 0.25)] {
            let x = Tensor::param([1, 1, 1, 1], vec![0.0]);
            let y = activation(&x, kind);
            let loss = mse_loss(&y, &Tensor::scalar(-1.0)).unwrap();
            loss.backward().unwrap();
            // d/dx (y+1)^2 = 2 (y+1) y'
            let y0 = y.item();
            let g = x.grad().unwrap()[0] / (2.0 * (y0 + 1.0));
            assert!((g - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn binary_identities() {
        let x = Tensor::new([1, 2, 2, 2], (0..8).map(|v| v as f64 - 3.5).collect());
        assert_eq!(add(&x, &Tensor::zeros(x.shape())).unwrap().data(), x.data());
        assert_eq!(
            hadamard(&x, &Tensor::full(x.shape(), 1.0)).unwrap().data(),
            x.data()
        );
        assert!(add(&x, &Tensor::zeros([1, 2, 2, 1])).is_err());
        assert!(hadamard(&x, &Tensor::zeros([2, 2, 2, 2])).is_err());
    }

    #[test]
    fn mse_values_and_grad() {
        let p = Tensor::param([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(mse_loss(&p, &p.detach()).unwrap().item(), 0.0);
        let target = t([1, 1, 2, 2], &[0.0, 1.0, 2.0, 3.0]);
        let loss = mse_loss(&p, &target).unwrap();
        assert_eq!(loss.item(), 1.0);
        loss.backward().unwrap();
        assert_eq!(p.grad().unwrap(), vec![0.5; 4]);
        assert!(mse_loss(&p, &Tensor::zeros([1, 1, 1, 4])).is_err());
        assert!(mse_loss(&target, &p).is_err());
    }

    #[test]
    fn detached_target_gives_zero_grad() {
        let x = Tensor::param([1, 1, 2, 2], vec![0.3, -1.0, 2.0, 7.0]);
        mse_loss(&x, &x.detach()).unwrap().backward().unwrap();
        assert!(x.grad().unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn grad_does_not_flow_through_detach() {
        let x = Tensor::param([1, 1, 2, 2], vec![0.3, -1.0, 2.0, 7.0]);
        let y = tanh(&x.detach());
        assert!(!y.requires_grad());
        let w = Tensor::param([1, 1, 2, 2], vec![1.0; 4]);
        let z = hadamard(&y, &w).unwrap();
        mse_loss(&z, &Tensor::zeros([1, 1, 2, 2]))
            .unwrap()
            .backward()
            .unwrap();
        assert!(x.grad().is_none());
        assert!(w.grad().is_some());
    }

    #[test]
    fn reused_tensor_accumulates() {
        let x = Tensor::param([1, 1, 1, 3], vec![0.5, -0.2, 1.5]);
        let target = Tensor::zeros([1, 1, 1, 3]);
        // d/dx mean((x + x)^2) = 8x/3
        let y = add(&x, &x).unwrap();
        mse_loss(&y, &target).unwrap().backward().unwrap();
        let g = x.grad().unwrap();
        for (gi, xi) in g.iter().zip(x.data()) {
            assert!((gi - 8.0 * xi / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn scale_grad() {
        let x = Tensor::param([1, 1, 1, 2], vec![1.0, -1.0]);
        let y = scale(&x, 0.1);
        assert_eq!(y.data(), &[0.1, -0.1]);
        mse_loss(&y, &Tensor::zeros([1, 1, 1, 2]))
            .unwrap()
            .backward()
            .unwrap();
        let g = x.grad().unwrap();
        assert!((g[0] - 0.01).abs() < 1e-15 && (g[1] + 0.01).abs() < 1e-15);
    }
}
