//! Adam with bias correction, and the halve-on-plateau learning-rate schedule.

use crate::error::{Error, Result};
use crate::models::ModelParams;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Per-parameter first and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamState {
            step: 0,
            lr,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Checks that the moment buffers mirror the parameter shapes.
    pub fn matches(&self, params: &ModelParams) -> bool {
        self.m.len() == params.len()
            && self.v.len() == params.len()
            && params
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|((_, t), (m, v))| m.len() == t.numel() && v.len() == t.numel())
    }
}

/// One bias-corrected Adam update. Every parameter must hold a gradient; the
/// updated parameters are fresh leaves with cleared gradients.
pub fn adam_step(params: &mut ModelParams, state: &mut AdamState) -> Result<()> {
    if !state.matches(params) {
        return Err(Error::Contract(
            "optimizer state does not match parameter shapes".into(),
        ));
    }
    let grads = params
        .iter()
        .map(|(name, t)| {
            t.grad()
                .ok_or_else(|| Error::Contract(format!("parameter {name} has no gradient")))
        })
        .collect::<Result<Vec<_>>>()?;
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powf(t);
    let c2 = 1.0 - b2.powf(t);
    let mut updated = Vec::with_capacity(grads.len());
    for (((_, p), g), (m, v)) in params
        .iter()
        .zip(&grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let mut values = p.to_vec();
        for i in 0..values.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            values[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
        updated.push(values);
    }
    params.zero_grads();
    params.replace_values(updated);
    Ok(())
}

/// Halves the learning rate when the loss has not improved for `patience`
/// consecutive updates.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauSchedule {
    pub patience: u64,
    pub factor: f64,
    pub best_loss: Option<f64>,
    pub steps_since_improvement: u64,
}

impl Default for PlateauSchedule {
    fn default() -> Self {
        PlateauSchedule {
            patience: 6000,
            factor: 0.5,
            best_loss: None,
            steps_since_improvement: 0,
        }
    }
}

impl PlateauSchedule {
    pub fn new(patience: u64, factor: f64) -> Result<Self> {
        if patience == 0 || !(factor > 0.0 && factor < 1.0) {
            return Err(Error::Config(format!(
                "invalid plateau schedule: patience {patience}, factor {factor}"
            )));
        }
        Ok(PlateauSchedule {
            patience,
            factor,
            ..Default::default()
        })
    }

    /// Records one update's loss. A loss counts as an improvement only if it
    /// is strictly below an earlier best; the first observation has nothing to
    /// improve on and starts the count. Returns `true` when `lr` was reduced.
    pub fn update(&mut self, current_loss: f64, lr: &mut f64) -> Result<bool> {
        if !current_loss.is_finite() {
            return Err(Error::Divergence {
                context: "plateau schedule update".into(),
                loss: current_loss,
            });
        }
        match self.best_loss {
            Some(best) if current_loss < best => {
                self.best_loss = Some(current_loss);
                self.steps_since_improvement = 0;
                return Ok(false);
            }
            Some(_) => {}
            None => self.best_loss = Some(current_loss),
        }
        self.steps_since_improvement += 1;
        if self.steps_since_improvement >= self.patience {
            *lr *= self.factor;
            self.steps_since_improvement = 0;
            return Ok(true);
        }
        Ok(false)
    }
}

/// Free-function form of [`PlateauSchedule::update`].
pub fn plateau_update(
    schedule: &mut PlateauSchedule,
    current_loss: f64,
    lr: &mut f64,
) -> Result<bool> {
    schedule.update(current_loss, lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{CellKind, ModelConfig, RecurrentConfig};
    use crate::tensor::Tensor;
    use indexmap::IndexMap;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_params() -> ModelParams {
        ModelParams::zeros(ModelConfig::Recurrent(RecurrentConfig {
            channels: 1,
            num_res_blocks: 0,
            ..RecurrentConfig::new(CellKind::Crnn)
        }))
        .unwrap()
    }

    fn set_grads(params: &ModelParams, mut f: impl FnMut() -> f64) {
        // mean((p - (p - g·n/2))²) has gradient g with respect to p
        for (_, t) in params.iter() {
            let g: Vec<f64> = (0..t.numel()).map(|_| f()).collect();
            let n = t.numel() as f64;
            let target: Vec<f64> = t
                .data()
                .iter()
                .zip(&g)
                .map(|(p, g)| p - g * n / 2.0)
                .collect();
            let loss = crate::ops::mse_loss(t, &Tensor::new(t.shape(), target)).unwrap();
            loss.backward().unwrap();
        }
    }

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut p = tiny_params();
        let before: Vec<Vec<f64>> = p.iter().map(|(_, t)| t.to_vec()).collect();
        let mut s = AdamState::new(&p, 1e-3);
        set_grads(&p, || 0.0);
        adam_step(&mut p, &mut s).unwrap();
        let after: Vec<Vec<f64>> = p.iter().map(|(_, t)| t.to_vec()).collect();
        assert_eq!(before, after);
        assert!(p
            .iter()
            .all(|(_, t)| t.grad().is_none() && t.requires_grad()));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let lr = 1e-3;
        // single-parameter closed form: m̂ = g, v̂ = g², Δ = -lr·g/(|g| + ε)
        let g = 1.0;
        let m = (1.0 - BETA1) * g / (1.0 - BETA1);
        let v = (1.0 - BETA2) * g * g / (1.0 - BETA2);
        let delta = -lr * m / (v.sqrt() + EPSILON);
        assert!((delta + lr).abs() < 1e-6 * lr);

        let mut p = tiny_params();
        let mut s = AdamState::new(&p, lr);
        set_grads(&p, || 1.0);
        let before = p.get("out.bias").unwrap().data()[0];
        adam_step(&mut p, &mut s).unwrap();
        let after = p.get("out.bias").unwrap().data()[0];
        assert!(((after - before) + lr).abs() < 1e-6 * lr);
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let mut p = tiny_params();
        let mut s = AdamState::new(&p, 1e-3);
        assert!(matches!(adam_step(&mut p, &mut s), Err(Error::Contract(_))));
        assert_eq!(s.step, 0);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut p = tiny_params();
            let mut s = AdamState::new(&p, 1e-2);
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            for _ in 0..5 {
                set_grads(&p, || rng.random_range(-1.0..1.0));
                adam_step(&mut p, &mut s).unwrap();
            }
            p.iter().flat_map(|(_, t)| t.to_vec()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    proptest! {
        #[test]
        fn update_magnitude_bounded(seed in 0u64..1000, steps in 1usize..6) {
            let lr = 1e-2;
            let mut p = tiny_params();
            let mut s = AdamState::new(&p, lr);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..steps {
                let before: Vec<f64> = p.iter().flat_map(|(_, t)| t.to_vec()).collect();
                set_grads(&p, || rng.random_range(-5.0..5.0));
                adam_step(&mut p, &mut s).unwrap();
                let after: Vec<f64> = p.iter().flat_map(|(_, t)| t.to_vec()).collect();
                for (a, b) in after.iter().zip(&before) {
                    prop_assert!((a - b).abs() <= 10.0 * lr);
                }
            }
        }

        #[test]
        fn lr_never_increases(losses in proptest::collection::vec(0.0f64..10.0, 1..300), patience in 1u64..20) {
            let mut sched = PlateauSchedule::new(patience, 0.5).unwrap();
            let mut lr = 1.0;
            for l in losses {
                let before = lr;
                sched.update(l, &mut lr).unwrap();
                prop_assert!(lr <= before);
            }
        }
    }

    #[test]
    fn decreasing_losses_never_halve() {
        let mut s = PlateauSchedule::default();
        let mut lr = 1e-4;
        for i in 0..20_000 {
            assert!(!s.update(1.0 / (1.0 + i as f64), &mut lr).unwrap());
        }
        assert_eq!(lr, 1e-4);
    }

    #[test]
    fn constant_loss_halves_every_patience_window() {
        let mut s = PlateauSchedule::default();
        let mut lr = 1e-4;
        let mut halvings = Vec::new();
        for update in 1..=12_000u64 {
            if s.update(0.25, &mut lr).unwrap() {
                halvings.push(update);
            }
        }
        assert_eq!(halvings, vec![6000, 12_000]);
        assert_eq!(lr, 1e-4 * 0.25);
    }

    #[test]
    fn nan_loss_is_divergence() {
        let mut s = PlateauSchedule::default();
        let mut lr = 1.0;
        assert!(matches!(
            s.update(f64::NAN, &mut lr),
            Err(Error::Divergence { .. })
        ));
    }

    #[test]
    fn rejects_mismatched_state() {
        let mut p = tiny_params();
        let other = ModelParams::from_tensors(
            p.config().clone(),
            p.iter()
                .map(|(k, t)| (k.to_string(), t.clone()))
                .collect::<IndexMap<_, _>>(),
        )
        .unwrap();
        let mut s = AdamState::new(&other, 1e-3);
        s.m.pop();
        set_grads(&p, || 1.0);
        assert!(adam_step(&mut p, &mut s).is_err());
    }
}
