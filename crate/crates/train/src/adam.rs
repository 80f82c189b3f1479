//! Adam optimizer over a [`ParamSet`].

use threetank_autodiff::ParamSet;

use crate::{Result, TrainError};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with bias correction. Moment slots are aligned with the parameter
/// set's registration order, so one optimizer instance must stay paired with
/// the set it was created from.
pub struct Adam {
    step: u64,
    slots: Vec<Slot>,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        let slots = params
            .iter()
            .map(|p| Slot { m: vec![0.0; p.numel()], v: vec![0.0; p.numel()] })
            .collect();
        Self { step: 0, slots }
    }

    /// Completed update steps.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every parameter, consuming the currently accumulated
    /// gradients. All gradients are checked before anything moves, so a
    /// non-finite gradient aborts with every parameter still unchanged.
    pub fn step(&mut self, params: &ParamSet, lr: f64) -> Result<()> {
        assert_eq!(
            self.slots.len(),
            params.len(),
            "optimizer is paired with a different parameter set"
        );
        let next_step = self.step + 1;
        for p in params.iter() {
            if p.grad().data().iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFiniteGradient { param: p.name(), step: next_step });
            }
        }
        self.step = next_step;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step.min(i32::MAX as u64) as i32);
        for (slot, p) in self.slots.iter_mut().zip(params.iter()) {
            let grad = p.grad();
            let g = grad.data();
            debug_assert_eq!(g.len(), slot.m.len());
            let mut direction = vec![0.0; g.len()];
            for j in 0..g.len() {
                slot.m[j] = ADAM_BETA1 * slot.m[j] + (1.0 - ADAM_BETA1) * g[j];
                slot.v[j] = ADAM_BETA2 * slot.v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                direction[j] = (slot.m[j] / bc1) / ((slot.v[j] / bc2).sqrt() + ADAM_EPSILON);
            }
            p.apply_step(&direction, -lr);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use threetank_autodiff::Tensor;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged_but_advances_the_counter() {
        let mut params = ParamSet::new();
        let w = params.add("w", Tensor::new(&[3], vec![1.0, -2.0, 3.5]).unwrap());
        let mut opt = Adam::new(&params);
        opt.step(&params, 1e-3).unwrap();
        assert_eq!(w.value().data(), &[1.0, -2.0, 3.5]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_moves_each_element_by_at_most_the_learning_rate() {
        let lr = 1e-3;
        let before = [0.1, -0.2, 0.3, -0.4];
        let grads = [1e-8, 1.0, -3.0, 1e6];
        let mut params = ParamSet::new();
        let w = params.add("w", Tensor::new(&[4], before.to_vec()).unwrap());
        w.accumulate_grad(&Tensor::new(&[4], grads.to_vec()).unwrap());
        let mut opt = Adam::new(&params);
        opt.step(&params, lr).unwrap();
        let after = w.value();
        for j in 0..4 {
            let delta = after.data()[j] - before[j];
            // m̂/(√v̂+ε) is strictly below 1 in exact arithmetic; allow a few
            // ulp for the bias-correction divisions.
            assert!(delta.abs() <= lr * (1.0 + 1e-12), "element {j} moved {delta}");
            // Descent direction: opposite the gradient sign.
            assert!(delta * grads[j] < 0.0, "element {j} moved with the gradient");
        }
        // With bias correction the first step is sign-like: for a gradient far
        // above epsilon the magnitude is essentially the full learning rate.
        let big = (after.data()[3] - before[3]).abs();
        assert!(big > 0.99 * lr, "large-gradient step was {big}");
    }

    #[test]
    fn hundred_steps_on_a_quadratic_approach_the_minimum() {
        let mut params = ParamSet::new();
        let theta = params.add("theta", Tensor::scalar(1.0));
        let mut opt = Adam::new(&params);
        for _ in 0..100 {
            params.zero_grads();
            let t = theta.value().item();
            theta.accumulate_grad(&Tensor::scalar(2.0 * t));
            opt.step(&params, 0.1).unwrap();
        }
        let t = theta.value().item();
        assert!(t.abs() < 0.05, "after 100 steps theta = {t}");
    }

    #[test]
    fn non_finite_gradient_aborts_naming_the_parameter() {
        let mut params = ParamSet::new();
        let a = params.add("enc.w", Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let b = params.add("head.b", Tensor::new(&[2], vec![3.0, 4.0]).unwrap());
        a.accumulate_grad(&Tensor::new(&[2], vec![0.5, 0.5]).unwrap());
        b.accumulate_grad(&Tensor::new(&[2], vec![f64::NAN, 0.0]).unwrap());
        let mut opt = Adam::new(&params);
        let err = opt.step(&params, 1e-3).unwrap_err();
        match &err {
            TrainError::NonFiniteGradient { param, step } => {
                assert_eq!(param, "head.b");
                assert_eq!(*step, 1);
            }
            other => panic!("unexpected error {other:?}"),
        }
        assert!(err.to_string().contains("head.b"));
        // Gradients are validated before any parameter moves.
        assert_eq!(a.value().data(), &[1.0, 2.0]);
        assert_eq!(opt.step_count(), 0);
    }
}
