//! Adam with classic additive L2 weight decay and the step-halving learning
//! rate schedule.

use super::Param;

#[derive(Debug, Clone, Copy)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Adam {
    pub fn new(weight_decay: f32) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    /// One update of a single parameter. `t` is the 1-based step count.
    pub fn step_param(&self, p: &mut Param, lr: f32, t: usize) {
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        let data = p.data.as_slice_mut().expect("standard layout");
        let grad = p.grad.as_slice().expect("standard layout");
        let m = p.m.as_slice_mut().expect("standard layout");
        let v = p.v.as_slice_mut().expect("standard layout");
        for i in 0..data.len() {
            let g = grad[i] + self.weight_decay * data[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            data[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Learning rate at (0-based) step `s`: `lr_init * 0.5^(s / period)`.
pub fn lr_at_step(step: usize, lr_init: f64, halving_period: usize) -> f64 {
    lr_init * 0.5f64.powi((step / halving_period.max(1)) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    #[test]
    fn lr_schedule_closed_form() {
        assert_eq!(lr_at_step(0, 1e-4, 10_000), 1e-4);
        assert_eq!(lr_at_step(9_999, 1e-4, 10_000), 1e-4);
        assert_eq!(lr_at_step(10_000, 1e-4, 10_000), 5e-5);
        assert_eq!(lr_at_step(20_000, 1e-4, 10_000), 2.5e-5);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut p = Param::new(
            "w",
            ArrayD::from_shape_vec(ndarray::IxDyn(&[2]), vec![1.0, -1.0]).unwrap(),
        );
        p.grad.as_slice_mut().unwrap().copy_from_slice(&[0.5, -0.5]);
        let opt = Adam::new(0.0);
        opt.step_param(&mut p, 0.1, 1);
        let d = p.data.as_slice().unwrap();
        assert!(d[0] < 1.0);
        assert!(d[1] > -1.0);
    }

    #[test]
    fn weight_decay_shrinks_parameters() {
        let mut p = Param::new(
            "w",
            ArrayD::from_shape_vec(ndarray::IxDyn(&[1]), vec![2.0]).unwrap(),
        );
        // zero raw gradient: only decay acts
        let opt = Adam::new(0.1);
        opt.step_param(&mut p, 0.01, 1);
        assert!(p.data.as_slice().unwrap()[0] < 2.0);
    }
}
