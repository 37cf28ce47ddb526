//! AdamW with decoupled weight decay, global-norm clipping and a staircase
//! exponential learning-rate schedule.

use std::collections::HashMap;

use crate::{Module, Real};

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    state: HashMap<String, Moments>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay,
            step: 0,
            state: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Advances the bias-correction counter; call once per optimisation step
    /// before any [`AdamW::update`].
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Applies one update to every trainable parameter of `module`.
    /// Gradients are multiplied by `grad_scale` first (used for clipping).
    /// Weight decay only touches matrices, never gains or biases.
    pub fn update<S: Real>(&mut self, module: &mut dyn Module<S>, prefix: &str, lr: f64, grad_scale: f64) {
        let t = self.step.max(1) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let state = &mut self.state;
        module.visit_mut(prefix, &mut |name, p| {
            if !p.requires_grad {
                return;
            }
            let n = p.numel();
            let st = state.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let decay = if p.value.rows() > 1 && p.value.cols() > 1 { wd } else { 0.0 };
            let grads = p.grad.data();
            let values = p.value.data_mut();
            for i in 0..n {
                let g = grads[i].as_f64() * grad_scale;
                st.m[i] = b1 * st.m[i] + (1.0 - b1) * g;
                st.v[i] = b2 * st.v[i] + (1.0 - b2) * g * g;
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                let mut w = values[i].as_f64();
                w -= lr * decay * w;
                w -= lr * mhat / (vhat.sqrt() + eps);
                values[i] = S::of(w);
            }
        });
    }
}

/// L2 norm over the gradients of every trainable parameter.
pub fn grad_norm<S: Real>(modules: &[&dyn Module<S>]) -> f64 {
    let mut acc = 0.0;
    for m in modules {
        m.visit("", &mut |_, p| {
            if p.requires_grad {
                acc += p.grad.data().iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>();
            }
        });
    }
    acc.sqrt()
}

/// Scale factor that brings a gradient of norm `norm` under `max_norm`.
pub fn clip_scale(norm: f64, max_norm: f64) -> f64 {
    if max_norm > 0.0 && norm > max_norm {
        max_norm / norm
    } else {
        1.0
    }
}

/// `lr = base * gamma ^ floor(step / period)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpDecay {
    pub base_lr: f64,
    pub gamma: f64,
    pub period: usize,
}

impl ExpDecay {
    pub fn lr(&self, step: usize) -> f64 {
        let k = if self.period == 0 { 0 } else { step / self.period };
        self.base_lr * self.gamma.powi(k as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Mat, Param};

    #[test]
    fn adamw_moves_against_gradient() {
        let mut p = Param::<f64>::new(Mat::from_vec(1, 2, vec![1.0, -1.0]));
        p.grad = Mat::from_vec(1, 2, vec![0.5, -0.5]);
        let mut opt = AdamW::new(0.0);
        opt.begin_step();
        opt.update(&mut p, "p", 0.1, 1.0);
        assert!(p.value.get(0, 0) < 1.0);
        assert!(p.value.get(0, 1) > -1.0);
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let mut p = Param::<f32>::new(Mat::from_vec(2, 2, vec![1.0; 4]));
        p.grad.fill(3.0);
        p.requires_grad = false;
        let mut opt = AdamW::new(0.1);
        opt.begin_step();
        opt.update(&mut p, "p", 0.1, 1.0);
        assert!(p.value.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn staircase_schedule() {
        let s = ExpDecay {
            base_lr: 4e-4,
            gamma: 0.5,
            period: 10,
        };
        assert_eq!(s.lr(0), 4e-4);
        assert_eq!(s.lr(9), 4e-4);
        assert_eq!(s.lr(10), 2e-4);
    }
}
