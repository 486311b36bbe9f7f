use crate::autograd::Gradients;
use crate::nnet::checkpoint::OptimizerState;
use crate::params::ParamStore;
use crate::tensor::{Mat, Scalar};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.98;
pub const EPSILON: f64 = 1e-9;

/// Linear warmup to `peak_lr` at `warmup` steps, then `peak_lr * sqrt(warmup / step)`.
/// Steps are 1-indexed.
pub fn noam_lr(peak_lr: f64, warmup: u64, step: u64) -> f64 {
    let s = step.max(1) as f64;
    if warmup == 0 {
        return peak_lr;
    }
    let w = warmup as f64;
    peak_lr * (s / w).min((w / s).sqrt())
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub state: OptimizerState<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.ids().map(|id| Mat::zeros(params.value(id).rows(), params.value(id).cols())).collect();
        Adam {
            state: OptimizerState {
                step: 0,
                m: zeros(),
                v: zeros(),
            },
        }
    }

    pub fn from_state(state: OptimizerState<T>) -> Self {
        Adam { state }
    }

    /// One update of every trainable parameter that has a gradient. Frozen
    /// parameters are skipped even if a gradient is present.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) {
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let (b1, b2) = (T::lit(BETA1), T::lit(BETA2));
        let (ob1, ob2) = (T::lit(1.0 - BETA1), T::lit(1.0 - BETA2));
        let step_size = T::lit(lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(EPSILON);
        for (id, g) in grads.iter() {
            if !params.is_trainable(id) {
                continue;
            }
            let i = id.index();
            let m = self.state.m[i].data_mut();
            let v = self.state.v[i].data_mut();
            let w = params.value_mut(id).data_mut();
            for (((w, m), v), &g) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *m = b1 * *m + ob1 * g;
                *v = b2 * *v + ob2 * g * g;
                *w -= step_size * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
    }
}
