//! Adam optimizer. State (first/second moments) lives for one training call
//! and is reset at the start of every call, keeping rounds independent.

use super::ModelParamsOf;
use crate::scalar::Real;

pub(crate) struct Adam<S> {
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    t: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl<S: Real> Adam<S> {
    pub fn new(params: &ModelParamsOf<S>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<S>> = params
            .tensors()
            .iter()
            .map(|t| vec![S::zero(); t.data.len()])
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            lr,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step(&mut self, params: &mut ModelParamsOf<S>, grads: &[Vec<S>]) {
        self.t += 1;
        let b1 = S::of_f64(self.beta1);
        let b2 = S::of_f64(self.beta2);
        let one = S::one();
        let bc1 = S::of_f64(1.0 - self.beta1.powi(self.t));
        let bc2 = S::of_f64(1.0 - self.beta2.powi(self.t));
        let lr = S::of_f64(self.lr);
        let eps = S::of_f64(self.eps);
        for (ti, tensor) in params.tensors_mut().iter_mut().enumerate() {
            let m = &mut self.m[ti];
            let v = &mut self.v[ti];
            let g = &grads[ti];
            for i in 0..tensor.data.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                tensor.data[i] = tensor.data[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
