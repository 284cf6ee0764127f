use crate::{Grads, ParamSet, Scalar, Tensor};

/// Adam with bias correction, no weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(params: &ParamSet<F>, lr: f64) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect()
        };
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Rebuilds an optimizer from saved moment buffers.
    pub fn from_state(lr: f64, step: u64, m: Vec<Tensor<F>>, v: Vec<Tensor<F>>) -> Self {
        assert_eq!(m.len(), v.len(), "moment buffer count mismatch");
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<F>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor<F>] {
        &self.v
    }

    pub fn step(&mut self, params: &mut ParamSet<F>, grads: &Grads<F>) {
        assert_eq!(params.len(), grads.len(), "grads do not match params");
        assert_eq!(
            params.len(),
            self.m.len(),
            "optimizer state does not match params"
        );
        self.step += 1;
        let t = self.step as i32;
        let b1 = F::from_f64_lossy(self.beta1);
        let b2 = F::from_f64_lossy(self.beta2);
        let one = F::one();
        let bc1 = F::from_f64_lossy(1.0 - self.beta1.powi(t));
        let bc2 = F::from_f64_lossy(1.0 - self.beta2.powi(t));
        let lr = F::from_f64_lossy(self.lr);
        let eps = F::from_f64_lossy(self.eps);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            let pd = p.value.data_mut();
            for (((w, &gv), mv), vv) in pd
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
