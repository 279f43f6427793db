use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for a list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
    pub hyper: AdamHyper,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>], hyper: AdamHyper) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            t: 0,
            hyper,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam: {} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.len() != m.len() {
                return Err(Error::Shape(format!(
                    "adam: parameter {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        self.t += 1;
        let h = self.hyper;
        let b1 = T::from_f64(h.beta1);
        let b2 = T::from_f64(h.beta2);
        let c1 = T::from_f64(1.0 - h.beta1.powi(self.t as i32));
        let c2 = T::from_f64(1.0 - h.beta2.powi(self.t as i32));
        let lr = T::from_f64(h.lr);
        let eps = T::from_f64(h.eps);
        let one = T::one();
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((p, g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + (one - b1) * *g;
                *v = b2 * *v + (one - b2) * *g * *g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p = *p - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
