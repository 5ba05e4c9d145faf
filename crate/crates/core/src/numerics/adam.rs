use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{ParamSet, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moments for a fixed list of parameter shapes.
#[derive(Clone, Debug)]
pub struct AdamState<T: Scalar> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(shapes: &[&[usize]], config: AdamConfig) -> Self {
        let m: Vec<Tensor<T>> = shapes.iter().map(|s| Tensor::zeros(s.to_vec())).collect();
        Self { config, step: 0, v: m.clone(), m }
    }

    pub fn for_params(params: &ParamSet<T>, config: AdamConfig) -> Self {
        let shapes: Vec<&[usize]> = params.values().iter().map(Tensor::shape).collect();
        Self::new(&shapes, config)
    }

    pub fn first_moment(&self) -> &[Tensor<T>] {
        &self.m
    }

    pub fn second_moment(&self) -> &[Tensor<T>] {
        &self.v
    }

    /// Update every non-frozen parameter of `params` in place.
    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>]) -> Result<()> {
        let skip: Vec<bool> = params.ids().map(|id| params.is_frozen(id)).collect();
        self.apply(params.values_mut(), grads, &skip)
    }

    fn apply(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], skip: &[bool]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "adam: {} params, {} grads, state for {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::Shape(format!("adam: param {:?} grad {:?}", p.shape(), g.shape())));
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::one() - T::lit(c.beta1.powi(self.step as i32));
        let bc2 = T::one() - T::lit(c.beta2.powi(self.step as i32));
        let lr = T::lit(c.lr);
        let eps = T::lit(c.eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            // An all-zero gradient leaves both the parameter and its moments untouched.
            if skip[i] || g.data().iter().all(|&x| x == T::zero()) {
                continue;
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// One Adam update of `params` given `grads`.
pub fn adam_step<T: Scalar>(params: &mut [Tensor<T>], grads: &[Tensor<T>], state: &mut AdamState<T>) -> Result<()> {
    let skip = vec![false; params.len()];
    state.apply(params, grads, &skip)
}
