//! SGD with momentum and decoupled-from-BN weight decay.

use indexmap::IndexMap;

use crate::autograd::Gradients;
use crate::backbone::{Bound, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Conv and linear weights decay; BN affine parameters and biases do not.
pub fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

/// One in-place update: `g' = g + wd·θ`, `v ← μ·v + g'`, `θ ← θ − lr·v`.
pub fn sgd_step<T: Scalar>(theta: &mut [T], grad: &[T], velocity: &mut [T], momentum: f64, wd: f64, lr: f64) {
    let (mu, wd, lr) = (T::of(momentum), T::of(wd), T::of(lr));
    for ((t, &g), v) in theta.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        let g = g + wd * *t;
        *v = mu * *v + g;
        *t -= lr * *v;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T: Scalar = f32> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: IndexMap::new(),
        }
    }

    /// Drop all velocity buffers (they restart at zero).
    pub fn reset(&mut self) {
        self.velocity.clear();
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor<T>> {
        self.velocity.get(name)
    }

    pub fn velocities(&self) -> &IndexMap<String, Tensor<T>> {
        &self.velocity
    }

    pub fn set_velocities(&mut self, v: IndexMap<String, Tensor<T>>) {
        self.velocity = v;
    }

    /// Update every trainable parameter that received a gradient.
    ///
    /// All gradients are checked before anything is modified, so a
    /// non-finite gradient leaves parameters and velocities untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, bound: &Bound, grads: &Gradients<T>, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {lr} must be finite and ≥ 0")));
        }
        let mut updates = Vec::new();
        for (name, p) in params.iter() {
            if !p.trainable {
                continue;
            }
            let Ok(var) = bound.get(name) else { continue };
            let Some(g) = grads.get(var) else { continue };
            if let Some(bad) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of `{name}` at flat index {bad} is {:?}",
                    g.data()[bad]
                )));
            }
            updates.push((name.to_string(), g));
        }
        for (name, g) in updates {
            let p = params.get_mut(&name).expect("present");
            let wd = if decays(&name) { self.weight_decay } else { 0.0 };
            let v = self
                .velocity
                .entry(name)
                .or_insert_with(|| Tensor::zeros(p.value.shape().to_vec()));
            sgd_step(p.value.data_mut(), g.data(), v.data_mut(), self.momentum, wd, lr);
        }
        Ok(())
    }
}
