use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::graph::{Gradients, ParamStore};
use crate::tensor::Element;

/// Classical momentum: `v <- mu * v + g`, `w <- w - lr * v`.
///
/// Fails without touching anything when a gradient is not finite.
pub fn sgd_momentum_step<T: Element>(
    weights: &mut [T],
    gradients: &[T],
    velocity: &mut [T],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if weights.len() != gradients.len() || weights.len() != velocity.len() {
        return Err(Error::Argument(format!(
            "misaligned update: {} weights, {} gradients, {} velocities",
            weights.len(),
            gradients.len(),
            velocity.len()
        )));
    }
    if let Some(i) = gradients.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i} is {}", gradients[i].to_f64())));
    }
    let lr = T::from_f64(lr);
    let mu = T::from_f64(momentum);
    for ((w, &g), v) in weights.iter_mut().zip(gradients).zip(velocity.iter_mut()) {
        *v = mu * *v + g;
        *w = *w - lr * *v;
    }
    Ok(())
}

/// Momentum SGD over every trainable tensor of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct SgdMomentum<T> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: IndexMap<String, Vec<T>>,
}

impl<T: Element> SgdMomentum<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        SgdMomentum {
            lr,
            momentum,
            weight_decay,
            velocity: IndexMap::new(),
        }
    }

    /// Applies one update. Every gradient is checked first, so a non-finite
    /// value aborts the step with the weights untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        for (key, g) in &grads.params {
            if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of `{key}` at entry {i}")));
            }
        }
        let decay = T::from_f64(self.weight_decay);
        for (key, p) in params.entries_mut() {
            if !p.trainable {
                continue;
            }
            let Some(g) = grads.params.get(key) else {
                continue;
            };
            let v = self
                .velocity
                .entry(key.clone())
                .or_insert_with(|| vec![T::ZERO; g.len()]);
            let w = p.value.data_mut();
            if self.weight_decay != 0.0 {
                let decayed: Vec<T> = g.data().iter().zip(w.iter()).map(|(&g, &w)| g + decay * w).collect();
                sgd_momentum_step(w, &decayed, v, self.lr, self.momentum)?;
            } else {
                sgd_momentum_step(w, g.data(), v, self.lr, self.momentum)?;
            }
        }
        Ok(())
    }
}
