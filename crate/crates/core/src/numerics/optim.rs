use super::{ParameterStore, Real};
use crate::error::{Error, Result};

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay
/// folded into the velocity:
///
/// ```text
/// v ← μ·v + g + λ·w
/// w ← w − lr·v
/// ```
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for Sgd {
    fn default() -> Self {
        Sgd {
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

impl Sgd {
    /// Applies one update to every parameter and clears the gradients.
    /// Fails before touching anything if any parameter lacks a gradient.
    pub fn step<F: Real>(&self, store: &mut ParameterStore<F>, lr: f64) -> Result<()> {
        if let Some((path, _)) = store.iter().find(|(_, t)| t.grad.is_none()) {
            return Err(Error::MissingGrad(path.to_string()));
        }
        let mu = F::c(self.momentum);
        let wd = F::c(self.weight_decay);
        let lr = F::c(lr);
        let (entries, velocity) = store.parts_mut();
        for (path, t) in entries.iter_mut() {
            let g = t.grad.take().expect("checked above");
            let v = velocity
                .get_mut(path)
                .ok_or_else(|| Error::UnknownParam(path.clone()))?;
            for ((w, vi), gi) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = mu * *vi + gi + wd * *w;
                *w -= lr * *vi;
            }
        }
        store.set_step_count(store.step_count() + 1);
        Ok(())
    }

    /// Like [`Sgd::step`] but only parameters whose path satisfies `keep`
    /// move; the others keep their values and velocity and lose their
    /// gradient.
    pub fn step_where<F: Real>(&self, store: &mut ParameterStore<F>, lr: f64, keep: impl Fn(&str) -> bool) -> Result<()> {
        if let Some((path, _)) = store.iter().find(|(p, t)| keep(p) && t.grad.is_none()) {
            return Err(Error::MissingGrad(path.to_string()));
        }
        let mu = F::c(self.momentum);
        let wd = F::c(self.weight_decay);
        let lr = F::c(lr);
        let (entries, velocity) = store.parts_mut();
        for (path, t) in entries.iter_mut() {
            let g = t.grad.take();
            if !keep(path) {
                continue;
            }
            let g = g.expect("checked above");
            let v = velocity
                .get_mut(path)
                .ok_or_else(|| Error::UnknownParam(path.clone()))?;
            for ((w, vi), gi) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = mu * *vi + gi + wd * *w;
                *w -= lr * *vi;
            }
        }
        store.set_step_count(store.step_count() + 1);
        Ok(())
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm` and
/// returns the norm before scaling. Parameters without a gradient are
/// ignored.
pub fn clip_grad_norm<F: Real>(store: &mut ParameterStore<F>, max_norm: f64) -> f64 {
    let (entries, _) = store.parts_mut();
    let sq: f64 = entries
        .values()
        .filter_map(|t| t.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|&v| {
            let v = v.to_f64().unwrap_or(f64::NAN);
            v * v
        })
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = F::c(max_norm / norm);
        for g in entries.values_mut().filter_map(|t| t.grad.as_mut()) {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Convenience wrapper using the default momentum 0.9 and decay 1e-4.
pub fn sgd_step<F: Real>(store: &mut ParameterStore<F>, lr: f64) -> Result<()> {
    Sgd::default().step(store, lr)
}
