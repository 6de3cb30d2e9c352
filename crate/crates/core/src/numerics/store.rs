use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Every trainable array of a model, addressed by a stable path such as
/// `gnn.edge.0.weight`, together with the optimizer state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore<F> {
    entries: BTreeMap<String, Tensor<F>>,
    velocity: BTreeMap<String, Vec<F>>,
    step: u64,
}

impl<F: Real> ParameterStore<F> {
    pub fn new() -> Self {
        ParameterStore {
            entries: BTreeMap::new(),
            velocity: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, path: impl Into<String>, t: Tensor<F>) {
        let path = path.into();
        self.velocity
            .insert(path.clone(), vec![F::zero(); t.len()]);
        self.entries.insert(path, t);
    }

    pub fn remove(&mut self, path: &str) -> Option<Tensor<F>> {
        self.velocity.remove(path);
        self.entries.remove(path)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn get(&self, path: &str) -> Result<&Tensor<F>> {
        self.entries
            .get(path)
            .ok_or_else(|| Error::UnknownParam(path.to_string()))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor<F>> {
        self.entries
            .get_mut(path)
            .ok_or_else(|| Error::UnknownParam(path.to_string()))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub(crate) fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }

    pub fn velocity(&self, path: &str) -> Result<&[F]> {
        self.velocity
            .get(path)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownParam(path.to_string()))
    }

    pub(crate) fn velocity_mut(&mut self, path: &str) -> Result<&mut Vec<F>> {
        self.velocity
            .get_mut(path)
            .ok_or_else(|| Error::UnknownParam(path.to_string()))
    }

    #[allow(clippy::type_complexity)]
    pub(crate) fn parts_mut(
        &mut self,
    ) -> (
        &mut BTreeMap<String, Tensor<F>>,
        &mut BTreeMap<String, Vec<F>>,
    ) {
        (&mut self.entries, &mut self.velocity)
    }

    /// Gives every parameter a zero gradient buffer if it has none.
    pub fn ensure_grads(&mut self) {
        for t in self.entries.values_mut() {
            if t.grad.is_none() {
                t.grad = Some(vec![F::zero(); t.len()]);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for t in self.entries.values_mut() {
            t.grad = None;
        }
    }

    pub fn add_grad(&mut self, path: &str, g: &[F]) -> Result<()> {
        let t = self.get_mut(path)?;
        if g.len() != t.len() {
            return Err(Error::ShapeMismatch {
                op: "add_grad",
                left: t.shape().to_vec(),
                right: vec![g.len()],
            });
        }
        let len = t.len();
        let buf = t.grad.get_or_insert_with(|| vec![F::zero(); len]);
        for (o, &v) in buf.iter_mut().zip(g) {
            *o += v;
        }
        Ok(())
    }

    pub fn grad(&self, path: &str) -> Result<Option<&[F]>> {
        Ok(self.get(path)?.grad.as_deref())
    }

    /// Affine weight `[fan_in × fan_out]` drawn uniformly from
    /// ±sqrt(6 / (fan_in + fan_out)).
    pub fn init_xavier(&mut self, path: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| F::c(rng.random_range(-bound..bound)))
            .collect();
        self.insert(
            path,
            Tensor::new(vec![fan_in, fan_out], data).expect("extent"),
        );
    }

    pub fn init_zeros(&mut self, path: &str, shape: Vec<usize>) {
        self.insert(path, Tensor::zeros(shape));
    }

    /// Square matrix `1/n` plus Gaussian noise of the given standard
    /// deviation.
    pub fn init_uniform_adjacency(&mut self, path: &str, n: usize, sigma: f64, rng: &mut impl Rng) {
        let normal = Normal::new(0.0, sigma).expect("sigma finite");
        let base = 1.0 / n as f64;
        let data = (0..n * n)
            .map(|_| F::c(base + normal.sample(rng)))
            .collect();
        self.insert(path, Tensor::new(vec![n, n], data).expect("extent"));
    }

    /// Registers a multilayer perceptron with the given layer widths
    /// (`widths[0]` is the input width). Paths are `{prefix}.{i}.weight` and
    /// `{prefix}.{i}.bias`.
    pub fn init_mlp(&mut self, prefix: &str, widths: &[usize], rng: &mut impl Rng) {
        for (i, w) in widths.windows(2).enumerate() {
            self.init_xavier(&format!("{prefix}.{i}.weight"), w[0], w[1], rng);
            self.init_zeros(&format!("{prefix}.{i}.bias"), vec![w[1]]);
        }
    }

    /// Number of layers of the perceptron registered under `prefix`.
    pub fn mlp_depth(&self, prefix: &str) -> usize {
        (0..)
            .take_while(|i| self.contains(&format!("{prefix}.{i}.weight")))
            .count()
    }

    /// Copies every entry whose path starts with `prefix`.
    pub fn clone_prefix(&self, prefix: &str) -> Vec<(String, Tensor<F>)> {
        self.entries
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }
}
