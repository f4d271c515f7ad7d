use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Dense row-major f64 tensor with an optional gradient accumulator.
///
/// `grad` is present exactly when `requires_grad` is set (unless it was moved
/// out with [`Tensor::take_grad`]).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Builds a tensor, checking extents, length and finiteness.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&s| s == 0) {
            return Err(Error::Dimension(format!(
                "zero extent in shape {shape:?}"
            )));
        }
        if numel(shape) != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(shape),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("Tensor::new"));
        }
        Ok(Self::from_raw(shape.to_vec(), data))
    }

    /// Unchecked constructor for op outputs that are validated separately.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_raw(shape.to_vec(), vec![0.0; numel(shape)])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::from_raw(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_raw(Vec::new(), vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let data = (0..numel(shape)).map(&mut f).collect();
        Self::from_raw(shape.to_vec(), data)
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut (impl Rng + ?Sized)) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
    }

    /// Xavier/Glorot uniform init for a `fan_in x fan_out` matrix.
    pub fn xavier(fan_in: usize, fan_out: usize, rng: &mut (impl Rng + ?Sized)) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self::from_fn(&[fan_in, fan_out], |_| rng.gen_range(-bound..bound))
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of range on axis {i}");
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Turning the flag on allocates a zero accumulator; turning it off drops it.
    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        self.grad = flag.then(|| vec![0.0; self.data.len()]);
    }

    pub fn with_grad(mut self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Moves the accumulator out, leaving none behind.
    pub fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    /// Adds `scale * g` into the accumulator (allocating it if it was taken).
    pub fn accumulate_grad(&mut self, g: &[f64], scale: f64) -> Result<()> {
        if !self.requires_grad {
            return Err(Error::Contract(
                "accumulating into a tensor without requires_grad".into(),
            ));
        }
        if g.len() != self.data.len() {
            return Err(Error::Dimension(format!(
                "gradient of length {} for tensor of shape {:?}",
                g.len(),
                self.shape
            )));
        }
        let acc = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (a, &v) in acc.iter_mut().zip(g) {
            *a += scale * v;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Named parameters in deterministic (sorted) order.
///
/// Entries normally carry `requires_grad`; frozen weights (a pretrained base
/// model) are stored with the flag cleared and are skipped by the optimizer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a trainable parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, mut t: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        if !t.requires_grad() {
            t.set_requires_grad(true);
        }
        self.entries.insert(name, t);
        Ok(())
    }

    /// Inserts a tensor that never receives gradients.
    pub fn insert_frozen(&mut self, name: impl Into<String>, mut t: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        t.set_requires_grad(false);
        self.entries.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|t| t.requires_grad())
            .map(Tensor::numel)
            .sum()
    }

    pub fn zero_grad(&mut self) {
        self.entries.values_mut().for_each(Tensor::zero_grad);
    }

    /// Clears `requires_grad` on every entry whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for (name, t) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                t.set_requires_grad(false);
            }
        }
    }

    /// Sets `requires_grad` on every entry whose name starts with `prefix`.
    pub fn unfreeze_prefix(&mut self, prefix: &str) {
        for (name, t) in self.entries.iter_mut() {
            if name.starts_with(prefix) && !t.requires_grad() {
                t.set_requires_grad(true);
            }
        }
    }

    /// Absorbs all entries of `other`; names must not collide.
    pub fn extend(&mut self, other: ParamSet) -> Result<()> {
        for (name, t) in other.entries {
            if self.entries.contains_key(&name) {
                return Err(Error::Contract(format!("duplicate parameter `{name}`")));
            }
            self.entries.insert(name, t);
        }
        Ok(())
    }
}
