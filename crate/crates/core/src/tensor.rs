//! Dense row-major `f32` tensors and named parameter sets.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{ensure, Result};

/// Immutable dense tensor. Cloning shares the buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        ensure!(
            n == data.len(),
            Shape,
            "shape {:?} needs {} values, got {}",
            shape,
            n,
            data.len()
        );
        Ok(Self { shape, data: Arc::new(data) })
    }

    /// Panics on a length mismatch; used where the shape is computed locally.
    pub(crate) fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data: Arc::new(data) }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_vec(shape.to_vec(), vec![0.0; n])
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self::from_vec(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f32) -> Self {
        Self::from_vec(vec![], vec![value])
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f32, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| rng.sample::<f32, _>(StandardNormal) * std)
            .collect();
        Self::from_vec(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Mutable access; copies the buffer if it is shared.
    pub fn data_mut(&mut self) -> &mut [f32] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<f32> {
        Arc::try_unwrap(self.data).unwrap_or_else(|a| (*a).clone())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        ensure!(n == self.len(), Shape, "cannot reshape {:?} to {:?}", self.shape, shape);
        Ok(Self { shape: shape.to_vec(), data: Arc::clone(&self.data) })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self::from_vec(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        ensure!(
            self.shape == other.shape,
            Shape,
            "{:?} vs {:?}",
            self.shape,
            other.shape
        );
        let data = self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self::from_vec(self.shape.clone(), data))
    }

    pub fn scale(&self, c: f32) -> Self {
        self.map(|x| x * c)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&x| x as f64).sum()
    }

    pub fn mean(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.sum() / self.len() as f64
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|&x| (x as f64) * (x as f64)).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Bitwise equality of shape and every element.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Rows `[start, end)` of the leading axis.
    pub fn slice_leading(&self, start: usize, end: usize) -> Result<Self> {
        ensure!(!self.shape.is_empty(), Shape, "cannot slice a scalar");
        ensure!(
            start <= end && end <= self.shape[0],
            Shape,
            "slice {}..{} out of leading extent {}",
            start,
            end,
            self.shape[0]
        );
        let stride: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self::from_vec(shape, self.data[start * stride..end * stride].to_vec()))
    }

    /// Concatenation along the leading axis; trailing extents must agree.
    pub fn concat_leading(parts: &[&Tensor]) -> Result<Self> {
        ensure!(!parts.is_empty(), Shape, "nothing to concatenate");
        let tail = &parts[0].shape[1..];
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            ensure!(
                !p.shape.is_empty() && &p.shape[1..] == tail,
                Shape,
                "trailing extents {:?} vs {:?}",
                &p.shape.get(1..),
                tail
            );
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = parts[0].shape.clone();
        shape[0] = lead;
        Ok(Self::from_vec(shape, data))
    }

    pub(crate) fn hash_into(&self, hasher: &mut Sha256) {
        for s in &self.shape {
            hasher.update((*s as u64).to_le_bytes());
        }
        for x in self.data.iter() {
            hasher.update(x.to_le_bytes());
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Named parameters with a per-entry trainable flag. Ordered by name so
/// iteration, hashing and serialization are deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        self.entries.insert(name.into(), Param { value, trainable });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| crate::Error::Invalid(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.entries.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
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

    /// Sets the trainable flag on every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in self.entries.values_mut() {
            p.trainable = trainable;
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.entries.values().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn extend(&mut self, other: ParamSet) {
        self.entries.extend(other.entries);
    }

    /// SHA-256 over names, shapes and raw values of parameters matching `prefix`.
    pub fn hash_prefix(&self, prefix: &str) -> String {
        let mut hasher = Sha256::new();
        for (name, p) in self.entries.iter().filter(|(n, _)| n.starts_with(prefix)) {
            hasher.update(name.as_bytes());
            p.value.hash_into(&mut hasher);
        }
        hex::encode(hasher.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap().len(), 6);
    }

    #[test]
    fn clone_then_mutate_does_not_alias() {
        let a = Tensor::zeros(&[3]);
        let mut b = a.clone();
        b.data_mut()[0] = 1.0;
        assert_eq!(a.data()[0], 0.0);
    }

    #[test]
    fn leading_slice_and_concat_invert() {
        let t = Tensor::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let a = t.slice_leading(0, 1).unwrap();
        let b = t.slice_leading(1, 3).unwrap();
        assert!(Tensor::concat_leading(&[&a, &b]).unwrap().bit_eq(&t));
    }

    #[test]
    fn hash_ignores_other_prefixes() {
        let mut p = ParamSet::new();
        p.insert("a.w", Tensor::zeros(&[2]), false);
        p.insert("b.w", Tensor::zeros(&[2]), true);
        let before = p.hash_prefix("a.");
        p.get_mut("b.w").unwrap().value.data_mut()[0] = 3.0;
        assert_eq!(before, p.hash_prefix("a."));
        p.get_mut("a.w").unwrap().value.data_mut()[1] = 3.0;
        assert_ne!(before, p.hash_prefix("a."));
    }
}
