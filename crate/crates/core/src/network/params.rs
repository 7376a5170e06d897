use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Which side of the statistics-pooling layer a tensor lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    PrePooling,
    PostPooling,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub group: Group,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>, group: Group) -> Self {
        let n = shape.iter().product();
        Self { name: name.into(), shape, data: vec![T::zero(); n], group }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row `r` of a tensor viewed as `[shape[0], rest]`.
    pub fn row(&self, r: usize) -> &[T] {
        let w = self.data.len() / self.shape[0];
        &self.data[r * w..(r + 1) * w]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let w = self.data.len() / self.shape[0];
        &mut self.data[r * w..(r + 1) * w]
    }
}

/// Named tensors in a fixed order. Gradients share the same structure.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    pub tensors: Vec<Tensor<T>>,
}

pub type Gradients<T> = ParamSet<T>;

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { tensors: Vec::new() }
    }

    pub fn push(&mut self, t: Tensor<T>) {
        debug_assert!(self.find(&t.name).is_none(), "duplicate tensor {}", t.name);
        self.tensors.push(t);
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.iter().find(|t| t.name == name).ok_or_else(|| Error::Shape(format!("missing tensor `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors.iter_mut().find(|t| t.name == name).ok_or_else(|| Error::Shape(format!("missing tensor `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.find(name).is_some()
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.find(name).map(|i| self.tensors.remove(i))
    }

    pub fn zeros_like(&self) -> Self {
        Self { tensors: self.tensors.iter().map(|t| Tensor::zeros(t.name.clone(), t.shape.clone(), t.group)).collect() }
    }

    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn is_congruent(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len() && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub fn check_congruent(&self, other: &Self) -> Result<()> {
        if self.is_congruent(other) {
            Ok(())
        } else {
            Err(Error::Shape("parameter sets are not shape-congruent".into()))
        }
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.tensors.iter().find(|t| !t.data.iter().all(|v| v.is_finite())).map(|t| t.name.as_str())
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn add_scaled(&mut self, alpha: T, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            crate::real::axpy(alpha, &b.data, &mut a.data);
        }
    }

    pub fn scale(&mut self, alpha: T) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v *= alpha);
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor { name: t.name.clone(), shape: t.shape.clone(), data: t.data.iter().map(|v| U::lit(v.as_f64())).collect(), group: t.group })
                .collect(),
        }
    }

    /// Sum of `alpha * g` contributions in the given order. Used to reduce
    /// per-item gradients deterministically.
    pub fn sum_in_order<'a>(&mut self, parts: impl IntoIterator<Item = &'a Self>) {
        for p in parts {
            self.add_scaled(T::one(), p);
        }
    }
}
