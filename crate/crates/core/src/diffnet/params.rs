use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::Array2;

use crate::error::{Error, Result};

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed)
}

/// A named parameter tensor. Vectors are stored as `1 x k` rows and carry
/// shape `[k]`; matrices carry `[rows, cols]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Array2<f64>,
}

impl ParamTensor {
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Ordered collection of named tensors with immutable shapes.
///
/// Every store has a process-unique id so that autodiff graphs can route
/// gradients to the store that owns a parameter; clones receive a new id.
#[derive(Debug)]
pub struct ParamStore {
    id: u64,
    tensors: Vec<ParamTensor>,
    version: u64,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        ParamStore {
            id: fresh_id(),
            tensors: self.tensors.clone(),
            version: self.version,
        }
    }
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.tensors == other.tensors
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            id: fresh_id(),
            tensors: Vec::new(),
            version: 0,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn add_matrix(&mut self, name: &str, value: Array2<f64>) -> Result<usize> {
        let shape = vec![value.nrows(), value.ncols()];
        self.push(name, shape, value)
    }

    pub fn add_vector(&mut self, name: &str, value: Vec<f64>) -> Result<usize> {
        let k = value.len();
        let value = Array2::from_shape_vec((1, k), value).expect("row vector shape");
        self.push(name, vec![k], value)
    }

    /// Inserts a tensor with an explicit shape (one or two dimensions).
    pub fn add_shaped(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> Result<usize> {
        let (rows, cols) = match shape.as_slice() {
            [k] => (1, *k),
            [r, c] => (*r, *c),
            _ => {
                return Err(Error::Shape(format!(
                    "tensor `{name}` has unsupported rank {}",
                    shape.len()
                )))
            }
        };
        let value = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| Error::Shape(format!("tensor `{name}`: {e}")))?;
        self.push(name, shape, value)
    }

    fn push(&mut self, name: &str, shape: Vec<usize>, value: Array2<f64>) -> Result<usize> {
        if self.index_of(name).is_some() {
            return Err(Error::Shape(format!("duplicate parameter name `{name}`")));
        }
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("parameter `{name}` has non-finite entries")));
        }
        self.tensors.push(ParamTensor {
            name: name.to_string(),
            shape,
            value,
        });
        self.version += 1;
        Ok(self.tensors.len() - 1)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor(&self, index: usize) -> &ParamTensor {
        &self.tensors[index]
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(ParamTensor::len).sum()
    }

    /// Mutable access to a tensor's values; bumps the version counter.
    pub fn value_mut(&mut self, index: usize) -> &mut Array2<f64> {
        self.version += 1;
        &mut self.tensors[index].value
    }

    /// A store with the same names and shapes, filled with zeros.
    pub fn zeros_like(&self) -> ParamStore {
        ParamStore {
            id: fresh_id(),
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    value: Array2::zeros(t.value.raw_dim()),
                })
                .collect(),
            version: 0,
        }
    }

    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub fn ensure_same_layout(&self, other: &ParamStore) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::Shape("parameter stores have different layouts".into()))
        }
    }

    /// Overwrites all values with those of `other` (layouts must match).
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        self.ensure_same_layout(other)?;
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            dst.value.assign(&src.value);
        }
        self.version += 1;
        Ok(())
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.value.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.value.iter().all(|v| v.is_finite()))
    }

    /// Flattened values in store order, row-major within each tensor.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.value.iter().copied())
            .collect()
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.scalar_count() {
            return Err(Error::Shape(format!(
                "flat vector has {} entries, store holds {}",
                flat.len(),
                self.scalar_count()
            )));
        }
        let mut offset = 0;
        for t in &mut self.tensors {
            for (dst, src) in t.value.iter_mut().zip(&flat[offset..]) {
                *dst = *src;
            }
            offset += t.value.len();
        }
        self.version += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn names_are_unique() {
        let mut p = ParamStore::new();
        p.add_vector("b", vec![0.0; 3]).unwrap();
        assert!(p.add_vector("b", vec![0.0; 3]).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        let mut p = ParamStore::new();
        assert!(matches!(
            p.add_matrix("w", array![[f64::NAN]]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn flatten_roundtrip_and_version() {
        let mut p = ParamStore::new();
        p.add_matrix("w", array![[1.0, 2.0], [3.0, 4.0]]).unwrap();
        p.add_vector("b", vec![5.0, 6.0]).unwrap();
        let v0 = p.version();
        let flat = p.flatten();
        assert_eq!(flat, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let doubled: Vec<f64> = flat.iter().map(|v| 2.0 * v).collect();
        p.assign_flat(&doubled).unwrap();
        assert_eq!(p.flatten(), doubled);
        assert!(p.version() > v0);
        assert_eq!(p.get("b").unwrap().shape, vec![2]);
    }

    #[test]
    fn clones_get_new_ids() {
        let p = ParamStore::new();
        let q = p.clone();
        assert_ne!(p.id(), q.id());
        assert_eq!(p, q);
    }
}
