use serde::{Deserialize, Serialize};

use super::ops::Scalar;

/// Handle to one named tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct P(pub(crate) usize);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in elements within the flat parameter vector.
    pub offset: usize,
}

impl TensorInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// All trainable tensors stored back to back in one flat vector. Gradients
/// and optimizer moments share the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    tensors: Vec<TensorInfo>,
    data: Vec<T>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self {
            tensors: Vec::new(),
            data: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub(crate) fn add(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<T>) -> P {
        let info = TensorInfo {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.data.len(),
        };
        assert_eq!(
            info.numel(),
            values.len(),
            "tensor {} has wrong length",
            info.name
        );
        self.data.extend(values);
        self.tensors.push(info);
        P(self.tensors.len() - 1)
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn flat(&self) -> &[T] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn range(&self, p: P) -> std::ops::Range<usize> {
        let t = &self.tensors[p.0];
        t.offset..t.offset + t.numel()
    }

    pub fn get(&self, p: P) -> &[T] {
        &self.data[self.range(p)]
    }

    pub fn find(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor_by_name(&self, name: &str) -> Option<&[T]> {
        self.find(name)
            .map(|t| &self.data[t.offset..t.offset + t.numel()])
    }

    pub fn tensor_by_name_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let t = self.find(name)?.clone();
        Some(&mut self.data[t.offset..t.offset + t.numel()])
    }

    pub fn zeros_like(&self) -> Vec<T> {
        vec![T::zero(); self.data.len()]
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self.tensors.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

/// Gradient buffer laid out like a [`ParamSet`].
pub struct Grads<'a, T> {
    pub(crate) layout: &'a [TensorInfo],
    pub(crate) data: &'a mut [T],
}

impl<'a, T: Scalar> Grads<'a, T> {
    pub fn new(params: &'a ParamSet<T>, data: &'a mut [T]) -> Self {
        assert_eq!(params.len(), data.len());
        Self {
            layout: params.tensors(),
            data,
        }
    }

    fn bounds(&self, p: P) -> (usize, usize) {
        let t = &self.layout[p.0];
        (t.offset, t.offset + t.numel())
    }

    pub fn get_mut(&mut self, p: P) -> &mut [T] {
        let (a, b) = self.bounds(p);
        &mut self.data[a..b]
    }

    /// Two disjoint gradient slices at once (weight and bias).
    pub fn pair_mut(&mut self, first: P, second: P) -> (&mut [T], &mut [T]) {
        let (a0, a1) = self.bounds(first);
        let (b0, b1) = self.bounds(second);
        assert!(a1 <= b0 || b1 <= a0, "overlapping tensors");
        if a0 < b0 {
            let (lo, hi) = self.data.split_at_mut(b0);
            (&mut lo[a0..a1], &mut hi[..b1 - b0])
        } else {
            let (lo, hi) = self.data.split_at_mut(a0);
            let second = &mut lo[b0..b1];
            (&mut hi[..a1 - a0], second)
        }
    }
}
