use ndarray::{Array1, Array2, Array3};

use crate::error::{Result, VceError};

/// A named, immutable, row-major f32 array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        if shape.is_empty() {
            return Err(VceError::Shape(format!("tensor `{name}` has rank 0")));
        }
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(VceError::Shape(format!(
                "tensor `{name}`: shape {shape:?} needs {count} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { name, shape, data })
    }

    /// A one-element tensor of shape `[1]`.
    pub fn scalar(name: impl Into<String>, value: f32) -> Self {
        Self {
            name: name.into(),
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(name: impl Into<String>, data: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_array1(name: impl Into<String>, a: &Array1<f32>) -> Self {
        Self::from_vec(name, a.iter().copied().collect())
    }

    pub fn from_array2(name: impl Into<String>, a: &Array2<f32>) -> Self {
        let (r, c) = a.dim();
        Self {
            name: name.into(),
            shape: vec![r, c],
            data: a.iter().copied().collect(),
        }
    }

    pub fn from_array3(name: impl Into<String>, a: &Array3<f32>) -> Self {
        let (x, y, z) = a.dim();
        Self {
            name: name.into(),
            shape: vec![x, y, z],
            data: a.iter().copied().collect(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn byte_len(&self) -> usize {
        4 * self.data.len()
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn to_array1(&self) -> Result<Array1<f32>> {
        if self.shape.len() != 1 {
            return Err(self.rank_error(1));
        }
        Ok(Array1::from(self.data.clone()))
    }

    pub fn to_array2(&self) -> Result<Array2<f32>> {
        match self.shape[..] {
            [r, c] => Ok(Array2::from_shape_vec((r, c), self.data.clone())
                .expect("element count checked at construction")),
            _ => Err(self.rank_error(2)),
        }
    }

    pub fn to_array3(&self) -> Result<Array3<f32>> {
        match self.shape[..] {
            [x, y, z] => Ok(Array3::from_shape_vec((x, y, z), self.data.clone())
                .expect("element count checked at construction")),
            _ => Err(self.rank_error(3)),
        }
    }

    /// Value of a shape-`[1]` tensor.
    pub fn scalar_value(&self) -> Result<f32> {
        if self.data.len() != 1 {
            return Err(VceError::Shape(format!(
                "tensor `{}` is not a scalar (shape {:?})",
                self.name, self.shape
            )));
        }
        Ok(self.data[0])
    }

    fn rank_error(&self, want: usize) -> VceError {
        VceError::Shape(format!(
            "tensor `{}`: expected rank {want}, got shape {:?}",
            self.name, self.shape
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_count_mismatch_and_rank_zero() {
        assert!(Tensor::new("a", vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new("a", vec![], vec![]).is_err());
    }

    #[test]
    fn zero_extent_is_allowed() {
        let t = Tensor::new("e", vec![0, 5], vec![]).unwrap();
        assert_eq!(t.numel(), 0);
        assert_eq!(t.to_array2().unwrap().dim(), (0, 5));
    }

    #[test]
    fn array_views_round_trip() {
        let a = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f32);
        let t = Tensor::from_array2("m", &a);
        assert_eq!(t.shape(), &[3, 4]);
        assert_eq!(t.to_array2().unwrap(), a);
        assert!(t.to_array3().is_err());
    }
}
