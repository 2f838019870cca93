use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major block of 64-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn from_array2(a: Array2<f64>) -> Self {
        let shape = a.shape().to_vec();
        let data = if a.is_standard_layout() { a.into_raw_vec_and_offset().0 } else { a.iter().copied().collect() };
        Self { shape, data }
    }

    pub fn from_array1(a: Array1<f64>) -> Self {
        Self { shape: vec![a.len()], data: a.to_vec() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn view2(&self) -> ArrayView2<'_, f64> {
        assert_eq!(self.shape.len(), 2, "expected a matrix, shape {:?}", self.shape);
        ArrayView2::from_shape((self.shape[0], self.shape[1]), &self.data).expect("consistent shape")
    }

    pub fn view2_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        assert_eq!(self.shape.len(), 2, "expected a matrix, shape {:?}", self.shape);
        ArrayViewMut2::from_shape((self.shape[0], self.shape[1]), &mut self.data).expect("consistent shape")
    }

    pub fn view1(&self) -> ArrayView1<'_, f64> {
        assert_eq!(self.shape.len(), 1, "expected a vector, shape {:?}", self.shape);
        ArrayView1::from(&self.data[..])
    }

    pub fn view1_mut(&mut self) -> ArrayViewMut1<'_, f64> {
        assert_eq!(self.shape.len(), 1, "expected a vector, shape {:?}", self.shape);
        ArrayViewMut1::from(&mut self.data[..])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_checked() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::from_vec(&[2, 3], (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(t.view2()[[1, 0]], 3.0);
        let back = Tensor::from_array2(t.view2().t().to_owned());
        assert_eq!(back.shape(), &[3, 2]);
        assert_eq!(back.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }
}
