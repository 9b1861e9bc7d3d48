//! Dense row-major `f64` tensors.
//!
//! Feature maps use the NCHW layout; matrices are plain rank-2 tensors.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Dimensions of an NCHW tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            s => Err(shape_err!("expected NCHW tensor, got shape {:?}", s)),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(shape_err!("expected matrix, got shape {:?}", s)),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Selects samples along the batch axis of an NCHW tensor.
    pub fn select_batch(&self, indices: &[usize]) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        let per = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            if i >= n {
                return Err(shape_err!("batch index {} out of range {}", i, n));
            }
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        Tensor::new(vec![indices.len(), c, h, w], data)
    }

    /// Concatenates NCHW tensors along the batch axis.
    pub fn stack_batch(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("cannot stack an empty list"))?;
        // C×H×W images count as batches of one.
        let dims = |t: &Tensor| -> Result<(usize, usize, usize, usize)> {
            match *t.shape() {
                [c, h, w] => Ok((1, c, h, w)),
                _ => t.dims4(),
            }
        };
        let (_, c, h, w) = dims(first)?;
        let mut n_total = 0;
        let mut data = Vec::new();
        for p in parts {
            let (n, c2, h2, w2) = dims(p)?;
            if (c2, h2, w2) != (c, h, w) {
                return Err(shape_err!(
                    "stack mismatch: {:?} vs {:?}",
                    p.shape(),
                    first.shape()
                ));
            }
            n_total += n;
            data.extend_from_slice(&p.data);
        }
        Tensor::new(vec![n_total, c, h, w], data)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
