//! Dense row-major `f32` tensors and the `[H, W, C]` image view used by
//! every pipeline stage.

use crate::error::{Error, Result};

/// A dense row-major tensor of 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected = checked_len(&dims)?;
        if data.len() != expected {
            return Err(Error::shape(format!(
                "dims {dims:?} need {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        let len = checked_len(&dims)?;
        Ok(Self {
            dims,
            data: vec![0.0; len],
        })
    }

    pub fn filled(dims: Vec<usize>, value: f32) -> Result<Self> {
        let len = checked_len(&dims)?;
        Ok(Self {
            dims,
            data: vec![value; len],
        })
    }

    /// Builds a tensor from `f64` values, rounding each to the nearest `f32`.
    pub fn from_f64(dims: Vec<usize>, values: &[f64]) -> Result<Self> {
        Self::new(dims, values.iter().map(|&v| v as f32).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn map(&self, mut f: impl FnMut(f32) -> f32) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Returns a tensor with the same dims and `data` replaced.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Self::new(self.dims.clone(), data)
    }

    pub fn ensure_same_dims(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "{what}: dims {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::Numerical(format!(
                "non-finite value {} at flat index {i}",
                self.data[i]
            ))),
            None => Ok(()),
        }
    }

    /// Interprets the tensor as `[H, W, C]`.
    pub fn hwc(&self) -> Result<(usize, usize, usize)> {
        match self.dims.as_slice() {
            &[h, w, c] => Ok((h, w, c)),
            other => Err(Error::shape(format!("expected [H, W, C], got {other:?}"))),
        }
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Splits a leading batch axis: `[N, ...]` into `N` tensors of shape `[...]`.
    pub fn unstack(&self) -> Result<Vec<Tensor>> {
        if self.dims.len() < 2 {
            return Err(Error::shape(format!("cannot unstack tensor with dims {:?}", self.dims)));
        }
        let inner: Vec<usize> = self.dims[1..].to_vec();
        let stride: usize = inner.iter().product();
        self.data
            .chunks(stride)
            .map(|chunk| Tensor::new(inner.clone(), chunk.to_vec()))
            .collect()
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("cannot stack an empty list"))?;
        let mut dims = vec![items.len()];
        dims.extend_from_slice(&first.dims);
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            first.ensure_same_dims(t, "stack")?;
            data.extend_from_slice(&t.data);
        }
        Tensor::new(dims, data)
    }
}

fn checked_len(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() {
        return Err(Error::shape("tensor must have at least one dimension"));
    }
    if dims.contains(&0) {
        return Err(Error::shape(format!("zero-sized dimension in {dims:?}")));
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::shape(format!("element count overflows for dims {dims:?}")))
}

/// An `[H, W, C]` tensor with `C ∈ {1, 3}`, `H, W ≥ 8` and every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor(Tensor);

impl ImageTensor {
    pub const MIN_SIDE: usize = 8;

    pub fn new(tensor: Tensor) -> Result<Self> {
        let (h, w, c) = tensor.hwc()?;
        if c != 1 && c != 3 {
            return Err(Error::Unsupported(format!("images need 1 or 3 channels, got {c}")));
        }
        if h < Self::MIN_SIDE || w < Self::MIN_SIDE {
            return Err(Error::shape(format!(
                "images must be at least {0}x{0}, got {h}x{w}",
                Self::MIN_SIDE
            )));
        }
        if let Some(v) = tensor.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Numerical(format!("image value {v} outside [0, 1]")));
        }
        Ok(Self(tensor))
    }

    /// Clamps into `[0, 1]` (NaN becomes 0) and validates the shape.
    pub fn from_clamped(tensor: Tensor) -> Result<Self> {
        let clamped = tensor.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        Self::new(clamped)
    }

    pub fn height(&self) -> usize {
        self.0.dims[0]
    }

    pub fn width(&self) -> usize {
        self.0.dims[1]
    }

    pub fn channels(&self) -> usize {
        self.0.dims[2]
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

impl AsRef<Tensor> for ImageTensor {
    fn as_ref(&self) -> &Tensor {
        &self.0
    }
}

impl TryFrom<Tensor> for ImageTensor {
    type Error = Error;

    fn try_from(t: Tensor) -> Result<Self> {
        ImageTensor::new(t)
    }
}
