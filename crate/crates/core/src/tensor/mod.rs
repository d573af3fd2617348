//! Dense real tensors and the reverse-mode tape that differentiates them.
//!
//! [`Tensor`] is a plain immutable value (row-major `f64` storage plus an
//! explicit [`DType`]). Values tagged `F32` are rounded to single precision
//! whenever an operation produces them, so an `F32` run behaves like single
//! precision arithmetic with double precision accumulation. [`Var`] is a
//! tensor recorded on a [`Tape`]; [`Tape::backward`] returns gradients for
//! every node.

mod io;
mod kernels;
mod tape;

pub use io::{read_tensor, write_tensor, RSVH_MAGIC, RSVH_VERSION};
pub use kernels::{
    conv2d_forward, matmul_into, matmul_nt_into, matmul_tn_into, pixel_shuffle_forward,
    pixel_unshuffle,
};
pub use tape::{Gradients, KinkSignature, Tape, Var};
/// Scalar GELU (tanh form), matching [`Var::gelu`].
pub fn gelu(x: f64) -> f64 {
    tape::gelu(x)
}

use crate::error::{Error, Result};
use crate::rng::Xoshiro256pp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u32 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn promote(self, other: DType) -> DType {
        if self == DType::F64 || other == DType::F64 {
            DType::F64
        } else {
            DType::F32
        }
    }

    /// Rounds storage to this precision in place.
    pub fn round_slice(self, data: &mut [f64]) {
        if self == DType::F32 {
            for v in data {
                *v = *v as f32 as f64;
            }
        }
    }
}

impl std::str::FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(Error::Config(format!("unknown dtype `{other}`"))),
        }
    }
}

impl std::fmt::Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::with_dtype(shape, data, DType::F64)
    }

    pub fn with_dtype(shape: &[usize], mut data: Vec<f64>, dtype: DType) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        dtype.round_slice(&mut data);
        Ok(Self {
            shape: shape.to_vec(),
            dtype,
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            dtype: DType::F64,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            dtype: DType::F64,
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Uniform values in `[lo, hi)`.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Xoshiro256pp) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.uniform_in(lo, hi)).collect();
        Self {
            shape: shape.to_vec(),
            dtype: DType::F64,
            data,
        }
    }

    /// Normal values with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Xoshiro256pp) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| std * rng.normal()).collect();
        Self {
            shape: shape.to_vec(),
            dtype: DType::F64,
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn to_dtype(&self, dtype: DType) -> Tensor {
        let mut data = self.data.clone();
        dtype.round_slice(&mut data);
        Tensor {
            shape: self.shape.clone(),
            dtype,
            data,
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::with_dtype(shape, self.data.clone(), self.dtype)
    }

    /// Applies `f` to every element, keeping shape and dtype.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let mut data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        self.dtype.round_slice(&mut data);
        Tensor {
            shape: self.shape.clone(),
            dtype: self.dtype,
            data,
        }
    }

    /// Elementwise combination of two same-shape tensors.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "zip_map",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let dtype = self.dtype.promote(other.dtype);
        let mut data: Vec<f64> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        dtype.round_slice(&mut data);
        Ok(Tensor {
            shape: self.shape.clone(),
            dtype,
            data,
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channel `c` of a `[C, H, W]` tensor as a flat slice.
    pub fn channel(&self, c: usize) -> &[f64] {
        let plane: usize = self.shape[1..].iter().product();
        &self.data[c * plane..(c + 1) * plane]
    }

    /// Mean of each channel of a `[C, ...]` tensor.
    pub fn channel_means(&self) -> Vec<f64> {
        (0..self.shape[0])
            .map(|c| {
                let ch = self.channel(c);
                ch.iter().sum::<f64>() / ch.len() as f64
            })
            .collect()
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>, dtype: DType) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let mut data = data;
        dtype.round_slice(&mut data);
        Tensor { shape, dtype, data }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert_eq!(Tensor::scalar(3.0).numel(), 1);
    }

    #[test]
    fn f32_storage_is_rounded() {
        let t = Tensor::with_dtype(&[1], vec![0.1], DType::F32).unwrap();
        assert_eq!(t.data()[0], 0.1f32 as f64);
        assert_ne!(t.data()[0], 0.1);
    }
}
