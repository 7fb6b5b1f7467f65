//! Dense row-major tensors of `f64` and the seeded Gaussian sampler.
//!
//! Data is stored in row-major order (last index fastest). Every public
//! constructor validates that the data length matches the shape.

use std::fmt;

use rand_xoshiro::rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};

/// Ordered list of positive extents. Rank 0 is a scalar.
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.contains(&0) {
            return Err(Error::InvalidShape(dims));
        }
        Ok(Shape(dims))
    }

    pub fn scalar() -> Self {
        Shape(Vec::new())
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl From<&[usize]> for Shape {
    fn from(d: &[usize]) -> Self {
        Shape(d.to_vec())
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(Error::DataLength {
                expected: shape.numel(),
                got: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub(crate) fn from_parts(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor { shape, data }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Shape::scalar(),
            data: vec![value],
        }
    }

    /// Tensor with every entry equal to `value`.
    pub fn full(dims: &[usize], value: f64) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let n = shape.numel();
        Ok(Tensor {
            shape,
            data: vec![value; n],
        })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::full(dims, 0.0)
    }

    pub fn ones(dims: &[usize]) -> Result<Self> {
        Self::full(dims, 1.0)
    }

    pub fn eye(n: usize) -> Result<Self> {
        let mut t = Self::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    /// I.i.d. Gaussian entries drawn with [`GaussianRng`]; identical for a
    /// fixed `(shape, mean, stddev, seed)` on every platform.
    pub fn randn(dims: &[usize], mean: f64, stddev: f64, seed: u64) -> Result<Self> {
        let mut rng = GaussianRng::new(seed);
        Self::randn_with(dims, mean, stddev, &mut rng)
    }

    pub fn randn_with(dims: &[usize], mean: f64, stddev: f64, rng: &mut GaussianRng) -> Result<Self> {
        if !stddev.is_finite() || stddev < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "stddev must be non-negative and finite, got {stddev}"
            )));
        }
        let shape = Shape::new(dims)?;
        let mut data = vec![0.0; shape.numel()];
        rng.fill(&mut data);
        for v in &mut data {
            *v = mean + stddev * *v;
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
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

    /// Value of a rank-0 (or single-element) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Entry of a rank-2 tensor.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dims()[1] + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.dims().to_vec(),
                rhs: dims.to_vec(),
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    /// General axis permutation; `perm[k]` names the source axis of output axis `k`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.shape.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank
            || perm
                .iter()
                .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::InvalidArgument(format!(
                "{perm:?} is not a permutation of {rank} axes"
            )));
        }
        let src = self.dims();
        let out_dims: Vec<usize> = perm.iter().map(|&p| src[p]).collect();
        if rank == 2 && perm == [1, 0] {
            let (r, c) = (src[0], src[1]);
            let mut data = vec![0.0; self.len()];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = self.data[i * c + j];
                }
            }
            return Ok(Tensor::from_parts(Shape(out_dims), data));
        }
        let mut src_strides = vec![1usize; rank];
        for k in (0..rank.saturating_sub(1)).rev() {
            src_strides[k] = src_strides[k + 1] * src[k + 1];
        }
        let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
        let mut data = Vec::with_capacity(self.len());
        let mut idx = vec![0usize; rank];
        for _ in 0..self.len() {
            let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
            data.push(self.data[off]);
            for k in (0..rank).rev() {
                idx[k] += 1;
                if idx[k] < out_dims[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        Ok(Tensor::from_parts(Shape(out_dims), data))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let perm: Vec<usize> = (0..self.shape.rank()).rev().collect();
        self.permute(&perm)
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.dims(), rhs.dims());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let mut out: Vec<f64> = Vec::with_capacity(m * n);
        // SAFETY: slices are exactly m*k, k*n and m*n long with row-major
        // strides; with beta = 0 dgemm writes every entry of C without reading it.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                self.data.as_ptr(),
                k as isize,
                1,
                rhs.data.as_ptr(),
                n as isize,
                1,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
            out.set_len(m * n);
        }
        Ok(Tensor::from_parts(Shape(vec![m, n]), out))
    }

    /// Elementwise binary op where either side may be a single-element tensor.
    pub fn zip_broadcast(
        &self,
        rhs: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape == rhs.shape {
            let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect();
            Ok(Tensor::from_parts(self.shape.clone(), data))
        } else if rhs.shape.is_scalar() {
            let b = rhs.data[0];
            Ok(self.map(|a| f(a, b)))
        } else if self.shape.is_scalar() {
            let a = self.data[0];
            Ok(rhs.map(|b| f(a, b)))
        } else {
            Err(Error::ShapeMismatch {
                op,
                lhs: self.dims().to_vec(),
                rhs: rhs.dims().to_vec(),
            })
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    /// Concatenate rank-1 or rank-2 tensors along `axis`.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let rank = first.shape.rank();
        if rank == 0 || rank > 2 || axis >= rank {
            return Err(Error::InvalidArgument(format!(
                "concat supports rank 1 or 2 along an existing axis, got rank {rank} axis {axis}"
            )));
        }
        for p in parts {
            let ok = p.shape.rank() == rank && (0..rank).all(|k| k == axis || p.dims()[k] == first.dims()[k]);
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.dims().to_vec(),
                    rhs: p.dims().to_vec(),
                });
            }
        }
        let total: usize = parts.iter().map(|p| p.dims()[axis]).sum();
        if axis == 0 {
            let mut dims = first.dims().to_vec();
            dims[0] = total;
            let data = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
            return Ok(Tensor::from_parts(Shape(dims), data));
        }
        let rows = first.dims()[0];
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let c = p.dims()[1];
                data.extend_from_slice(&p.data[r * c..(r + 1) * c]);
            }
        }
        Ok(Tensor::from_parts(Shape(vec![rows, total]), data))
    }
}

/// Portable Gaussian source: xoshiro256++ seeded through SplitMix64
/// (`seed_from_u64`), mapped to normals with the Box-Muller transform.
///
/// Uniforms are the top 53 bits of each 64-bit output scaled by 2⁻⁵³; the
/// radius uses `1 - u` so the logarithm never sees zero. Each Box-Muller
/// pair yields two normals, cosine branch first.
#[derive(Clone, Debug)]
pub struct GaussianRng {
    inner: Xoshiro256PlusPlus,
    spare: Option<f64>,
}

impl GaussianRng {
    pub fn new(seed: u64) -> Self {
        GaussianRng {
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Independent stream for `(seed, stream)`, e.g. one per epoch.
    pub fn for_stream(seed: u64, stream: u64) -> Self {
        Self::new(splitmix64(
            seed ^ splitmix64(stream.wrapping_add(0x5851_F42D_4C95_7F2D)),
        ))
    }

    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn fill(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.normal();
        }
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
