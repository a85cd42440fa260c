//! Dense row-major tensors over `f32` or `f64`, plus a binary on-disk format.
//!
//! Model weights and activations are stored in 32-bit floats; the whole stack
//! is generic over [`Scalar`] so that every op and gradient can also be
//! instantiated at `f64`, which is how the tight-tolerance gradient checks
//! run. Reductions always accumulate in `f64` regardless of the storage type.
//!
//! # On-disk format
//!
//! A tensor serializes to a little-endian stream: the 4-byte magic `MCT1`,
//! a `u32` rank, `rank` further `u32` dimensions, then the elements as IEEE
//! 754 `f32` values in row-major order. Reading validates the magic, rank,
//! and dimensions and fails with a byte offset on truncated or oversized
//! input.

use std::fmt::{Debug, Display};
use std::io::{Read, Write};
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};
use std::path::Path;

use crate::error::{Error, Result};

/// Magic bytes that open a serialized tensor.
pub const TENSOR_MAGIC: [u8; 4] = *b"MCT1";

/// Highest rank the reader accepts; guards against corrupt headers.
const MAX_RANK: u32 = 8;

/// Element type for tensors: `f32` for ordinary use, `f64` for verification.
pub trait Scalar:
    Copy
    + PartialOrd
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    /// Larger of the two values (NaN-free inputs assumed).
    fn max_val(self, other: Self) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline]
            fn is_finite(self) -> bool {
                self.is_finite()
            }
            #[inline]
            fn max_val(self, other: Self) -> Self {
                if self > other {
                    self
                } else {
                    other
                }
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

/// Dense row-major tensor. Shape and data length are kept consistent by
/// construction: every dimension is positive and `data.len()` equals the
/// product of the dimensions.
#[derive(Clone, PartialEq)]
pub struct Tensor<S: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{} elements]", self.data.len())
        }
    }
}

fn checked_numel(shape: &[usize]) -> Result<usize> {
    let mut numel: usize = 1;
    for (i, &d) in shape.iter().enumerate() {
        if d == 0 {
            return Err(Error::Shape(format!(
                "dimension {i} of shape {shape:?} is zero; all dimensions must be positive"
            )));
        }
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| Error::Shape(format!("shape {shape:?} overflows usize")))?;
    }
    Ok(numel)
}

impl<S: Scalar> Tensor<S> {
    /// Builds a tensor from a shape and matching data vector.
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let numel = checked_numel(shape)?;
        if data.len() != numel {
            return Err(Error::Shape(format!(
                "shape {:?} requires {} elements but {} were provided",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// All-zero tensor. Panics on an invalid shape (zero dimension), which is
    /// a programming error rather than a data error.
    pub fn zeros(shape: &[usize]) -> Self {
        let numel = checked_numel(shape).expect("invalid tensor shape");
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::ZERO; numel],
        }
    }

    /// Tensor filled with a constant.
    pub fn full(shape: &[usize], value: S) -> Self {
        let numel = checked_numel(shape).expect("invalid tensor shape");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// Rank-1 tensor holding a single value.
    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a tensor by evaluating `f` at each flat index.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let numel = checked_numel(shape).expect("invalid tensor shape");
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(|i| f(i)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// Value of the single element of a one-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.data.len() != 1 {
            return Err(Error::Shape(format!(
                "expected a one-element tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Row-major strides of the current shape.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.shape[i + 1];
        }
        strides
    }

    /// Element at a multi-dimensional index (test and debugging helper).
    pub fn at(&self, index: &[usize]) -> S {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for ((&i, &d), stride) in index.iter().zip(&self.shape).zip(self.strides()) {
            assert!(i < d, "index {index:?} out of bounds for shape {:?}", self.shape);
            flat += i * stride;
        }
        self.data[flat]
    }

    /// Same data viewed under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel = checked_numel(shape)?;
        if numel != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({} elements)",
                self.shape,
                self.data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Element-wise map.
    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Element-wise combination of two same-shape tensors.
    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "element-wise op on mismatched shapes {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Element-wise sum.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    /// Element-wise difference.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    /// Multiplication by a constant.
    pub fn scale(&self, c: S) -> Self {
        self.map(|v| v * c)
    }

    /// In-place `self += other`, used on gradient accumulators.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "accumulating {:?} into {:?}",
                other.shape, self.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Sum of all elements, accumulated in `f64`.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64()).sum()
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts the element type, rounding through `f64`.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }

    /// Serializes the tensor to a writer (elements stored as `f32`).
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&TENSOR_MAGIC)?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&(v.to_f64() as f32).to_le_bytes())?;
        }
        Ok(())
    }

    /// Deserializes one tensor from a reader, leaving the reader positioned
    /// immediately after the payload. `path` and `base_offset` locate this
    /// tensor inside the surrounding file for error reporting.
    pub fn read_from(r: &mut impl Read, path: &Path, base_offset: u64) -> Result<Self> {
        let mut pos = base_offset;
        let mut magic = [0u8; 4];
        read_exact_at(r, &mut magic, path, &mut pos)?;
        if magic != TENSOR_MAGIC {
            return Err(Error::format(
                path,
                base_offset,
                format!("bad tensor magic {magic:?}, expected {TENSOR_MAGIC:?}"),
            ));
        }
        let rank = read_u32_at(r, path, &mut pos)?;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::format(
                path,
                pos - 4,
                format!("tensor rank {rank} outside 1..={MAX_RANK}"),
            ));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            let d = read_u32_at(r, path, &mut pos)?;
            if d == 0 {
                return Err(Error::format(path, pos - 4, "zero tensor dimension"));
            }
            shape.push(d as usize);
        }
        let numel = checked_numel(&shape)
            .map_err(|e| Error::format(path, base_offset, e.to_string()))?;
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            read_exact_at(r, &mut buf, path, &mut pos)?;
            data.push(S::from_f64(f32::from_le_bytes(buf) as f64));
        }
        Ok(Tensor { shape, data })
    }

    /// Writes the tensor to a file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        use std::io::Write as _;
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a tensor from a file, rejecting trailing bytes.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = std::io::BufReader::new(file);
        let tensor = Self::read_from(&mut r, path, 0)?;
        let mut rest = [0u8; 1];
        let consumed = (4 + 4 + 4 * tensor.rank() + 4 * tensor.numel()) as u64;
        match r.read(&mut rest) {
            Ok(0) => Ok(tensor),
            Ok(_) => Err(Error::format(path, consumed, "trailing bytes after tensor payload")),
            Err(e) => Err(Error::io(path, e)),
        }
    }
}

fn read_exact_at(r: &mut impl Read, buf: &mut [u8], path: &Path, pos: &mut u64) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format(path, *pos, "unexpected end of data")
        } else {
            Error::io(path, e)
        }
    })?;
    *pos += buf.len() as u64;
    Ok(())
}

fn read_u32_at(r: &mut impl Read, path: &Path, pos: &mut u64) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact_at(r, &mut buf, path, pos)?;
    Ok(u32::from_le_bytes(buf))
}

/// Iterates the flat base offsets and the stride of every 1-D lane along
/// `axis`. Used by axis-wise ops such as L2 normalization.
pub(crate) fn lanes(shape: &[usize], axis: usize) -> (Vec<usize>, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len() - 1).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let axis_stride = strides[axis];
    let mut bases = Vec::new();
    // Odometer over all dimensions except `axis`.
    let mut index = vec![0usize; shape.len()];
    loop {
        let base: usize = index
            .iter()
            .zip(&strides)
            .enumerate()
            .filter(|(i, _)| *i != axis)
            .map(|(_, (&ix, &st))| ix * st)
            .sum();
        bases.push(base);
        // Advance the odometer, skipping `axis`.
        let mut dim = shape.len();
        loop {
            if dim == 0 {
                return (bases, axis_stride);
            }
            dim -= 1;
            if dim == axis {
                continue;
            }
            index[dim] += 1;
            if index[dim] < shape[dim] {
                break;
            }
            index[dim] = 0;
        }
    }
}
