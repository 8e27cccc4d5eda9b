//! Dense row-major tensors and the binary tensor file format.
//!
//! A tensor file is laid out as:
//!
//! ```text
//! b"STRF" | version: u8 = 1 | rank: u8 | dims: rank x u32 LE | data: f32 LE, row-major
//! ```

use std::fmt::{Debug, Display};
use std::io::{Read, Write};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"STRF";
pub const FORMAT_VERSION: u8 = 0x01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

/// Floating point element type. Implemented for `f32` and `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const DTYPE: DType;

    /// `c <- alpha * a * b + beta * c` over strided matrices.
    ///
    /// # Safety
    /// The strides must describe matrices lying entirely inside the
    /// buffers behind `a`, `b` and `c`; `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).unwrap_or_else(Self::nan)
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Dense tensor with row-major storage.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.dims)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if dims.contains(&0) || numel != data.len() {
            return Err(Error::shape("tensor", dims, &[data.len()]));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn full(dims: &[usize], value: T) -> Self {
        assert!(dims.iter().all(|&d| d > 0), "zero extent in {dims:?}");
        let numel = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn ones(dims: &[usize]) -> Self {
        Self::full(dims, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let mut t = Self::zeros(dims);
        t.data.iter_mut().enumerate().for_each(|(i, v)| *v = f(i));
        t
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Contract("ragged rows".into()));
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.dims.len(), "index rank");
        idx.iter().zip(&self.dims).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {idx:?} out of bounds for {:?}", self.dims);
            acc * d + i
        })
    }

    pub fn get(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: T) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        Self::new(dims, self.data.clone())
    }

    pub fn into_reshape(self, dims: &[usize]) -> Result<Self> {
        Self::new(dims, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.dims != other.dims {
            return Err(Error::shape("zip", &self.dims, &other.dims));
        }
        Ok(Self {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape("add_assign", &self.dims, &other.dims));
        }
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, &b)| *a += b);
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.numel()).unwrap()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.dims, other.dims, "max_abs_diff dims");
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    /// Swap the two trailing axes.
    pub fn transpose_last2(&self) -> Self {
        let r = self.rank();
        assert!(r >= 2, "transpose needs rank >= 2");
        let (m, n) = (self.dims[r - 2], self.dims[r - 1]);
        let batch = self.numel() / (m * n);
        let mut dims = self.dims.clone();
        dims.swap(r - 2, r - 1);
        let mut out = vec![T::zero(); self.numel()];
        for b in 0..batch {
            let src = &self.data[b * m * n..(b + 1) * m * n];
            let dst = &mut out[b * m * n..(b + 1) * m * n];
            for i in 0..m {
                for j in 0..n {
                    dst[j * m + i] = src[i * n + j];
                }
            }
        }
        Self { dims, data: out }
    }

    /// Sub-tensor at `index` along axis 0.
    pub fn index_axis0(&self, index: usize) -> Self {
        assert!(self.rank() >= 2 && index < self.dims[0]);
        let inner: usize = self.dims[1..].iter().product();
        Self {
            dims: self.dims[1..].to_vec(),
            data: self.data[index * inner..(index + 1) * inner].to_vec(),
        }
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Contract("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.dims != first.dims {
                return Err(Error::shape("stack", &first.dims, &t.dims));
            }
            data.extend_from_slice(&t.data);
        }
        let mut dims = vec![items.len()];
        dims.extend_from_slice(&first.dims);
        Self::new(&dims, data)
    }
}

impl<T: Scalar> Tensor<T> {
    /// Serialize in the binary tensor format. Values are narrowed to f32.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        if self.rank() > u8::MAX as usize {
            return Err(Error::Contract(format!("rank {} too large", self.rank())));
        }
        let mut buf = Vec::with_capacity(6 + 4 * self.rank() + 4 * self.numel());
        buf.extend_from_slice(MAGIC);
        buf.push(FORMAT_VERSION);
        buf.push(self.rank() as u8);
        for &d in &self.dims {
            let d = u32::try_from(d)
                .map_err(|_| Error::Contract(format!("extent {d} exceeds u32")))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for &v in &self.data {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::storage(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::storage(path, e))
    }
}

/// Size in bytes of the header preceding the raw data of a rank-`rank` record.
pub fn header_len(rank: usize) -> usize {
    4 + 1 + 1 + 4 * rank
}

impl Tensor<f32> {
    pub fn read_from(mut r: impl Read) -> std::result::Result<Self, String> {
        let mut head = [0u8; 6];
        r.read_exact(&mut head).map_err(|e| e.to_string())?;
        if &head[..4] != MAGIC {
            return Err("bad magic".into());
        }
        if head[4] != FORMAT_VERSION {
            return Err(format!("unsupported version {}", head[4]));
        }
        let rank = head[5] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|e| e.to_string())?;
            dims.push(u32::from_le_bytes(b) as usize);
        }
        let numel: usize = dims.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw).map_err(|e| e.to_string())?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(&dims, data).map_err(|e| e.to_string())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::load(path, e.to_string()))?;
        Self::read_from(std::io::BufReader::new(file)).map_err(|msg| Error::load(path, msg))
    }
}
