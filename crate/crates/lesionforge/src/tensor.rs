//! Dense row-major tensors and the `LTD1` on-disk container.
//!
//! Tensors are plain values: once constructed they are never mutated in place
//! by the math layers, so they can be shared freely across threads. Training
//! runs in `f32`; gradient-check paths promote everything to `f64`.

use std::fmt;
use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Element dtype codes as stored in the `LTD1` container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 1,
    F64 = 2,
}

/// Scalar element of a tensor. Implemented for `f32` and `f64` only.
pub trait Element:
    Copy + PartialOrd + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
{
    const DTYPE: Dtype;
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite(self) -> bool;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn abs(self) -> Self;
    fn max(self, other: Self) -> Self;
    fn min(self, other: Self) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    fn byte_width() -> usize;
}

macro_rules! impl_element {
    ($ty:ty, $dtype:expr) => {
        impl Element for $ty {
            const DTYPE: Dtype = $dtype;
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $ty
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$ty>::is_finite(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$ty>::sqrt(self)
            }
            #[inline]
            fn exp(self) -> Self {
                <$ty>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$ty>::ln(self)
            }
            #[inline]
            fn abs(self) -> Self {
                <$ty>::abs(self)
            }
            #[inline]
            fn max(self, other: Self) -> Self {
                <$ty>::max(self, other)
            }
            #[inline]
            fn min(self, other: Self) -> Self {
                <$ty>::min(self, other)
            }
            #[inline]
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            #[inline]
            fn read_le(bytes: &[u8]) -> Self {
                <$ty>::from_le_bytes(bytes.try_into().expect("byte width checked by caller"))
            }
            #[inline]
            fn byte_width() -> usize {
                std::mem::size_of::<$ty>()
            }
        }
    };
}

impl_element!(f32, Dtype::F32);
impl_element!(f64, Dtype::F64);

/// N-dimensional dense array, row-major. Rank 0 is a scalar.
#[derive(Clone, PartialEq)]
pub struct Tensor<E: Element = f32> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{:?}, ... {} elems]", self.data[0], self.data.len())
        }
    }
}

impl<E: Element> Tensor<E> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "tensor shape {shape:?} contains a zero dimension"
            )));
        }
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::Dimension(format!(
                "shape {shape:?} implies {expect} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![E::ZERO; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: E) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Self::filled(shape, E::ONE)
    }

    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Value of a rank-0 tensor.
    pub fn item(&self) -> Result<E> {
        if !self.is_scalar() {
            return Err(Error::Contract(format!(
                "item() requires a scalar tensor, shape is {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Same elements, new shape. Element counts must match.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        Tensor::from_vec(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(E, E) -> E) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "elementwise op on mismatched shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: E) -> Self {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> E {
        let mut acc = E::ZERO;
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    /// Err if any element is NaN or infinite.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric(format!("{what} contains NaN or Inf")))
        }
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| F::from_f64(v.to_f64())).collect(),
        }
    }

    /// Linear index for an `[N,C,H,W]` tensor.
    #[inline]
    pub fn idx4(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert_eq!(self.rank(), 4);
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    /// Expects exactly four dims; returns (N, C, H, W).
    pub fn dims4(&self, what: &str) -> Result<(usize, usize, usize, usize)> {
        if self.rank() != 4 {
            return Err(Error::Dimension(format!(
                "{what} must be rank 4 (N,C,H,W), got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }

    pub fn dims2(&self, what: &str) -> Result<(usize, usize)> {
        if self.rank() != 2 {
            return Err(Error::Dimension(format!(
                "{what} must be rank 2, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

// ---------------------------------------------------------------------------
// LTD1 container
// ---------------------------------------------------------------------------

const LTD1_MAGIC: &[u8; 4] = b"LTD1";

/// A container payload whose dtype is only known at read time.
#[derive(Debug, Clone)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }
}

/// Serialize into the `LTD1` layout: magic, dtype byte, rank byte,
/// rank u32-LE dims, then row-major little-endian elements.
pub fn write_ltd1<E: Element, W: Write>(tensor: &Tensor<E>, mut w: W) -> Result<()> {
    let mut buf = Vec::with_capacity(6 + 4 * tensor.rank() + tensor.len() * E::byte_width());
    buf.extend_from_slice(LTD1_MAGIC);
    buf.push(E::DTYPE as u8);
    if tensor.rank() > u8::MAX as usize {
        return Err(Error::Format(format!(
            "rank {} exceeds the container's 255 limit",
            tensor.rank()
        )));
    }
    buf.push(tensor.rank() as u8);
    for &d in tensor.shape() {
        let d32 = u32::try_from(d)
            .map_err(|_| Error::Format(format!("dimension {d} exceeds u32 range")))?;
        buf.extend_from_slice(&d32.to_le_bytes());
    }
    for &v in tensor.data() {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)
        .map_err(|e| Error::io("writing LTD1 tensor", e))
}

pub fn read_ltd1<R: Read>(mut r: R) -> Result<AnyTensor> {
    let mut head = [0u8; 6];
    r.read_exact(&mut head)
        .map_err(|e| Error::io("reading LTD1 header", e))?;
    if &head[0..4] != LTD1_MAGIC {
        return Err(Error::Format("bad magic, expected \"LTD1\"".into()));
    }
    let dtype = head[4];
    let rank = head[5] as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)
            .map_err(|e| Error::io("reading LTD1 dims", e))?;
        dims.push(u32::from_le_bytes(b) as usize);
    }
    let count: usize = dims.iter().product();
    match dtype {
        1 => {
            let mut raw = vec![0u8; count * 4];
            r.read_exact(&mut raw)
                .map_err(|e| Error::io("reading LTD1 f32 payload", e))?;
            let data = raw.chunks_exact(4).map(f32::read_le).collect();
            Ok(AnyTensor::F32(Tensor::from_vec(dims, data)?))
        }
        2 => {
            let mut raw = vec![0u8; count * 8];
            r.read_exact(&mut raw)
                .map_err(|e| Error::io("reading LTD1 f64 payload", e))?;
            let data = raw.chunks_exact(8).map(f64::read_le).collect();
            Ok(AnyTensor::F64(Tensor::from_vec(dims, data)?))
        }
        other => Err(Error::Format(format!("unknown dtype code {other}"))),
    }
}

pub fn read_ltd1_f32<R: Read>(r: R) -> Result<Tensor<f32>> {
    match read_ltd1(r)? {
        AnyTensor::F32(t) => Ok(t),
        AnyTensor::F64(_) => Err(Error::Format(
            "expected a 32-bit float tensor, container holds f64".into(),
        )),
    }
}

pub fn save_ltd1<E: Element>(tensor: &Tensor<E>, path: &std::path::Path) -> Result<()> {
    let f = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    write_ltd1(tensor, std::io::BufWriter::new(f))
}

pub fn load_ltd1(path: &std::path::Path) -> Result<AnyTensor> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    read_ltd1(std::io::BufReader::new(f))
}
