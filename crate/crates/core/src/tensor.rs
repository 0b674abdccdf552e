//! Dense row-major tensors and the small numeric kernel the layers build on.
//!
//! Storage is `f32` for everything that trains. The same type is generic over
//! [`Element`] so that gradient checks can run the identical kernels in `f64`.

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Scalar types a [`Tensor`] can hold.
pub trait Element:
    Float + FromPrimitive + ToPrimitive + Default + Sum + fmt::Debug + Send + Sync + 'static
{
    /// `c = alpha * a·b + beta * c` on strided row/column views.
    ///
    /// `a` is `m × k`, `b` is `k × n`, `c` is `m × n`; each stride pair is
    /// `(row_stride, col_stride)` in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 fits every element type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("element converts to f64")
    }
}

fn span(rows: usize, cols: usize, (rs, cs): (isize, isize)) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
    (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
}

macro_rules! impl_element {
    ($ty:ty, $gemm:path) => {
        impl Element for $ty {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                assert!(a.len() >= span(m, k, a_strides), "gemm: lhs out of bounds");
                assert!(b.len() >= span(k, n, b_strides), "gemm: rhs out of bounds");
                assert!(c.len() >= span(m, n, c_strides), "gemm: output out of bounds");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every index touched by the kernel lies inside the
                // spans asserted above and `c` is exclusively borrowed.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }
        }
    };
}

impl_element!(f32, matrixmultiply::sgemm);
impl_element!(f64, matrixmultiply::dgemm);

/// How a freshly created tensor is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fill {
    Zeros,
    Constant(f64),
    Uniform { lo: f64, hi: f64, seed: u64 },
    /// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
    GlorotUniform { seed: u64 },
    /// Uniform on `±sqrt(6 / fan_in)`; keeps activation scale through ReLU stacks.
    HeUniform { seed: u64 },
}

/// Elementwise binary operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Max,
}

/// Right-hand side of an elementwise operation.
#[derive(Debug, Clone, Copy)]
pub enum Operand<'a, E: Element> {
    Tensor(&'a Tensor<E>),
    Scalar(E),
}

impl<'a, E: Element> From<&'a Tensor<E>> for Operand<'a, E> {
    fn from(t: &'a Tensor<E>) -> Self {
        Operand::Tensor(t)
    }
}

/// Dense n-dimensional array (rank 1 to 4) in row-major order.
#[derive(Clone, PartialEq)]
pub struct Tensor<E: Element = f32> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "rank must be between 1 and 4".into(),
        });
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "dimensions must be positive".into(),
        });
    }
    Ok(shape.iter().product())
}

/// Fan-in and fan-out for glorot initialisation of a weight of this shape.
fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (*n, *n),
        [fan_in, fan_out] => (*fan_in, *fan_out),
        _ => {
            let receptive: usize = shape[..shape.len() - 2].iter().product();
            let cin = shape[shape.len() - 2];
            let cout = shape[shape.len() - 1];
            (receptive * cin, receptive * cout)
        }
    }
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let len = check_shape(&shape)?;
        if len != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("expected {len} elements, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn create(shape: &[usize], fill: Fill) -> Result<Self> {
        let len = check_shape(shape)?;
        let data = match fill {
            Fill::Zeros => vec![E::zero(); len],
            Fill::Constant(c) => vec![E::from_f64_lossy(c); len],
            Fill::Uniform { lo, hi, seed } => {
                if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "uniform fill needs finite lo < hi, got [{lo}, {hi})"
                    )));
                }
                sample_uniform(len, lo, hi, seed)
            }
            Fill::GlorotUniform { seed } => {
                let (fan_in, fan_out) = fans(shape);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                sample_uniform(len, -limit, limit, seed)
            }
            Fill::HeUniform { seed } => {
                let (fan_in, _) = fans(shape);
                let limit = (6.0 / fan_in as f64).sqrt();
                sample_uniform(len, -limit, limit, seed)
            }
        };
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::create(shape, Fill::Zeros)
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        Self::create(shape, Fill::Constant(value))
    }

    pub fn zeros_like(other: &Self) -> Self {
        Tensor {
            shape: other.shape.clone(),
            data: vec![E::zero(); other.data.len()],
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

    pub fn data(&self) -> &[E] {
        &self.data
    }

    /// In-place access for parameter updates. Callers must keep values finite.
    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return Err(Error::mismatch("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> E {
        self.data.iter().copied().sum()
    }

    pub fn convert<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| F::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    /// Rank-2 matrix product.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let (m, k, n) = match (self.shape.as_slice(), rhs.shape.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::mismatch("matmul", &self.shape, &rhs.shape)),
        };
        let mut out = vec![E::zero(); m * n];
        E::gemm(
            m,
            k,
            n,
            E::one(),
            &self.data,
            (k as isize, 1),
            &rhs.data,
            (n as isize, 1),
            E::zero(),
            &mut out,
            (n as isize, 1),
        );
        let out = Tensor {
            shape: vec![m, n],
            data: out,
        };
        out.ensure_finite("matmul")?;
        Ok(out)
    }

    pub fn elementwise<'a>(&self, op: BinaryOp, rhs: impl Into<Operand<'a, E>>) -> Result<Self> {
        let apply = |a: E, b: E| match op {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
            BinaryOp::Max => a.max(b),
        };
        let data: Vec<E> = match rhs.into() {
            Operand::Scalar(b) => self.data.iter().map(|&a| apply(a, b)).collect(),
            Operand::Tensor(t) => {
                if t.shape != self.shape {
                    return Err(Error::mismatch("elementwise", &self.shape, &t.shape));
                }
                self.data
                    .iter()
                    .zip(&t.data)
                    .map(|(&a, &b)| apply(a, b))
                    .collect()
            }
        };
        let out = Tensor {
            shape: self.shape.clone(),
            data,
        };
        out.ensure_finite(&format!("elementwise {op:?}"))?;
        Ok(out)
    }
}

fn sample_uniform<E: Element>(len: usize, lo: f64, hi: f64, seed: u64) -> Vec<E> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new(lo, hi);
    (0..len)
        .map(|_| E::from_f64_lossy(dist.sample(&mut rng)))
        .collect()
}
