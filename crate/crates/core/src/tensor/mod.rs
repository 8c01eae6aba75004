//! Dense `N,C,H,W` tensors and a small tape-based reverse-mode autodiff.
//!
//! Parameters live outside the tape as plain [`Tensor`]s. A forward pass
//! copies them onto a fresh [`Tape`] as leaves, records every operation, and
//! [`Tape::backward`] walks the record once in reverse. Both `f32` (training)
//! and `f64` (gradient checking) are supported through [`Element`].

mod adam;
pub mod gradcheck;
mod kernels;
mod tape;

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

pub use adam::{Adam, AdamState};
pub use tape::{Gradients, Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("avg_pool2 needs even spatial dims, got {h}x{w}")]
    OddPool { h: usize, w: usize },
    #[error("{op} expects a single-element tensor, got {numel} elements")]
    NotScalar { op: &'static str, numel: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("non-finite gradient in parameter {index}")]
    NonFiniteGradient { index: usize },
}

/// Scalar type a tensor can hold.
pub trait Element: Float + Sum + Default + Debug + Send + Sync + 'static {
    /// Dtype tag used by the binary container.
    const DTYPE: u8;

    /// Row-major `c = alpha * a(m x k) * b(k x n) + beta * c` where each
    /// operand is described by its row and column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64(v: f64) -> Self;
}

macro_rules! impl_element {
    ($t:ty, $tag:expr, $gemm:path) => {
        impl Element for $t {
            const DTYPE: u8 = $tag;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: callers pass slices covering every index reachable
                // through the given dimensions and strides (checked in debug).
                debug_assert!(k == 0 || a.len() as isize > (m as isize - 1) * rsa + (k as isize - 1) * csa);
                debug_assert!(k == 0 || b.len() as isize > (k as isize - 1) * rsb + (n as isize - 1) * csb);
                debug_assert!(c.len() as isize > (m as isize - 1) * rsc + (n as isize - 1) * csc);
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }

            fn from_f64(v: f64) -> Self {
                v as $t
            }
        }
    };
}

impl_element!(f32, 0, matrixmultiply::sgemm);
impl_element!(f64, 1, matrixmultiply::dgemm);

pub type Shape = [usize; 4];

/// Row-major 4-D array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Shape {
                op: "from_vec",
                detail: format!("{shape:?} needs {numel} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape, v: T) -> Self {
        Self {
            shape,
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self::full([1, 1, 1, 1], v)
    }

    /// i.i.d. normal entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: Shape, std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64(z * std)
            })
            .collect();
        Self { shape, data }
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn rand_uniform<R: Rng + ?Sized>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(rng.random_range(lo..hi))).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    pub fn item(&self) -> Result<T, TensorError> {
        if self.data.len() != 1 {
            return Err(TensorError::NotScalar {
                op: "item",
                numel: self.data.len(),
            });
        }
        Ok(self.data[0])
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum of squares, accumulated in f64.
    pub fn sq_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let v = v.to_f64().unwrap_or(f64::NAN);
                v * v
            })
            .sum()
    }

    /// Copy of the `[h0..h0+h, w0..w0+w]` window of every `(n, c)` plane.
    pub fn crop(&self, h0: usize, w0: usize, h: usize, w: usize) -> Result<Self, TensorError> {
        let [n, c, hh, ww] = self.shape;
        if h0 + h > hh || w0 + w > ww {
            return Err(TensorError::Shape {
                op: "crop",
                detail: format!("window {h}x{w} at ({h0},{w0}) outside {hh}x{ww}"),
            });
        }
        let mut data = Vec::with_capacity(n * c * h * w);
        for plane in self.data.chunks_exact(hh * ww) {
            for r in h0..h0 + h {
                data.extend_from_slice(&plane[r * ww + w0..r * ww + w0 + w]);
            }
        }
        Ok(Self {
            shape: [n, c, h, w],
            data,
        })
    }

    /// Concatenate along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self, TensorError> {
        let first = items.first().ok_or(TensorError::Shape {
            op: "stack",
            detail: "no tensors".into(),
        })?;
        let [_, c, h, w] = first.shape;
        let mut n = 0;
        let mut data = Vec::new();
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(TensorError::Shape {
                    op: "stack",
                    detail: format!("{:?} vs {:?}", t.shape, first.shape),
                });
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Self {
            shape: [n, c, h, w],
            data,
        })
    }

    /// Inner product, accumulated in f64.
    pub fn dot(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.to_f64().unwrap_or(f64::NAN) * b.to_f64().unwrap_or(f64::NAN))
            .sum()
    }
}

/// Non-autodiff forward helpers, handy for inference and oracles.
pub mod ops {
    use super::*;

    pub fn conv2d<T: Element>(
        x: &Tensor<T>,
        w: &Tensor<T>,
        b: Option<&Tensor<T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<T>, TensorError> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let wv = tape.leaf(w.clone(), false);
        let bv = b.map(|b| tape.leaf(b.clone(), false));
        let out = tape.conv2d(xv, wv, bv, stride, pad)?;
        Ok(tape.take(out))
    }

    pub fn conv_transpose2d<T: Element>(
        x: &Tensor<T>,
        w: &Tensor<T>,
        b: Option<&Tensor<T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<T>, TensorError> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let wv = tape.leaf(w.clone(), false);
        let bv = b.map(|b| tape.leaf(b.clone(), false));
        let out = tape.conv_transpose2d(xv, wv, bv, stride, pad)?;
        Ok(tape.take(out))
    }

    pub fn avg_pool2<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let out = tape.avg_pool2(xv)?;
        Ok(tape.take(out))
    }

    pub fn instance_norm<T: Element>(
        x: &Tensor<T>,
        gain: &Tensor<T>,
        bias: &Tensor<T>,
        eps: f64,
    ) -> Result<Tensor<T>, TensorError> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let g = tape.leaf(gain.clone(), false);
        let b = tape.leaf(bias.clone(), false);
        let out = tape.instance_norm(xv, g, b, eps)?;
        Ok(tape.take(out))
    }
}
