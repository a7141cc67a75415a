//! Scalar abstraction shared by every numeric kernel.
//!
//! All inference code is written against [`Scalar`], which is implemented for
//! `f32` and `f64`. `f64` is the default everywhere; `f32` trades accuracy for
//! memory and bandwidth and its tolerances are three orders of magnitude looser.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Width tag written into problem files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarWidth {
    F32,
    F64,
}

impl ScalarWidth {
    pub fn bytes(self) -> usize {
        match self {
            ScalarWidth::F32 => 4,
            ScalarWidth::F64 => 8,
        }
    }
}

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    const WIDTH: ScalarWidth;

    /// Machine epsilon scaled into a tolerance multiplier: 1 for `f64`, 1e3 for `f32`.
    const TOL_SCALE: f64;

    fn of(x: f64) -> Self;

    fn of_usize(n: usize) -> Self {
        Self::of(n as f64)
    }

    fn as_f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    /// Reads one value from the first `WIDTH.bytes()` bytes of `bytes`.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f64 {
    const WIDTH: ScalarWidth = ScalarWidth::F64;
    const TOL_SCALE: f64 = 1.0;

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        let mut buf = [0u8; 8];
        buf.copy_from_slice(&bytes[..8]);
        f64::from_le_bytes(buf)
    }
}

impl Scalar for f32 {
    const WIDTH: ScalarWidth = ScalarWidth::F32;
    const TOL_SCALE: f64 = 1e3;

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        let mut buf = [0u8; 4];
        buf.copy_from_slice(&bytes[..4]);
        f32::from_le_bytes(buf)
    }
}

/// Index of the largest element; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable `log Σ exp(v)`.
pub fn log_sum_exp<T: Scalar>(values: &[T]) -> T {
    let m = values[argmax(values)];
    if m == T::neg_infinity() {
        return m;
    }
    let s: T = values.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

/// In-place softmax with max subtraction.
pub fn softmax_in_place<T: Scalar>(values: &mut [T]) {
    let m = values[argmax(values)];
    let mut s = T::zero();
    for v in values.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in values.iter_mut() {
        *v /= s;
    }
}
