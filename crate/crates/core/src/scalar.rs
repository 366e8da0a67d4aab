//! Scalar abstraction shared by every numeric module.
//!
//! The model, optimizer and selector are written once against [`Scalar`] and
//! instantiated for `f32` (training, benchmarks) and `f64` (gradient checks).
//! The analytical latency model is generic over the weaker
//! [`ExactNum`](crate::perfmodel::ExactNum) bound so it can also run on big
//! rationals.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type usable by the neural-network code.
pub trait Scalar: Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static {
    /// Name stored in checkpoint headers.
    const DTYPE: &'static str;

    /// Raw strided GEMM: `c <- alpha * a * b + beta * c`.
    ///
    /// # Safety
    /// All pointer/stride combinations must address valid memory; see
    /// [`matrixmultiply::sgemm`]. Use [`crate::nn::ops::gemm`] instead.
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

    /// Lossless little-endian encoding of one element.
    fn write_le(self, out: &mut Vec<u8>);

    /// Converts an `f64` literal; panics only for values the type cannot hold.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

/// Decodes a little-endian element of the given stored dtype into `T`.
pub(crate) fn read_le<T: Scalar>(dtype: &str, bytes: &[u8]) -> Option<T> {
    match dtype {
        "f32" => T::from_f32(f32::from_le_bytes(bytes.try_into().ok()?)),
        "f64" => T::from_f64(f64::from_le_bytes(bytes.try_into().ok()?)),
        _ => None,
    }
}

pub(crate) fn dtype_width(dtype: &str) -> Option<usize> {
    match dtype {
        "f32" => Some(4),
        "f64" => Some(8),
        _ => None,
    }
}
