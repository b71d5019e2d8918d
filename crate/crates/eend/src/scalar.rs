//! Element type abstraction: all numeric code is generic over [`Scalar`],
//! implemented for `f32` (training speed) and `f64` (gradient-check headroom).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point element type for tensors, implemented for `f32` and `f64`.
///
/// Besides the usual float ops, a `Scalar` carries the dense matrix-product
/// kernel used by every tensor contraction, so the one hot loop dispatches
/// to a type-specific implementation.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Short name used in logs and run manifests.
    const NAME: &'static str;

    /// `c = alpha * a * b + beta * c` over strided buffers,
    /// where `a` is `m x k` and `b` is `k x n` after applying the strides.
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

    /// Conversion from `f64` for constants and config values.
    #[inline]
    fn fl(x: f64) -> Self {
        Self::from_f64(x).expect("finite constant")
    }

    /// Widen to `f64` for logging, scoring, and cost accumulation.
    #[inline]
    fn wide(self) -> f64 {
        self.to_f64().expect("finite value")
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline]
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
        // Safety: callers (the tape) guarantee buffer extents match the
        // shapes and strides they pass.
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta,
                c.as_mut_ptr(), rsc, csc,
            );
        }
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline]
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
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta,
                c.as_mut_ptr(), rsc, csc,
            );
        }
    }
}
