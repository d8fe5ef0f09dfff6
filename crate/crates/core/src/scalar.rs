//! The floating-point element type shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar usable as a tensor element.
///
/// Implemented for `f32` and `f64`. Everything generic in this crate is
/// written against this trait; `f64` is the default everywhere a default
/// type parameter is offered.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64` (exact for `f64`, rounding for `f32`).
    fn of(x: f64) -> Self;

    /// Widening conversion to `f64`.
    fn f64(self) -> f64;

    /// Round-trip through `f32` storage precision.
    fn round_f32(self) -> Self {
        Self::of(self.f64() as f32 as f64)
    }

    /// Strided `c += a · b` with `a: m × k`, `b: k × n`, `c: m × n`; each
    /// operand is given as (buffer, row stride, column stride).
    #[allow(clippy::too_many_arguments)]
    fn gemm_acc(
        m: usize,
        k: usize,
        n: usize,
        a: (&[Self], isize, isize),
        b: (&[Self], isize, isize),
        c: (&mut [Self], isize, isize),
    );
}

/// Checks that the strided extents of a `rows × cols` operand fit in `len`.
fn fits(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) -> bool {
    rows == 0 || cols == 0 || ((rows - 1) as isize * rs + (cols - 1) as isize * cs) < len as isize
}

macro_rules! gemm_impl {
    ($f:ident) => {
        #[inline]
        fn gemm_acc(
            m: usize,
            k: usize,
            n: usize,
            a: (&[Self], isize, isize),
            b: (&[Self], isize, isize),
            c: (&mut [Self], isize, isize),
        ) {
            assert!(fits(a.0.len(), m, k, a.1, a.2) && fits(b.0.len(), k, n, b.1, b.2) && fits(c.0.len(), m, n, c.1, c.2));
            assert!(a.1 >= 0 && a.2 >= 0 && b.1 >= 0 && b.2 >= 0 && c.1 >= 0 && c.2 >= 0);
            if m == 0 || n == 0 {
                return;
            }
            // SAFETY: every strided access lies inside its slice (checked
            // above) and `c` is uniquely borrowed.
            unsafe {
                matrixmultiply::$f(
                    m,
                    k,
                    n,
                    1.0,
                    a.0.as_ptr(),
                    a.1,
                    a.2,
                    b.0.as_ptr(),
                    b.1,
                    b.2,
                    1.0,
                    c.0.as_mut_ptr(),
                    c.1,
                    c.2,
                );
            }
        }
    };
}

impl Scalar for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
    gemm_impl!(sgemm);
}

impl Scalar for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
    #[inline]
    fn round_f32(self) -> Self {
        self as f32 as f64
    }
    gemm_impl!(dgemm);
}
