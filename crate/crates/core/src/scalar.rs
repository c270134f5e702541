//! Element types for tensors.
//!
//! Everything numeric is generic over [`Scalar`] so the same model code runs
//! in 32-bit for training and in 64-bit for finite-difference gradient
//! checks, where single precision is too noisy.

use std::fmt;

/// A real element type backed by a dense gemm kernel.
pub trait Scalar:
    Copy
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + num_traits::Float
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c[m,n] += alpha * a·b`, with explicit row/column strides for `a` and
    /// `b` so transposed views need no copy. `c` is dense row-major and is
    /// scaled by `beta` first.
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
    );
}

/// Bounds-check a strided operand before handing it to the unsafe kernel.
fn check_operand(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let max = (rows - 1) as isize * rs + (cols - 1) as isize * cs;
    let min = std::cmp::min((rows - 1) as isize * rs, (cols - 1) as isize * cs).min(0);
    assert!(min >= 0 && (max as usize) < len, "gemm operand out of bounds");
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

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
    ) {
        check_operand(a.len(), m, k, rsa, csa);
        check_operand(b.len(), k, n, rsb, csb);
        assert!(c.len() >= m * n, "gemm output out of bounds");
        unsafe {
            matrixmultiply::sgemm(
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
                n as isize,
                1,
            );
        }
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

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
    ) {
        check_operand(a.len(), m, k, rsa, csa);
        check_operand(b.len(), k, n, rsb, csb);
        assert!(c.len() >= m * n, "gemm output out of bounds");
        unsafe {
            matrixmultiply::dgemm(
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
                n as isize,
                1,
            );
        }
    }
}
