//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! All tensor math is written against [`Scalar`], which is implemented for
//! `f32` and `f64`. The trait carries the few hooks that cannot be expressed
//! through `num_traits::Float` alone: a dense GEMM kernel, a stable dtype tag
//! and little-endian byte conversion for checkpoints.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Row/column strides of a matrix operand, in elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Strides {
    pub row: usize,
    pub col: usize,
}

impl Strides {
    /// Contiguous row-major layout with `cols` columns.
    pub fn row_major(cols: usize) -> Self {
        Self { row: cols, col: 1 }
    }

    /// The transpose view of a contiguous row-major matrix with `cols` columns.
    pub fn transposed(cols: usize) -> Self {
        Self { row: 1, col: cols }
    }
}

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
    /// Tag written into checkpoints.
    const DTYPE: &'static str;
    /// Width of one encoded value in bytes.
    const BYTES: usize;

    /// Converts an `f64` literal. Panics only if the value is unrepresentable,
    /// which cannot happen for `f32`/`f64`.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable in scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// `c = alpha * a @ b + beta * c` for an `m x k` by `k x n` product.
    ///
    /// Operand views are described by strides, so transposed products need no
    /// copies. Slices are bounds-checked against the extents before the
    /// kernel runs.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        sa: Strides,
        b: &[Self],
        sb: Strides,
        beta: Self,
        c: &mut [Self],
        sc: Strides,
    );
}

fn extent(rows: usize, cols: usize, s: Strides) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * s.row + (cols - 1) * s.col + 1
    }
}

macro_rules! impl_scalar {
    ($t:ty, $tag:literal, $bytes:literal, $kernel:path) => {
        impl Scalar for $t {
            const DTYPE: &'static str = $tag;
            const BYTES: usize = $bytes;

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; $bytes];
                buf.copy_from_slice(&bytes[..$bytes]);
                <$t>::from_le_bytes(buf)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                sa: Strides,
                b: &[Self],
                sb: Strides,
                beta: Self,
                c: &mut [Self],
                sc: Strides,
            ) {
                assert!(a.len() >= extent(m, k, sa), "gemm: lhs buffer too small");
                assert!(b.len() >= extent(k, n, sb), "gemm: rhs buffer too small");
                assert!(c.len() >= extent(m, n, sc), "gemm: output buffer too small");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the asserts above guarantee every strided access the
                // kernel performs stays within the three slices, and `c` is
                // borrowed mutably so it cannot alias `a` or `b`.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        sa.row as isize,
                        sa.col as isize,
                        b.as_ptr(),
                        sb.row as isize,
                        sb.col as isize,
                        beta,
                        c.as_mut_ptr(),
                        sc.row as isize,
                        sc.col as isize,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, "f32", 4, matrixmultiply::sgemm);
impl_scalar!(f64, "f64", 8, matrixmultiply::dgemm);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposed_operand() {
        // a = [[1,2],[3,4]], b^T where b = [[5,6],[7,8]] -> a @ b^T
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        f64::gemm(
            2,
            2,
            2,
            1.0,
            &a,
            Strides::row_major(2),
            &b,
            Strides::transposed(2),
            0.0,
            &mut c,
            Strides::row_major(2),
        );
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn byte_round_trip() {
        let mut buf = Vec::new();
        (-1.25f32).write_le(&mut buf);
        std::f64::consts::PI.write_le(&mut buf);
        assert_eq!(f32::read_le(&buf[..4]), -1.25);
        assert_eq!(f64::read_le(&buf[4..]), std::f64::consts::PI);
    }
}
