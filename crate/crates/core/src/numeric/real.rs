use std::fmt::{Debug, Display};

use num_traits::Float;

/// Scalar type the tape can run on. Training uses `f32`, verification
/// harnesses use `f64`.
pub trait Real: Float + Default + Debug + Display + Send + Sync + 'static {
    /// `c = a · b + beta · c` over strided row/column views.
    ///
    /// `a` is `m×k`, `b` is `k×n`, `c` is `m×n`. Strides are in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn lit(x: f64) -> Self;

    /// True when no element is NaN or infinite.
    fn all_finite(xs: &[Self]) -> bool;

    fn as_f64(self) -> f64;
}

fn check_extent(len: usize, rows: usize, cols: usize, strides: (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * strides.0 + (cols as isize - 1) * strides.1;
    assert!(
        strides.0 >= 0 && strides.1 >= 0 && (last as usize) < len,
        "gemm view out of bounds"
    );
}

macro_rules! impl_real {
    ($t:ty, $gemm:path, $bits:ty, $exp_mask:expr) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                check_extent(a.len(), m, k, a_strides);
                check_extent(b.len(), k, n, b_strides);
                check_extent(c.len(), m, n, c_strides);
                // SAFETY: every view was bounds-checked against its slice above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
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

            fn all_finite(xs: &[Self]) -> bool {
                // branch-free so the scan vectorises
                let hit = xs
                    .iter()
                    .fold(0 as $bits, |acc, v| acc | (((v.to_bits() & $exp_mask) == $exp_mask) as $bits));
                hit == 0
            }

            #[inline]
            fn lit(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm, u32, 0x7f80_0000u32);
impl_real!(f64, matrixmultiply::dgemm, u64, 0x7ff0_0000_0000_0000u64);
