use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point element type every tensor, field, and model is generic over.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Short name used in manifests and diagnostics.
    const NAME: &'static str;

    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable")
    }

    /// `c += a · b` with `a: m×k`, `b: k×n`, `c: m×n` given by element
    /// strides (row stride, column stride).
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(m: usize, k: usize, n: usize, a: &[Self], sa: (isize, isize), b: &[Self], sb: (isize, isize), c: &mut [Self], sc: (isize, isize));
}

macro_rules! strided_gemm {
    ($t:ty, $f:path) => {
        fn gemm_strided(m: usize, k: usize, n: usize, a: &[$t], sa: (isize, isize), b: &[$t], sb: (isize, isize), c: &mut [$t], sc: (isize, isize)) {
            if m == 0 || n == 0 {
                return;
            }
            let span = |rows: usize, cols: usize, s: (isize, isize)| {
                if rows == 0 || cols == 0 { 0 } else { (rows - 1) * s.0 as usize + (cols - 1) * s.1 as usize + 1 }
            };
            assert!(a.len() >= span(m, k, sa) && b.len() >= span(k, n, sb) && c.len() >= span(m, n, sc));
            // SAFETY: the asserts above keep every strided access in bounds
            unsafe { $f(m, k, n, 1.0, a.as_ptr(), sa.0, sa.1, b.as_ptr(), sb.0, sb.1, 1.0, c.as_mut_ptr(), sc.0, sc.1) }
        }
    };
}

impl Real for f32 {
    const NAME: &'static str = "f32";
    strided_gemm!(f32, matrixmultiply::sgemm);
}

impl Real for f64 {
    const NAME: &'static str = "f64";
    strided_gemm!(f64, matrixmultiply::dgemm);
}
