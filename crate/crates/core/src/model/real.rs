use std::fmt::Debug;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Floating-point element type of the model kernels.
///
/// Training runs in `f32`; the `f64` instantiation exists for gradient
/// checking against finite differences.
pub trait Real:
    num_traits::Float + AddAssign + SubAssign + MulAssign + DivAssign + Default + Debug + Send + Sync + 'static
{
    fn of(x: f64) -> Self;

    fn f64(self) -> f64;

    /// `C = alpha * A B + beta * C` on strided views.
    ///
    /// # Safety
    /// Every index reachable through the given dimensions and strides must be
    /// in bounds for the respective pointer, and `c` must not alias `a` or `b`.
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
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }

    fn f64(self) -> f64 {
        self as f64
    }

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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }

    fn f64(self) -> f64 {
        self
    }

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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// A strided matrix view into a slice.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn rows(offset: usize, rs: usize) -> Self {
        View { offset, rs, cs: 1 }
    }

    pub fn t(self) -> Self {
        View { offset: self.offset, rs: self.cs, cs: self.rs }
    }

    fn last(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            self.offset
        } else {
            self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
        }
    }
}

/// `C[m×n] = alpha · A[m×k] · B[k×n] + beta · C` with bounds-checked views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<R: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: R,
    a: &[R],
    va: View,
    b: &[R],
    vb: View,
    beta: R,
    c: &mut [R],
    vc: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(va.last(m, k) < a.len().max(1) || k == 0, "gemm: A view out of bounds");
    assert!(vb.last(k, n) < b.len().max(1) || k == 0, "gemm: B view out of bounds");
    assert!(vc.last(m, n) < c.len(), "gemm: C view out of bounds");
    // SAFETY: bounds checked above; `c` is a distinct mutable borrow.
    unsafe {
        R::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(va.offset),
            va.rs as isize,
            va.cs as isize,
            b.as_ptr().add(vb.offset),
            vb.rs as isize,
            vb.cs as isize,
            beta,
            c.as_mut_ptr().add(vc.offset),
            vc.rs as isize,
            vc.cs as isize,
        )
    }
}

/// Dense row-major `C = op(A) op(B)` (+ `C` when `accumulate`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<R: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[R],
    a_t: bool,
    b: &[R],
    b_t: bool,
    c: &mut [R],
    accumulate: bool,
) {
    let va = if a_t { View { offset: 0, rs: 1, cs: m } } else { View::rows(0, k) };
    let vb = if b_t { View { offset: 0, rs: 1, cs: k } } else { View::rows(0, n) };
    let beta = if accumulate { R::one() } else { R::zero() };
    gemm(m, k, n, R::one(), a, va, b, vb, beta, c, View::rows(0, n));
}
