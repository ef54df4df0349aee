//! Thin safe wrapper over `matrixmultiply::dgemm`.

/// Row-major operand view: `trans = false` means the slice holds the
/// logical matrix row-major; `trans = true` means it holds the transpose.
#[derive(Clone, Copy)]
pub(crate) struct Operand<'a> {
    pub data: &'a [f64],
    pub trans: bool,
}

pub(crate) fn mat(data: &[f64]) -> Operand<'_> {
    Operand { data, trans: false }
}

pub(crate) fn mat_t(data: &[f64]) -> Operand<'_> {
    Operand { data, trans: true }
}

/// `c = a·b + beta·c` for logical shapes a: m×k, b: k×n, c: m×n (row-major).
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: Operand, b: Operand, beta: f64, c: &mut [f64]) {
    assert_eq!(a.data.len(), m * k, "gemm lhs size");
    assert_eq!(b.data.len(), k * n, "gemm rhs size");
    assert_eq!(c.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a.trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b.trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every index reachable through the
    // given strides lies inside the corresponding slice, and `c` does not
    // alias `a` or `b` because it is borrowed mutably.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
