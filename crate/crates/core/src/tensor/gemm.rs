//! Bounds-checked entry point to the strided GEMM kernels.

type Mat<P> = (P, isize, isize);

fn max_index(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    (rows - 1) * rs as usize + (cols - 1) * cs as usize
}

/// Validates strides and extents, handles empty products, then hands raw
/// pointers to `kernel`. Strides must be non-negative.
#[allow(clippy::too_many_arguments)]
pub(super) fn checked<F: num_traits::Float>(
    m: usize,
    k: usize,
    n: usize,
    alpha: F,
    a: (&[F], isize, isize),
    b: (&[F], isize, isize),
    beta: F,
    c: (&mut [F], isize, isize),
    kernel: impl FnOnce(usize, usize, usize, F, Mat<*const F>, Mat<*const F>, F, Mat<*mut F>),
) {
    assert!(
        [a.1, a.2, b.1, b.2, c.1, c.2].iter().all(|&s| s >= 0),
        "gemm: negative stride"
    );
    if m == 0 || n == 0 {
        return;
    }
    assert!(
        max_index(m, n, c.1, c.2) < c.0.len(),
        "gemm: C out of bounds"
    );
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = i * c.1 as usize + j * c.2 as usize;
                c.0[idx] = if beta == F::zero() {
                    F::zero()
                } else {
                    beta * c.0[idx]
                };
            }
        }
        return;
    }
    assert!(
        max_index(m, k, a.1, a.2) < a.0.len(),
        "gemm: A out of bounds"
    );
    assert!(
        max_index(k, n, b.1, b.2) < b.0.len(),
        "gemm: B out of bounds"
    );
    kernel(
        m,
        k,
        n,
        alpha,
        (a.0.as_ptr(), a.1, a.2),
        (b.0.as_ptr(), b.1, b.2),
        beta,
        (c.0.as_mut_ptr(), c.1, c.2),
    );
}
