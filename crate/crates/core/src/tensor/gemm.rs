//! Row-major GEMM entry points backed by `matrixmultiply`.

macro_rules! gemm_impl {
    ($name:ident, $t:ty, $kernel:path) => {
        #[allow(clippy::too_many_arguments)]
        pub(super) fn $name(
            m: usize,
            k: usize,
            n: usize,
            a: &[$t],
            a_trans: bool,
            b: &[$t],
            b_trans: bool,
            c: &mut [$t],
            accumulate: bool,
        ) {
            assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
            if m == 0 || n == 0 {
                return;
            }
            if k == 0 {
                if !accumulate {
                    c[..m * n].iter_mut().for_each(|v| *v = 0.0);
                }
                return;
            }
            let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
            let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
            let beta = if accumulate { 1.0 } else { 0.0 };
            // SAFETY: slice lengths checked above; strides describe in-bounds
            // row-major layouts of the stated dimensions.
            unsafe {
                $kernel(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
            }
        }
    };
}

gemm_impl!(sgemm, f32, matrixmultiply::sgemm);
gemm_impl!(dgemm, f64, matrixmultiply::dgemm);
