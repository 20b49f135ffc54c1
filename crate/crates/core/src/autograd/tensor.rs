use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;

use num_traits::Float;

/// Scalar type the engine computes in. Implemented for `f32` (training) and
/// `f64` (oracles and gradient checks).
pub trait Real: Float + Default + Debug + Send + Sync + 'static {
    /// Width tag used in checkpoints and diagnostics.
    const BITS: u32;

    fn of(x: f64) -> Self;
    fn f64(self) -> f64;

    /// `c = a · b + beta · c` for row-major-with-strides operands.
    ///
    /// Strides are `(row_stride, col_stride)` in elements, so transposed
    /// operands are expressed without copying.
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
    );
}

impl Real for f32 {
    const BITS: u32 = 32;

    fn of(x: f64) -> Self {
        x as f32
    }

    fn f64(self) -> f64 {
        self as f64
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        (rsa, csa): (isize, isize),
        b: &[f32],
        (rsb, csb): (isize, isize),
        beta: f32,
        c: &mut [f32],
    ) {
        check_gemm_bounds(m, k, n, a.len(), (rsa, csa), b.len(), (rsb, csb), c.len());
        if m == 0 || n == 0 {
            return;
        }
        gemm_f32(m, k, n, a, (rsa, csa), b, (rsb, csb), beta, c);
    }
}

impl Real for f64 {
    const BITS: u32 = 64;

    fn of(x: f64) -> Self {
        x
    }

    fn f64(self) -> f64 {
        self
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        (rsa, csa): (isize, isize),
        b: &[f64],
        (rsb, csb): (isize, isize),
        beta: f64,
        c: &mut [f64],
    ) {
        check_gemm_bounds(m, k, n, a.len(), (rsa, csa), b.len(), (rsb, csb), c.len());
        if m == 0 || n == 0 {
            return;
        }
        gemm_f64(m, k, n, a, (rsa, csa), b, (rsb, csb), beta, c);
    }
}

#[allow(clippy::too_many_arguments)]
fn check_gemm_bounds(
    m: usize,
    k: usize,
    n: usize,
    a_len: usize,
    (rsa, csa): (isize, isize),
    b_len: usize,
    (rsb, csb): (isize, isize),
    c_len: usize,
) {
    let extent = |rows: usize, cols: usize, rs: isize, cs: isize| -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
        }
    };
    assert!(
        rsa >= 0 && csa >= 0 && rsb >= 0 && csb >= 0,
        "gemm: negative stride"
    );
    assert!(extent(m, k, rsa, csa) <= a_len, "gemm: lhs out of bounds");
    assert!(extent(k, n, rsb, csb) <= b_len, "gemm: rhs out of bounds");
    assert!(m * n <= c_len, "gemm: output out of bounds");
}

// matrixmultiply exposes raw-pointer entry points; `gemm_shim` is the only
// place the crate allows `unsafe`.
#[allow(clippy::too_many_arguments)]
fn gemm_f32(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    sa: (isize, isize),
    b: &[f32],
    sb: (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    // Packing overhead dominates below a few hundred MACs.
    if m * k * n < 512 {
        naive_gemm(m, k, n, a, sa, b, sb, beta, c);
    } else {
        gemm_shim::sgemm(m, k, n, a, sa, b, sb, beta, c);
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm_f64(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: (isize, isize),
    b: &[f64],
    sb: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m * k * n < 512 {
        naive_gemm(m, k, n, a, sa, b, sb, beta, c);
    } else {
        gemm_shim::dgemm(m, k, n, a, sa, b, sb, beta, c);
    }
}

#[allow(clippy::too_many_arguments)]
fn naive_gemm<F: Float>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    (rsa, csa): (isize, isize),
    b: &[F],
    (rsb, csb): (isize, isize),
    beta: F,
    c: &mut [F],
) {
    let (rsa, csa, rsb, csb) = (rsa as usize, csa as usize, rsb as usize, csb as usize);
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        if beta == F::zero() {
            row.iter_mut().for_each(|x| *x = F::zero());
        } else if beta != F::one() {
            row.iter_mut().for_each(|x| *x = *x * beta);
        }
        for p in 0..k {
            let av = a[i * rsa + p * csa];
            if av == F::zero() {
                continue;
            }
            for (j, out) in row.iter_mut().enumerate() {
                *out = *out + av * b[p * rsb + j * csb];
            }
        }
    }
}

#[allow(unsafe_code)]
mod gemm_shim {
    #[allow(clippy::too_many_arguments)]
    pub fn sgemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        (rsa, csa): (isize, isize),
        b: &[f32],
        (rsb, csb): (isize, isize),
        beta: f32,
        c: &mut [f32],
    ) {
        // SAFETY: extents were checked by `check_gemm_bounds`; `c` is a
        // dense row-major m×n block that does not alias `a` or `b`.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
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
            )
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn dgemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        (rsa, csa): (isize, isize),
        b: &[f64],
        (rsb, csb): (isize, isize),
        beta: f64,
        c: &mut [f64],
    ) {
        // SAFETY: as in `sgemm`.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
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
            )
        }
    }
}

/// Dense n-dimensional array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    /// Panics if `data.len()` differs from the product of `shape`.
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Self {
        Tensor::new(shape.to_vec(), data.iter().map(|&x| F::of(x)).collect())
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.f64()).collect()
    }

    /// Rows of the view that keeps the last axis and flattens the rest.
    pub fn rows(&self) -> core::slice::ChunksExact<'_, F> {
        self.data.chunks_exact(self.last_dim().max(1))
    }

    /// Index of the maximum of every last-axis row; ties go to the lower index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        self.rows()
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}
