//! Dense numeric kernels shared by the tape ops and no-tape inference.
//!
//! Everything is row-major `f64`. Transposes are expressed through strides,
//! so no operand is ever physically transposed.

/// `c = op(a)[m,k] . op(b)[k,n] + beta * c`, with `op` transposing the
/// stored operand when the corresponding flag is set.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
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
        );
    }
}

/// One small matrix-vector product per row: `out[e,:] = mats[e,:,:] . vecs[e,:]`.
pub(crate) fn bmv(mats: &[f64], vecs: &[f64], rows: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(mats.len(), rows * n * n);
    debug_assert_eq!(vecs.len(), rows * n);
    debug_assert_eq!(out.len(), rows * n);
    for e in 0..rows {
        let me = &mats[e * n * n..(e + 1) * n * n];
        let ve = &vecs[e * n..(e + 1) * n];
        let oe = &mut out[e * n..(e + 1) * n];
        for (oi, mrow) in oe.iter_mut().zip(me.chunks_exact(n)) {
            let mut acc = 0.0;
            for (&mij, &vj) in mrow.iter().zip(ve) {
                acc += mij * vj;
            }
            *oi = acc;
        }
    }
}

/// Sum message rows into their target rows, in message order.
pub(crate) fn scatter_sum(messages: &[f64], targets: &[usize], cols: usize, out: &mut [f64]) {
    for (row, &t) in messages.chunks_exact(cols).zip(targets) {
        for (acc, &v) in out[t * cols..(t + 1) * cols].iter_mut().zip(row) {
            *acc += v;
        }
    }
}

/// `y = x[rows,in] . w[out,in]^T + bias`, the inference-path twin of the
/// taped linear op.
pub(crate) fn linear_forward(x: &[f64], w: &[f64], bias: &[f64], rows: usize, in_dim: usize, out_dim: usize, y: &mut [f64]) {
    debug_assert_eq!(bias.len(), out_dim);
    debug_assert_eq!(y.len(), rows * out_dim);
    for row in y.chunks_exact_mut(out_dim) {
        row.copy_from_slice(bias);
    }
    gemm(rows, in_dim, out_dim, x, false, w, true, 1.0, y);
}

/// In-place ReLU.
pub(crate) fn relu_inplace(x: &mut [f64]) {
    for v in x.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}
