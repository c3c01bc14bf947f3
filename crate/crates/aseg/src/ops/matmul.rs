//! Matrix products: plain 2-D and batched patch variants.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{TensorError, TensorResult};
use crate::linalg::{gemm_nn, gemm_nt, transpose};
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tape::{record, Backward, GradSink, NodeId};
use crate::tensor::Tensor;

struct MatmulBackward<T: Scalar> {
    a: Option<NodeId>,
    b: Option<NodeId>,
    a_data: Arc<Vec<T>>,
    b_data: Arc<Vec<T>>,
    m: usize,
    k: usize,
    n: usize,
}

impl<T: Scalar> Backward<T> for MatmulBackward<T> {
    fn apply(&self, go: &[T], sink: &mut GradSink<'_, T>) {
        let (m, k, n) = (self.m, self.k, self.n);
        if let Some(id) = self.a {
            let bt = transpose(k, n, &self.b_data);
            gemm_nn(m, n, k, go, &bt, sink.accum(id));
        }
        if let Some(id) = self.b {
            let at = transpose(m, k, &self.a_data);
            gemm_nn(k, m, n, &at, go, sink.accum(id));
        }
    }
}

/// `a[1,1,m,k] . b[1,1,k,n] -> [1,1,m,n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> TensorResult<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n() != 1 || sa.c() != 1 || sb.n() != 1 || sb.c() != 1 || sa.w() != sb.h() {
        return Err(TensorError::MatmulInner {
            op: "matmul",
            lhs: sa,
            rhs: sb,
        });
    }
    let (m, k, n) = (sa.h(), sa.w(), sb.w());
    let mut data = vec![T::zero(); m * n];
    gemm_nn(m, k, n, a.data(), b.data(), &mut data);
    Ok(record(&[a, b], Shape::new(1, 1, m, n), data, || {
        Box::new(MatmulBackward {
            a: a.node(),
            b: b.node(),
            a_data: a.data_arc(),
            b_data: b.data_arc(),
            m,
            k,
            n,
        })
    }))
}

/// `a[1,1,m,k] . b[1,1,n,k]^T -> [1,1,m,n]`: multiplies by the transpose of
/// the second operand without materializing it. The gradient reaches `b` in
/// its stored orientation.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> TensorResult<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n() != 1 || sa.c() != 1 || sb.n() != 1 || sb.c() != 1 || sa.w() != sb.w() {
        return Err(TensorError::MatmulInner {
            op: "matmul_nt",
            lhs: sa,
            rhs: sb,
        });
    }
    let (m, k, n) = (sa.h(), sa.w(), sb.h());
    let mut data = vec![T::zero(); m * n];
    gemm_nt(m, k, n, a.data(), b.data(), &mut data);
    Ok(record(&[a, b], Shape::new(1, 1, m, n), data, || {
        Box::new(MatmulNtBackward {
            a: a.node(),
            b: b.node(),
            a_data: a.data_arc(),
            b_data: b.data_arc(),
            m,
            k,
            n,
        })
    }))
}

struct MatmulNtBackward<T: Scalar> {
    a: Option<NodeId>,
    b: Option<NodeId>,
    a_data: Arc<Vec<T>>,
    b_data: Arc<Vec<T>>,
    m: usize,
    k: usize,
    n: usize,
}

impl<T: Scalar> Backward<T> for MatmulNtBackward<T> {
    fn apply(&self, go: &[T], sink: &mut GradSink<'_, T>) {
        let (m, k, n) = (self.m, self.k, self.n);
        // y = a . b^T  =>  da = go . b ; db = go^T . a
        if let Some(id) = self.a {
            gemm_nn(m, n, k, go, &self.b_data, sink.accum(id));
        }
        if let Some(id) = self.b {
            let got = transpose(m, n, go);
            gemm_nn(n, m, k, &got, &self.a_data, sink.accum(id));
        }
    }
}

// ---------------------------------------------------------------------------
// batched products over patches
// ---------------------------------------------------------------------------

struct BmmNtBackward<T: Scalar> {
    a: Option<NodeId>,
    b: Option<NodeId>,
    a_data: Arc<Vec<T>>,
    b_data: Arc<Vec<T>>,
    m: usize,
    k: usize,
    n: usize,
}

impl<T: Scalar> Backward<T> for BmmNtBackward<T> {
    fn apply(&self, go: &[T], sink: &mut GradSink<'_, T>) {
        let (m, k, n) = (self.m, self.k, self.n);
        if let Some(id) = self.a {
            sink.accum(id)
                .par_chunks_mut(m * k)
                .zip(go.par_chunks(m * n))
                .zip(self.b_data.par_chunks(n * k))
                .for_each(|((da, go_p), b_p)| {
                    gemm_nn(m, n, k, go_p, b_p, da);
                });
        }
        if let Some(id) = self.b {
            sink.accum(id)
                .par_chunks_mut(n * k)
                .zip(go.par_chunks(m * n))
                .zip(self.a_data.par_chunks(m * k))
                .for_each(|((db, go_p), a_p)| {
                    let got = transpose(m, n, go_p);
                    gemm_nn(n, m, k, &got, a_p, db);
                });
        }
    }
}

/// Per-batch-item `a_p[m,k] . b_p[n,k]^T`: `a[B,1,m,k], b[B,1,n,k] -> [B,1,m,n]`.
///
/// This is the query-key score product: one item per patch.
pub fn bmm_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> TensorResult<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n() != sb.n() || sa.c() != 1 || sb.c() != 1 || sa.w() != sb.w() {
        return Err(TensorError::MatmulInner {
            op: "bmm_nt",
            lhs: sa,
            rhs: sb,
        });
    }
    let (batches, m, k, n) = (sa.n(), sa.h(), sa.w(), sb.h());
    let mut data = vec![T::zero(); batches * m * n];
    data.par_chunks_mut(m * n)
        .zip(a.data().par_chunks(m * k))
        .zip(b.data().par_chunks(n * k))
        .for_each(|((out, a_p), b_p)| {
            gemm_nt(m, k, n, a_p, b_p, out);
        });
    Ok(record(&[a, b], Shape::new(batches, 1, m, n), data, || {
        Box::new(BmmNtBackward {
            a: a.node(),
            b: b.node(),
            a_data: a.data_arc(),
            b_data: b.data_arc(),
            m,
            k,
            n,
        })
    }))
}

struct BmmNnBackward<T: Scalar> {
    a: Option<NodeId>,
    b: Option<NodeId>,
    a_data: Arc<Vec<T>>,
    b_data: Arc<Vec<T>>,
    m: usize,
    k: usize,
    n: usize,
}

impl<T: Scalar> Backward<T> for BmmNnBackward<T> {
    fn apply(&self, go: &[T], sink: &mut GradSink<'_, T>) {
        let (m, k, n) = (self.m, self.k, self.n);
        if let Some(id) = self.a {
            sink.accum(id)
                .par_chunks_mut(m * k)
                .zip(go.par_chunks(m * n))
                .zip(self.b_data.par_chunks(k * n))
                .for_each(|((da, go_p), b_p)| {
                    let bt = transpose(k, n, b_p);
                    gemm_nn(m, n, k, go_p, &bt, da);
                });
        }
        if let Some(id) = self.b {
            sink.accum(id)
                .par_chunks_mut(k * n)
                .zip(go.par_chunks(m * n))
                .zip(self.a_data.par_chunks(m * k))
                .for_each(|((db, go_p), a_p)| {
                    let at = transpose(m, k, a_p);
                    gemm_nn(k, m, n, &at, go_p, db);
                });
        }
    }
}

/// Per-batch-item `a_p[m,k] . b_p[k,n]`: `a[B,1,m,k], b[B,1,k,n] -> [B,1,m,n]`.
pub fn bmm_nn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> TensorResult<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n() != sb.n() || sa.c() != 1 || sb.c() != 1 || sa.w() != sb.h() {
        return Err(TensorError::MatmulInner {
            op: "bmm_nn",
            lhs: sa,
            rhs: sb,
        });
    }
    let (batches, m, k, n) = (sa.n(), sa.h(), sa.w(), sb.w());
    let mut data = vec![T::zero(); batches * m * n];
    data.par_chunks_mut(m * n)
        .zip(a.data().par_chunks(m * k))
        .zip(b.data().par_chunks(k * n))
        .for_each(|((out, a_p), b_p)| {
            gemm_nn(m, k, n, a_p, b_p, out);
        });
    Ok(record(&[a, b], Shape::new(batches, 1, m, n), data, || {
        Box::new(BmmNnBackward {
            a: a.node(),
            b: b.node(),
            a_data: a.data_arc(),
            b_data: b.data_arc(),
            m,
            k,
            n,
        })
    }))
}
