//! Layout ops: reshape, axis concat/slice, and the batched matrix
//! transpose used by the attention blocks.

use crate::tape::{Tape, VarId};
use crate::tensor::{Result, Scalar, Tensor, TensorError};

impl<T: Scalar> Tape<T> {
    /// Reinterpret the shape; storage is shared, gradient reshapes back.
    pub fn reshape(&mut self, x: VarId, shape: impl Into<Vec<usize>>) -> Result<VarId> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.emit(out, move |g, sink| {
            let dx = sink.buf(x);
            for i in 0..g.len() {
                dx[i] = dx[i] + g[i];
            }
        }))
    }

    /// Concatenate along `axis`; all other dims must match.
    pub fn concat(&mut self, parts: &[VarId], axis: usize) -> Result<VarId> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat",
                reason: "no inputs".into(),
            });
        }
        let first = self.value(parts[0]).shape().to_vec();
        let rank = first.len();
        if axis >= rank {
            return Err(TensorError::Invalid {
                op: "concat",
                reason: format!("axis {axis} out of range for rank {rank}"),
            });
        }
        let mut axis_dims = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != rank
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            axis_dims.push(s[axis]);
        }
        let total_axis: usize = axis_dims.iter().sum();
        let mut out_shape = first.clone();
        out_shape[axis] = total_axis;

        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();

        let mut data = vec![T::zero(); outer * total_axis * inner];
        let mut offset = 0usize;
        let tensors: Vec<Tensor<T>> = parts.iter().map(|&p| self.value(p).clone()).collect();
        for (t, &ad) in tensors.iter().zip(&axis_dims) {
            let src = t.data();
            for o in 0..outer {
                let dst_base = (o * total_axis + offset) * inner;
                let src_base = o * ad * inner;
                data[dst_base..dst_base + ad * inner]
                    .copy_from_slice(&src[src_base..src_base + ad * inner]);
            }
            offset += ad;
        }
        let value = Tensor::from_vec(out_shape, data)?;
        let parts: Vec<VarId> = parts.to_vec();
        Ok(self.emit(value, move |g, sink| {
            let mut offset = 0usize;
            for (&p, &ad) in parts.iter().zip(&axis_dims) {
                let dx = sink.buf(p);
                for o in 0..outer {
                    let src_base = (o * total_axis + offset) * inner;
                    let dst_base = o * ad * inner;
                    for i in 0..ad * inner {
                        dx[dst_base + i] = dx[dst_base + i] + g[src_base + i];
                    }
                }
                offset += ad;
            }
        }))
    }

    /// Take `len` entries starting at `start` along `axis`.
    pub fn slice_axis(&mut self, x: VarId, axis: usize, start: usize, len: usize) -> Result<VarId> {
        let xv = self.value(x).clone();
        let shape = xv.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(TensorError::Invalid {
                op: "slice_axis",
                reason: format!(
                    "slice {start}..{} out of range on axis {axis} of {shape:?}",
                    start + len
                ),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let ad = shape[axis];

        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = vec![T::zero(); outer * len * inner];
        for o in 0..outer {
            let src_base = (o * ad + start) * inner;
            let dst_base = o * len * inner;
            data[dst_base..dst_base + len * inner]
                .copy_from_slice(&xv.data()[src_base..src_base + len * inner]);
        }
        let value = Tensor::from_vec(out_shape, data)?;
        Ok(self.emit(value, move |g, sink| {
            let dx = sink.buf(x);
            for o in 0..outer {
                let dst_base = (o * ad + start) * inner;
                let src_base = o * len * inner;
                for i in 0..len * inner {
                    dx[dst_base + i] = dx[dst_base + i] + g[src_base + i];
                }
            }
        }))
    }

    /// Transpose the last two axes of a rank-3 tensor: [b,m,n] -> [b,n,m].
    pub fn transpose12(&mut self, x: VarId) -> Result<VarId> {
        let xv = self.value(x).clone();
        if xv.rank() != 3 {
            return Err(TensorError::RankMismatch {
                op: "transpose12",
                expected: 3,
                shape: xv.shape().to_vec(),
            });
        }
        let (b, m, n) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let mut data = vec![T::zero(); b * m * n];
        let src = xv.data();
        for bi in 0..b {
            let base = bi * m * n;
            for i in 0..m {
                for j in 0..n {
                    data[base + j * m + i] = src[base + i * n + j];
                }
            }
        }
        let value = Tensor::from_vec(vec![b, n, m], data)?;
        Ok(self.emit(value, move |g, sink| {
            let dx = sink.buf(x);
            for bi in 0..b {
                let base = bi * m * n;
                for j in 0..n {
                    for i in 0..m {
                        dx[base + i * n + j] = dx[base + i * n + j] + g[base + j * m + i];
                    }
                }
            }
        }))
    }
}
