//! Matrix products. Shapes follow two patterns: `[m,k] x [k,n]`
//! (optionally with a leading batch axis on the left operand sharing
//! one right matrix) and fully batched `[b,m,k] x [b,k,n]`.

use crate::tape::{Tape, VarId};
use crate::tensor::{Result, Scalar, Tensor, TensorError};

/// out[m,n] += a[m,k] * b[k,n]
pub(crate) fn mm_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
}

/// out[m,n] += a[m,k] * b[n,k]^T (rows of b are dotted with rows of a)
pub(crate) fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for l in 0..k {
                acc = acc + arow[l] * brow[l];
            }
            out[i * n + j] = out[i * n + j] + acc;
        }
    }
}

/// out[m,n] += a[k,m]^T * b[k,n]
pub(crate) fn mm_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for l in 0..k {
        let arow = &a[l * m..(l + 1) * m];
        let brow = &b[l * n..(l + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
}

fn mm_dims(op: &'static str, a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize)> {
    // Returns (batch, m, k, n); batch = 1 for rank-2 lhs.
    let (batch, m, ka) = match a.len() {
        2 => (1, a[0], a[1]),
        3 => (a[0], a[1], a[2]),
        _ => {
            return Err(TensorError::RankMismatch {
                op,
                expected: 2,
                shape: a.to_vec(),
            })
        }
    };
    if b.len() != 2 || b[0] != ka {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok((batch, m, ka, b[1]))
}

impl<T: Scalar> Tape<T> {
    /// `a [m,k] or [b,m,k]` times a shared right matrix `w [k,n]`.
    pub fn matmul(&mut self, a: VarId, w: VarId) -> Result<VarId> {
        let (av, wv) = (self.value(a).clone(), self.value(w).clone());
        let (batch, m, k, n) = mm_dims("matmul", av.shape(), wv.shape())?;
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            mm_nn(
                &av.data()[bi * m * k..],
                wv.data(),
                m,
                k,
                n,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let out_shape = if av.rank() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        let value = Tensor::from_vec(out_shape, out)?;
        Ok(self.emit(value, move |g, sink| {
            {
                let da = sink.buf(a);
                for bi in 0..batch {
                    // da = g * w^T
                    mm_nt(
                        &g[bi * m * n..(bi + 1) * m * n],
                        wv.data(),
                        m,
                        n,
                        k,
                        &mut da[bi * m * k..(bi + 1) * m * k],
                    );
                }
            }
            let dw = sink.buf(w);
            for bi in 0..batch {
                // dw += a^T * g (summed over the batch)
                mm_tn(
                    &av.data()[bi * m * k..(bi + 1) * m * k],
                    &g[bi * m * n..(bi + 1) * m * n],
                    k,
                    m,
                    n,
                    dw,
                );
            }
        }))
    }

    /// Fully batched product `[b,m,k] x [b,k,n] -> [b,m,n]`.
    pub fn bmm(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let (ash, bsh) = (av.shape().to_vec(), bv.shape().to_vec());
        if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] || ash[2] != bsh[1] {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                lhs: ash,
                rhs: bsh,
            });
        }
        let (batch, m, k, n) = (ash[0], ash[1], ash[2], bsh[2]);
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            mm_nn(
                &av.data()[bi * m * k..],
                &bv.data()[bi * k * n..],
                m,
                k,
                n,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let value = Tensor::from_vec(vec![batch, m, n], out)?;
        Ok(self.emit(value, move |g, sink| {
            {
                let da = sink.buf(a);
                for bi in 0..batch {
                    mm_nt(
                        &g[bi * m * n..(bi + 1) * m * n],
                        &bv.data()[bi * k * n..(bi + 1) * k * n],
                        m,
                        n,
                        k,
                        &mut da[bi * m * k..(bi + 1) * m * k],
                    );
                }
            }
            let db = sink.buf(b);
            for bi in 0..batch {
                mm_tn(
                    &av.data()[bi * m * k..(bi + 1) * m * k],
                    &g[bi * m * n..(bi + 1) * m * n],
                    k,
                    m,
                    n,
                    &mut db[bi * k * n..(bi + 1) * k * n],
                );
            }
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_2d_known_values() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_vec(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let b = tape.leaf(Tensor::from_vec(vec![2, 1], vec![3.0, 4.0]).unwrap());
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0]);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn matmul_batched_shares_rhs() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::ones(vec![2, 1, 3]));
        let w = tape.leaf(Tensor::ones(vec![3, 2]));
        let y = tape.matmul(a, w).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 1, 2]);
        assert_eq!(tape.value(y).data(), &[3.0, 3.0, 3.0, 3.0]);
        let s = tape.sum_all(y);
        let grads = tape.backward(s).unwrap();
        // dw sums over both batch elements.
        assert_eq!(grads.get(w).unwrap().data(), &[2.0; 6]);
    }

    #[test]
    fn bmm_shape_check() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::ones(vec![2, 3, 4]));
        let b = tape.leaf(Tensor::ones(vec![2, 5, 6]));
        assert!(tape.bmm(a, b).is_err());
    }
}
