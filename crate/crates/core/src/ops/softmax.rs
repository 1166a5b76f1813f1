//! Softmax over the last axis, max-shifted for stability.

use crate::tape::{Tape, VarId};
use crate::tensor::{Result, Scalar, Tensor, TensorError};

impl<T: Scalar> Tape<T> {
    pub fn softmax_last(&mut self, x: VarId) -> Result<VarId> {
        let xv = self.value(x).clone();
        if xv.rank() == 0 {
            return Err(TensorError::RankMismatch {
                op: "softmax_last",
                expected: 1,
                shape: xv.shape().to_vec(),
            });
        }
        let m = *xv.shape().last().unwrap();
        let rows = xv.numel() / m;
        let src = xv.data();
        let mut data = vec![T::zero(); xv.numel()];
        for r in 0..rows {
            let xs = &src[r * m..(r + 1) * m];
            let mut mx = xs[0];
            for &v in xs {
                if v > mx {
                    mx = v;
                }
            }
            let out = &mut data[r * m..(r + 1) * m];
            let mut sum = T::zero();
            for (o, &v) in out.iter_mut().zip(xs) {
                let e = (v - mx).exp();
                *o = e;
                sum = sum + e;
            }
            let inv = T::one() / sum;
            for o in out.iter_mut() {
                *o = *o * inv;
            }
        }
        let value = Tensor::from_vec(xv.shape().to_vec(), data.clone())?;
        let probs = data;
        Ok(self.emit(value, move |g, sink| {
            let dx = sink.buf(x);
            for r in 0..rows {
                let ps = &probs[r * m..(r + 1) * m];
                let gs = &g[r * m..(r + 1) * m];
                let mut dot = T::zero();
                for (&p, &gv) in ps.iter().zip(gs) {
                    dot = dot + p * gv;
                }
                let ds = &mut dx[r * m..(r + 1) * m];
                for i in 0..m {
                    ds[i] = ds[i] + ps[i] * (gs[i] - dot);
                }
            }
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn uniform_logits_give_uniform_probs() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![3]));
        let y = tape.softmax_last(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn rows_sum_to_one() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::rand_uniform(vec![5, 7], -30.0, 30.0, &mut rng));
        let y = tape.softmax_last(x).unwrap();
        let d = tape.value(y).data();
        for r in 0..5 {
            let s: f64 = d[r * 7..(r + 1) * 7].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(d[r * 7..(r + 1) * 7].iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn jacobian_rows_sum_to_zero_at_uniform() {
        // With p uniform, (diag(p) - p p^T) row sums are zero, so a
        // uniform upstream gradient produces a zero input gradient.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![4]));
        let y = tape.softmax_last(x).unwrap();
        let s = tape.sum_all(y);
        let grads = tape.backward(s).unwrap();
        for &v in grads.get(x).unwrap().data() {
            assert!(v.abs() < 1e-15);
        }
    }
}
