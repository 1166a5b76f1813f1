//! Pre-affine normalization kernels. Both layer norm (over the last
//! axis) and instance norm (per channel over spatial positions) reduce
//! to normalizing contiguous groups; any learnable affine is applied by
//! separate mul/add ops so the kernels stay idempotent.

use crate::tape::{Tape, VarId};
use crate::tensor::{Result, Scalar, Tensor, TensorError};

pub const NORM_EPS: f64 = 1e-5;

impl<T: Scalar> Tape<T> {
    fn norm_groups(&mut self, x: VarId, m: usize) -> VarId {
        let xv = self.value(x).clone();
        let eps = T::from_f64(NORM_EPS);
        let inv_m = T::from_f64(1.0 / m as f64);
        let groups = xv.numel() / m;
        let src = xv.data();
        let mut data = vec![T::zero(); xv.numel()];
        let mut inv_sigma = vec![T::zero(); groups];
        for gi in 0..groups {
            let xs = &src[gi * m..(gi + 1) * m];
            let mut mu = T::zero();
            for &v in xs {
                mu = mu + v;
            }
            mu = mu * inv_m;
            let mut var = T::zero();
            for &v in xs {
                let d = v - mu;
                var = var + d * d;
            }
            var = var * inv_m;
            let is = T::one() / (var + eps).sqrt();
            inv_sigma[gi] = is;
            let out = &mut data[gi * m..(gi + 1) * m];
            for (o, &v) in out.iter_mut().zip(xs) {
                *o = (v - mu) * is;
            }
        }
        let value = Tensor::from_vec(xv.shape().to_vec(), data.clone()).expect("norm shape");
        let xhat = data;
        self.emit(value, move |g, sink| {
            let dx = sink.buf(x);
            for gi in 0..groups {
                let gs = &g[gi * m..(gi + 1) * m];
                let hs = &xhat[gi * m..(gi + 1) * m];
                let mut gmean = T::zero();
                let mut ghmean = T::zero();
                for (&gv, &hv) in gs.iter().zip(hs) {
                    gmean = gmean + gv;
                    ghmean = ghmean + gv * hv;
                }
                gmean = gmean * inv_m;
                ghmean = ghmean * inv_m;
                let is = inv_sigma[gi];
                let ds = &mut dx[gi * m..(gi + 1) * m];
                for i in 0..m {
                    ds[i] = ds[i] + is * (gs[i] - gmean - hs[i] * ghmean);
                }
            }
        })
    }

    /// Normalize over the last axis to zero mean, unit variance.
    pub fn layer_norm(&mut self, x: VarId) -> Result<VarId> {
        let shape = self.value(x).shape();
        if shape.is_empty() {
            return Err(TensorError::RankMismatch {
                op: "layer_norm",
                expected: 1,
                shape: shape.to_vec(),
            });
        }
        let m = *shape.last().unwrap();
        Ok(self.norm_groups(x, m))
    }

    /// Normalize each (batch, channel) group over its trailing positions.
    /// Accepts [N,C,L] or [N,C,H,W].
    pub fn instance_norm(&mut self, x: VarId) -> Result<VarId> {
        let shape = self.value(x).shape().to_vec();
        let m: usize = match shape.len() {
            3 => shape[2],
            4 => shape[2] * shape[3],
            _ => {
                return Err(TensorError::RankMismatch {
                    op: "instance_norm",
                    expected: 4,
                    shape,
                })
            }
        };
        Ok(self.norm_groups(x, m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn constant_input_normalizes_to_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(vec![2, 5], 3.7));
        let y = tape.layer_norm(x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn instance_norm_moments() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::rand_uniform(vec![2, 3, 6, 6], -2.0, 4.0, &mut rng));
        let y = tape.instance_norm(x).unwrap();
        let d = tape.value(y).data();
        for p in 0..6 {
            let plane = &d[p * 36..(p + 1) * 36];
            let mu: f64 = plane.iter().sum::<f64>() / 36.0;
            let var: f64 = plane.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 36.0;
            assert!(mu.abs() < 1e-12, "mean {mu}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn norm_is_idempotent() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::rand_uniform(vec![4, 16], -3.0, 3.0, &mut rng));
        let once = tape.layer_norm(x).unwrap();
        let twice = tape.layer_norm(once).unwrap();
        let diff = tape.value(once).max_abs_diff(tape.value(twice));
        assert!(diff < 1e-5, "idempotence violated by {diff}");
    }
}
