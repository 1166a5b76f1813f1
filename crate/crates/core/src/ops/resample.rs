//! Factor-2 spatial resampling: nearest-neighbor upsample and average
//! pool. Upsample followed by average pool is exactly the identity.

use crate::tape::{Tape, VarId};
use crate::tensor::{Result, Scalar, Tensor, TensorError};

fn check_rank4<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    if t.rank() != 4 {
        return Err(TensorError::RankMismatch {
            op,
            expected: 4,
            shape: t.shape().to_vec(),
        });
    }
    Ok((t.dim(0), t.dim(1), t.dim(2), t.dim(3)))
}

impl<T: Scalar> Tape<T> {
    pub fn upsample_nn_x2(&mut self, x: VarId) -> Result<VarId> {
        let xv = self.value(x).clone();
        let (n, c, h, w) = check_rank4("upsample_nn_x2", &xv)?;
        let (h2, w2) = (h * 2, w * 2);
        let mut data = vec![T::zero(); n * c * h2 * w2];
        let src = xv.data();
        for p in 0..n * c {
            let sp = &src[p * h * w..][..h * w];
            let dp = &mut data[p * h2 * w2..][..h2 * w2];
            for i in 0..h {
                for j in 0..w {
                    let v = sp[i * w + j];
                    let base = (2 * i) * w2 + 2 * j;
                    dp[base] = v;
                    dp[base + 1] = v;
                    dp[base + w2] = v;
                    dp[base + w2 + 1] = v;
                }
            }
        }
        let value = Tensor::from_vec(vec![n, c, h2, w2], data)?;
        Ok(self.emit(value, move |g, sink| {
            let dx = sink.buf(x);
            for p in 0..n * c {
                let gp = &g[p * h2 * w2..][..h2 * w2];
                let dp = &mut dx[p * h * w..][..h * w];
                for i in 0..h {
                    for j in 0..w {
                        let base = (2 * i) * w2 + 2 * j;
                        dp[i * w + j] = dp[i * w + j]
                            + gp[base]
                            + gp[base + 1]
                            + gp[base + w2]
                            + gp[base + w2 + 1];
                    }
                }
            }
        }))
    }

    pub fn avg_pool_x2(&mut self, x: VarId) -> Result<VarId> {
        let xv = self.value(x).clone();
        let (n, c, h, w) = check_rank4("avg_pool_x2", &xv)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::InvalidShape {
                op: "avg_pool_x2",
                shape: xv.shape().to_vec(),
                reason: "spatial dims must be even".into(),
            });
        }
        let (h2, w2) = (h / 2, w / 2);
        let quarter = T::from_f64(0.25);
        let mut data = vec![T::zero(); n * c * h2 * w2];
        let src = xv.data();
        for p in 0..n * c {
            let sp = &src[p * h * w..][..h * w];
            let dp = &mut data[p * h2 * w2..][..h2 * w2];
            for i in 0..h2 {
                for j in 0..w2 {
                    let base = (2 * i) * w + 2 * j;
                    dp[i * w2 + j] =
                        (sp[base] + sp[base + 1] + sp[base + w] + sp[base + w + 1]) * quarter;
                }
            }
        }
        let value = Tensor::from_vec(vec![n, c, h2, w2], data)?;
        Ok(self.emit(value, move |g, sink| {
            let dx = sink.buf(x);
            for p in 0..n * c {
                let gp = &g[p * h2 * w2..][..h2 * w2];
                let dp = &mut dx[p * h * w..][..h * w];
                for i in 0..h2 {
                    for j in 0..w2 {
                        let gv = gp[i * w2 + j] * quarter;
                        let base = (2 * i) * w + 2 * j;
                        dp[base] = dp[base] + gv;
                        dp[base + 1] = dp[base + 1] + gv;
                        dp[base + w] = dp[base + w] + gv;
                        dp[base + w + 1] = dp[base + w + 1] + gv;
                    }
                }
            }
        }))
    }

    /// Average pool by a power-of-two factor (chained x2 pools).
    pub fn avg_pool_pow2(&mut self, x: VarId, factor: usize) -> Result<VarId> {
        if factor == 0 || !factor.is_power_of_two() {
            return Err(TensorError::Invalid {
                op: "avg_pool_pow2",
                reason: format!("factor {factor} is not a power of two"),
            });
        }
        let mut cur = x;
        let mut f = factor;
        while f > 1 {
            cur = self.avg_pool_x2(cur)?;
            f /= 2;
        }
        Ok(cur)
    }

    /// Nearest-neighbor upsample by a power-of-two factor.
    pub fn upsample_nn_pow2(&mut self, x: VarId, factor: usize) -> Result<VarId> {
        if factor == 0 || !factor.is_power_of_two() {
            return Err(TensorError::Invalid {
                op: "upsample_nn_pow2",
                reason: format!("factor {factor} is not a power of two"),
            });
        }
        let mut cur = x;
        let mut f = factor;
        while f > 1 {
            cur = self.upsample_nn_x2(cur)?;
            f /= 2;
        }
        Ok(cur)
    }
}
