//! Soft quantization: each value becomes a probability vector over K
//! evenly spaced bin centers spanning [lo, hi], with mass split
//! linearly between the two bracketing centers (a triangular kernel).
//! Values at a center map to a one-hot vector; out-of-range values are
//! clamped to the boundary before binning.

use crate::tape::{Tape, VarId};
use crate::tensor::{Result, Scalar, Tensor, TensorError};

impl<T: Scalar> Tape<T> {
    /// Appends a bin axis of size `k`: shape [..] -> [.., k].
    pub fn quantize_tri(&mut self, x: VarId, lo: f64, hi: f64, k: usize) -> Result<VarId> {
        if k < 2 {
            return Err(TensorError::Invalid {
                op: "quantize_tri",
                reason: format!("need at least 2 bins, got {k}"),
            });
        }
        if !(hi > lo) {
            return Err(TensorError::Invalid {
                op: "quantize_tri",
                reason: format!("empty range [{lo}, {hi}]"),
            });
        }
        let xv = self.value(x).clone();
        let n = xv.numel();
        let lo_t = T::from_f64(lo);
        let hi_t = T::from_f64(hi);
        let delta = (hi - lo) / (k - 1) as f64;
        let inv_delta = T::from_f64(1.0 / delta);

        let mut data = vec![T::zero(); n * k];
        // Left bin index per element, for the sparse backward.
        let mut bins = vec![0u32; n];
        for (i, &raw) in xv.data().iter().enumerate() {
            let v = raw.max(lo_t).min(hi_t);
            let t = (v - lo_t) * inv_delta;
            let mut j = t.to_f64_().floor() as usize;
            if j >= k - 1 {
                j = k - 2;
            }
            let frac = t - T::from_f64(j as f64);
            data[i * k + j] = T::one() - frac;
            data[i * k + j + 1] = frac;
            bins[i] = j as u32;
        }
        let mut shape = xv.shape().to_vec();
        shape.push(k);
        let value = Tensor::from_vec(shape, data)?;
        Ok(self.emit(value, move |g, sink| {
            let dx = sink.buf(x);
            for (i, &raw) in xv.data().iter().enumerate() {
                // Clamped values sit on a flat region.
                if raw < lo_t || raw > hi_t {
                    continue;
                }
                let j = bins[i] as usize;
                dx[i] = dx[i] + (g[i * k + j + 1] - g[i * k + j]) * inv_delta;
            }
        }))
    }
}
