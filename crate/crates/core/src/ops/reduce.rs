//! Scalar reductions.

use crate::tape::{Tape, VarId};
use crate::tensor::{Scalar, Tensor};

impl<T: Scalar> Tape<T> {
    pub fn sum_all(&mut self, x: VarId) -> VarId {
        let xv = self.value(x).clone();
        let total: T = xv.data().iter().copied().sum();
        self.emit(Tensor::scalar(total), move |g, sink| {
            let gv = g[0];
            for slot in sink.buf(x).iter_mut() {
                *slot = *slot + gv;
            }
        })
    }

    pub fn mean_all(&mut self, x: VarId) -> VarId {
        let xv = self.value(x).clone();
        let n = T::from_f64(xv.numel() as f64);
        let total: T = xv.data().iter().copied().sum();
        self.emit(Tensor::scalar(total / n), move |g, sink| {
            let gv = g[0] / n;
            for slot in sink.buf(x).iter_mut() {
                *slot = *slot + gv;
            }
        })
    }
}
