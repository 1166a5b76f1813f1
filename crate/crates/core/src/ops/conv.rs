//! 2-D convolution with "same" padding and arbitrary stride.
//!
//! Padding follows the ceil convention: the output spatial size is
//! `ceil(in/stride)`, with any odd padding placed at the bottom/right.
//! Inner loops run over contiguous rows so they autovectorize; rayon
//! parallelism only ever partitions disjoint output slices, keeping
//! results bit-deterministic regardless of thread count.

use rayon::prelude::*;

use crate::tape::{Tape, VarId};
use crate::tensor::{Result, Scalar, Tensor, TensorError};

#[derive(Clone, Copy)]
struct ConvGeometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ho: usize,
    wo: usize,
    pt: usize,
    pl: usize,
}

fn same_padding(in_size: usize, k: usize, stride: usize) -> (usize, usize, usize) {
    let out = in_size.div_ceil(stride);
    let needed = ((out - 1) * stride + k).saturating_sub(in_size);
    (out, needed / 2, needed - needed / 2)
}

/// Valid output range [lo, hi) for one kernel tap: indices where
/// `o*stride + k_off - pad` lands inside `[0, in_size)`.
#[inline]
fn tap_range(out_size: usize, in_size: usize, stride: usize, k_off: usize, pad: usize) -> (usize, usize) {
    let lo = if k_off >= pad {
        0
    } else {
        (pad - k_off).div_ceil(stride)
    };
    let hi_inc = (in_size - 1 + pad).saturating_sub(k_off) / stride;
    (lo.min(out_size), (hi_inc + 1).min(out_size))
}

fn conv2d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    g: ConvGeometry,
) -> Vec<T> {
    let mut out = vec![T::zero(); g.n * g.cout * g.ho * g.wo];
    out.par_chunks_mut(g.ho * g.wo)
        .enumerate()
        .for_each(|(idx, ochunk)| {
            let n = idx / g.cout;
            let co = idx % g.cout;
            if let Some(b) = bias {
                ochunk.fill(b[co]);
            }
            for ci in 0..g.cin {
                let xplane = &x[(n * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                for khi in 0..g.kh {
                    for kwi in 0..g.kw {
                        let wv = w[((co * g.cin + ci) * g.kh + khi) * g.kw + kwi];
                        let (wlo, whi) = tap_range(g.wo, g.w, g.stride, kwi, g.pl);
                        if wlo >= whi {
                            continue;
                        }
                        for oh in 0..g.ho {
                            let ih = (oh * g.stride + khi) as isize - g.pt as isize;
                            if ih < 0 || ih >= g.h as isize {
                                continue;
                            }
                            let xrow = &xplane[ih as usize * g.w..][..g.w];
                            let orow = &mut ochunk[oh * g.wo..][..g.wo];
                            if g.stride == 1 {
                                let ibase = wlo + kwi - g.pl;
                                let xin = &xrow[ibase..ibase + (whi - wlo)];
                                for (o, &xv) in orow[wlo..whi].iter_mut().zip(xin) {
                                    *o = *o + wv * xv;
                                }
                            } else {
                                for ow in wlo..whi {
                                    let iw = ow * g.stride + kwi - g.pl;
                                    orow[ow] = orow[ow] + wv * xrow[iw];
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

fn conv2d_backward_input<T: Scalar>(gout: &[T], w: &[T], g: ConvGeometry) -> Vec<T> {
    let mut dx = vec![T::zero(); g.n * g.cin * g.h * g.w];
    dx.par_chunks_mut(g.cin * g.h * g.w)
        .enumerate()
        .for_each(|(n, dxn)| {
            for co in 0..g.cout {
                let gplane = &gout[(n * g.cout + co) * g.ho * g.wo..][..g.ho * g.wo];
                for ci in 0..g.cin {
                    let dxplane = &mut dxn[ci * g.h * g.w..][..g.h * g.w];
                    for khi in 0..g.kh {
                        for kwi in 0..g.kw {
                            let wv = w[((co * g.cin + ci) * g.kh + khi) * g.kw + kwi];
                            let (wlo, whi) = tap_range(g.wo, g.w, g.stride, kwi, g.pl);
                            if wlo >= whi {
                                continue;
                            }
                            for oh in 0..g.ho {
                                let ih = (oh * g.stride + khi) as isize - g.pt as isize;
                                if ih < 0 || ih >= g.h as isize {
                                    continue;
                                }
                                let grow = &gplane[oh * g.wo..][..g.wo];
                                let dxrow = &mut dxplane[ih as usize * g.w..][..g.w];
                                if g.stride == 1 {
                                    let ibase = wlo + kwi - g.pl;
                                    let dslice = &mut dxrow[ibase..ibase + (whi - wlo)];
                                    for (d, &gv) in dslice.iter_mut().zip(&grow[wlo..whi]) {
                                        *d = *d + wv * gv;
                                    }
                                } else {
                                    for ow in wlo..whi {
                                        let iw = ow * g.stride + kwi - g.pl;
                                        dxrow[iw] = dxrow[iw] + wv * grow[ow];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    dx
}

fn conv2d_backward_weight<T: Scalar>(gout: &[T], x: &[T], g: ConvGeometry) -> Vec<T> {
    let mut dw = vec![T::zero(); g.cout * g.cin * g.kh * g.kw];
    dw.par_chunks_mut(g.cin * g.kh * g.kw)
        .enumerate()
        .for_each(|(co, dwc)| {
            for n in 0..g.n {
                let gplane = &gout[(n * g.cout + co) * g.ho * g.wo..][..g.ho * g.wo];
                for ci in 0..g.cin {
                    let xplane = &x[(n * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                    for khi in 0..g.kh {
                        for kwi in 0..g.kw {
                            let (wlo, whi) = tap_range(g.wo, g.w, g.stride, kwi, g.pl);
                            if wlo >= whi {
                                continue;
                            }
                            let mut acc = T::zero();
                            for oh in 0..g.ho {
                                let ih = (oh * g.stride + khi) as isize - g.pt as isize;
                                if ih < 0 || ih >= g.h as isize {
                                    continue;
                                }
                                let grow = &gplane[oh * g.wo..][..g.wo];
                                let xrow = &xplane[ih as usize * g.w..][..g.w];
                                if g.stride == 1 {
                                    let ibase = wlo + kwi - g.pl;
                                    let xin = &xrow[ibase..ibase + (whi - wlo)];
                                    for (&gv, &xv) in grow[wlo..whi].iter().zip(xin) {
                                        acc = acc + gv * xv;
                                    }
                                } else {
                                    for ow in wlo..whi {
                                        let iw = ow * g.stride + kwi - g.pl;
                                        acc = acc + grow[ow] * xrow[iw];
                                    }
                                }
                            }
                            let slot = (ci * g.kh + khi) * g.kw + kwi;
                            dwc[slot] = dwc[slot] + acc;
                        }
                    }
                }
            }
        });
    dw
}

impl<T: Scalar> Tape<T> {
    /// Convolution of `x [N,Cin,H,W]` with `w [Cout,Cin,kh,kw]` and an
    /// optional per-channel bias, same padding, square stride.
    pub fn conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        bias: Option<VarId>,
        stride: usize,
    ) -> Result<VarId> {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        if xv.rank() != 4 {
            return Err(TensorError::RankMismatch {
                op: "conv2d",
                expected: 4,
                shape: xv.shape().to_vec(),
            });
        }
        if wv.rank() != 4 || wv.dim(1) != xv.dim(1) {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                reason: "stride must be >= 1".into(),
            });
        }
        let (n, cin, h, win) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let (cout, kh, kw) = (wv.dim(0), wv.dim(2), wv.dim(3));
        let bv = match bias {
            Some(b) => {
                let bt = self.value(b).clone();
                if bt.shape() != [cout] {
                    return Err(TensorError::ShapeMismatch {
                        op: "conv2d bias",
                        lhs: vec![cout],
                        rhs: bt.shape().to_vec(),
                    });
                }
                Some(bt)
            }
            None => None,
        };
        let (ho, pt, _) = same_padding(h, kh, stride);
        let (wo, pl, _) = same_padding(win, kw, stride);
        let geom = ConvGeometry {
            n,
            cin,
            h,
            w: win,
            cout,
            kh,
            kw,
            stride,
            ho,
            wo,
            pt,
            pl,
        };
        let out = conv2d_forward(xv.data(), wv.data(), bv.as_ref().map(|b| b.data()), geom);
        let value = Tensor::from_vec(vec![n, cout, ho, wo], out)?;
        Ok(self.emit(value, move |g, sink| {
            let dx = conv2d_backward_input(g, wv.data(), geom);
            sink.accumulate(x, dx.into_iter());
            let dw = conv2d_backward_weight(g, xv.data(), geom);
            sink.accumulate(w, dw.into_iter());
            if let Some(b) = bias {
                let db = sink.buf(b);
                for ni in 0..geom.n {
                    for co in 0..geom.cout {
                        let plane = &g[(ni * geom.cout + co) * geom.ho * geom.wo..][..geom.ho * geom.wo];
                        let mut acc = T::zero();
                        for &v in plane {
                            acc = acc + v;
                        }
                        db[co] = db[co] + acc;
                    }
                }
            }
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_sizes() {
        assert_eq!(same_padding(8, 3, 1), (8, 1, 1));
        assert_eq!(same_padding(8, 3, 2), (4, 0, 1));
        assert_eq!(same_padding(8, 1, 1), (8, 0, 0));
        assert_eq!(same_padding(32, 16, 16), (2, 0, 0));
    }

    #[test]
    fn identity_kernel_passthrough() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(vec![1, 1, 4, 4], |i| i as f64));
        // 1x1 kernel of weight 1.
        let w = tape.leaf(Tensor::ones(vec![1, 1, 1, 1]));
        let y = tape.conv2d(x, w, None, 1).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn known_3x3_sum_kernel() {
        // All-ones 3x3 kernel computes neighborhood sums with zero pad.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(vec![1, 1, 3, 3]));
        let w = tape.leaf(Tensor::ones(vec![1, 1, 3, 3]));
        let y = tape.conv2d(x, w, None, 1).unwrap();
        assert_eq!(
            tape.value(y).data(),
            &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]
        );
    }

    #[test]
    fn stride_two_halves_output() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(vec![2, 3, 8, 8]));
        let w = tape.leaf(Tensor::ones(vec![5, 3, 3, 3]));
        let b = tape.leaf(Tensor::zeros(vec![5]));
        let y = tape.conv2d(x, w, Some(b), 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 5, 4, 4]);
    }

    #[test]
    fn patch_projection_counts_tokens() {
        // kernel = stride = 4 on an 8x8 input -> 2x2 token grid
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(vec![1, 2, 8, 8]));
        let w = tape.leaf(Tensor::ones(vec![7, 2, 4, 4]));
        let y = tape.conv2d(x, w, None, 4).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 7, 2, 2]);
        // each output = sum over 2 channels * 16 taps
        assert!(tape.value(y).data().iter().all(|&v| v == 32.0));
    }

    #[test]
    fn bias_gradient_counts_positions() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(vec![1, 1, 4, 4]));
        let w = tape.leaf(Tensor::ones(vec![2, 1, 1, 1]));
        let b = tape.leaf(Tensor::zeros(vec![2]));
        let y = tape.conv2d(x, w, Some(b), 1).unwrap();
        let s = tape.sum_all(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[16.0, 16.0]);
    }

    #[test]
    fn rejects_channel_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(vec![1, 3, 4, 4]));
        let w = tape.leaf(Tensor::ones(vec![2, 4, 3, 3]));
        assert!(tape.conv2d(x, w, None, 1).is_err());
    }
}
