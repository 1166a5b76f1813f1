//! Elementwise kernels: binary arithmetic (with trailing broadcast of
//! the right operand), activations, and the pointwise unary family.

use crate::tape::{GradSink, Tape, VarId};
use crate::tensor::{Result, Scalar, Tensor, TensorError};

/// Right-aligned broadcast plan: rhs dims must equal lhs dims or be 1.
/// The output always has the lhs shape.
fn broadcast_plan(
    op: &'static str,
    lhs: &[usize],
    rhs: &[usize],
) -> Result<Option<Vec<usize>>> {
    if lhs == rhs {
        return Ok(None);
    }
    if rhs.len() > lhs.len() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        });
    }
    // Strides of rhs aligned to lhs rank; broadcast dims get stride 0.
    let mut strides = vec![0usize; lhs.len()];
    let offset = lhs.len() - rhs.len();
    let mut stride = 1usize;
    for i in (0..rhs.len()).rev() {
        let (ld, rd) = (lhs[offset + i], rhs[i]);
        if rd == ld {
            strides[offset + i] = stride;
            stride *= rd;
        } else if rd == 1 {
            strides[offset + i] = 0;
        } else {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: lhs.to_vec(),
                rhs: rhs.to_vec(),
            });
        }
    }
    Ok(Some(strides))
}

/// Map a flat lhs index to the rhs index under the broadcast plan.
#[inline]
fn rhs_index(lhs_shape: &[usize], strides: &[usize], mut flat: usize) -> usize {
    let mut idx = 0usize;
    for d in (0..lhs_shape.len()).rev() {
        let coord = flat % lhs_shape[d];
        flat /= lhs_shape[d];
        idx += coord * strides[d];
    }
    idx
}

impl<T: Scalar> Tape<T> {
    fn binary(
        &mut self,
        op: &'static str,
        a: VarId,
        b: VarId,
        f: impl Fn(T, T) -> T,
        // (gout, a_val, b_val) -> (da, db)
        df: impl Fn(T, T, T) -> (T, T) + Copy + 'static,
    ) -> Result<VarId> {
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let plan = broadcast_plan(op, av.shape(), bv.shape())?;
        let out = match &plan {
            None => av.zip(&bv, op, f)?,
            Some(strides) => {
                let shape = av.shape().to_vec();
                let (ad, bd) = (av.data(), bv.data());
                let data = (0..av.numel())
                    .map(|i| f(ad[i], bd[rhs_index(&shape, strides, i)]))
                    .collect();
                Tensor::from_vec(shape, data)?
            }
        };
        Ok(self.emit(out, move |g, sink: &mut GradSink<T>| {
            let (ad, bd) = (av.data(), bv.data());
            match &plan {
                None => {
                    {
                        let da = sink.buf(a);
                        for i in 0..g.len() {
                            da[i] = da[i] + df(g[i], ad[i], bd[i]).0;
                        }
                    }
                    let db = sink.buf(b);
                    for i in 0..g.len() {
                        db[i] = db[i] + df(g[i], ad[i], bd[i]).1;
                    }
                }
                Some(strides) => {
                    let shape = av.shape();
                    {
                        let da = sink.buf(a);
                        for i in 0..g.len() {
                            da[i] = da[i] + df(g[i], ad[i], bd[rhs_index(shape, strides, i)]).0;
                        }
                    }
                    let db = sink.buf(b);
                    for i in 0..g.len() {
                        let j = rhs_index(shape, strides, i);
                        db[j] = db[j] + df(g[i], ad[i], bd[j]).1;
                    }
                }
            }
        }))
    }

    fn unary(
        &mut self,
        x: VarId,
        f: impl Fn(T) -> T,
        // (gout, x_val) -> dx
        df: impl Fn(T, T) -> T + 'static,
    ) -> VarId {
        let xv = self.value(x).clone();
        let out = xv.map(f);
        self.emit(out, move |g, sink| {
            let xd = xv.data();
            let dx = sink.buf(x);
            for i in 0..g.len() {
                dx[i] = dx[i] + df(g[i], xd[i]);
            }
        })
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary("add", a, b, |x, y| x + y, |g, _, _| (g, g))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary("sub", a, b, |x, y| x - y, |g, _, _| (g, -g))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary("mul", a, b, |x, y| x * y, |g, x, y| (g * y, g * x))
    }

    /// Elementwise division. The caller is responsible for keeping the
    /// denominator away from zero.
    pub fn div(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary(
            "div",
            a,
            b,
            |x, y| x / y,
            |g, x, y| (g / y, -g * x / (y * y)),
        )
    }

    pub fn neg(&mut self, x: VarId) -> VarId {
        self.unary(x, |v| -v, |g, _| -g)
    }

    pub fn add_scalar(&mut self, x: VarId, c: T) -> VarId {
        self.unary(x, move |v| v + c, |g, _| g)
    }

    pub fn mul_scalar(&mut self, x: VarId, c: T) -> VarId {
        self.unary(x, move |v| v * c, move |g, _| g * c)
    }

    pub fn square(&mut self, x: VarId) -> VarId {
        self.unary(x, |v| v * v, |g, v| g * (v + v))
    }

    pub fn abs(&mut self, x: VarId) -> VarId {
        self.unary(
            x,
            |v| v.abs(),
            |g, v| {
                if v >= T::zero() {
                    g
                } else {
                    -g
                }
            },
        )
    }

    /// Natural log of `max(x, eps)`; gradient is zero in the clamped region.
    pub fn log_eps(&mut self, x: VarId, eps: T) -> VarId {
        self.unary(
            x,
            move |v| v.max(eps).ln(),
            move |g, v| if v > eps { g / v } else { T::zero() },
        )
    }

    /// Square root with a guarded gradient at the origin.
    pub fn sqrt_op(&mut self, x: VarId) -> VarId {
        let tiny = T::from_f64(1e-12);
        self.unary(
            x,
            |v| v.sqrt(),
            move |g, v| {
                let r = v.sqrt().max(tiny);
                g / (r + r)
            },
        )
    }

    /// x^p for a constant exponent; defined for non-negative bases.
    /// The gradient is suppressed at the origin where p < 1 would blow up.
    pub fn powf_const(&mut self, x: VarId, p: T) -> VarId {
        let tiny = T::from_f64(1e-12);
        self.unary(
            x,
            move |v| v.max(T::zero()).powf(p),
            move |g, v| {
                if v > tiny {
                    g * p * v.powf(p - T::one())
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn leaky_relu(&mut self, x: VarId, slope: T) -> VarId {
        self.unary(
            x,
            move |v| if v >= T::zero() { v } else { v * slope },
            move |g, v| if v >= T::zero() { g } else { g * slope },
        )
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        fn sig<T: Scalar>(v: T) -> T {
            // Split on sign so exp never overflows.
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        }
        self.unary(x, sig, |g, v| {
            let s = sig(v);
            g * s * (T::one() - s)
        })
    }

    /// Two-argument arctangent, atan2(y, x), elementwise on equal shapes.
    pub fn atan2_op(&mut self, y: VarId, x: VarId) -> Result<VarId> {
        let tiny = T::from_f64(1e-24);
        self.binary(
            "atan2",
            y,
            x,
            |yv, xv| yv.atan2(xv),
            move |g, yv, xv| {
                let r2 = (xv * xv + yv * yv).max(tiny);
                (g * xv / r2, -g * yv / r2)
            },
        )
    }

    /// Wrap an angle difference into (-pi, pi]. The shift is locally
    /// constant, so the gradient passes through unchanged.
    pub fn wrap_angle(&mut self, x: VarId) -> VarId {
        let two_pi = T::from_f64(std::f64::consts::TAU);
        self.unary(
            x,
            move |v| v - two_pi * (v / two_pi).round(),
            |g, _| g,
        )
    }

    /// Elementwise select: where `cond >= tau` take `a`, else `b`.
    /// No gradient flows to `cond`.
    pub fn select_ge(&mut self, cond: VarId, tau: T, a: VarId, b: VarId) -> Result<VarId> {
        let cv = self.value(cond).clone();
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        if cv.shape() != av.shape() || av.shape() != bv.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "select_ge",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let data = cv
            .data()
            .iter()
            .zip(av.data().iter().zip(bv.data()))
            .map(|(&c, (&x, &y))| if c >= tau { x } else { y })
            .collect();
        let out = Tensor::from_vec(av.shape().to_vec(), data)?;
        Ok(self.emit(out, move |g, sink| {
            let cd = cv.data();
            {
                let da = sink.buf(a);
                for i in 0..g.len() {
                    if cd[i] >= tau {
                        da[i] = da[i] + g[i];
                    }
                }
            }
            let db = sink.buf(b);
            for i in 0..g.len() {
                if cd[i] < tau {
                    db[i] = db[i] + g[i];
                }
            }
        }))
    }

    /// Clamp values into [lo, hi]; gradient is zero outside the interval.
    pub fn clamp_op(&mut self, x: VarId, lo: T, hi: T) -> VarId {
        self.unary(
            x,
            move |v| v.max(lo).min(hi),
            move |g, v| {
                if v >= lo && v <= hi {
                    g
                } else {
                    T::zero()
                }
            },
        )
    }
}
