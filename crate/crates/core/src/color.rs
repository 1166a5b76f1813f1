//! Differentiable color conversions between sRGB, CIELAB, and LCH, and
//! the soft quantization operator used by the color losses.
//!
//! Images are [N,3,H,W] tensors. sRGB uses the standard piecewise
//! transfer function and the D65 white point; both piecewise functions
//! here are C1 at their split points, so gradients are well defined
//! everywhere the checks probe.

use crate::tape::{Tape, VarId};
use crate::tensor::{Result, Scalar, Tensor, TensorError};

// sRGB -> XYZ (D65).
const M_RGB_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];
// XYZ -> linear sRGB.
const M_XYZ_RGB: [[f64; 3]; 3] = [
    [3.2404542, -1.5371385, -0.4985314],
    [-0.9692660, 1.8760108, 0.0415560],
    [0.0556434, -0.2040259, 1.0572252],
];
const WHITE_D65: [f64; 3] = [0.95047, 1.0, 1.08883];

// CIE f-function split point delta = 6/29.
const DELTA: f64 = 6.0 / 29.0;
const DELTA3: f64 = DELTA * DELTA * DELTA;

/// Gamut bounds used when quantizing LAB channels.
pub const L_RANGE: (f64, f64) = (0.0, 100.0);
pub const AB_RANGE: (f64, f64) = (-128.0, 127.0);
/// Default bin count of the quantization operator.
pub const QUANT_BINS: usize = 256;

/// LAB image handle: channels are L in [0,100], A and B in [-128,127].
#[derive(Debug, Clone, Copy)]
pub struct Lab(pub VarId);

/// LCH image handle: channels are L, chroma >= 0, hue in (-pi, pi].
#[derive(Debug, Clone, Copy)]
pub struct Lch(pub VarId);

fn expect_rgb<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.rank() != 4 || t.dim(1) != 3 {
        return Err(TensorError::InvalidShape {
            op,
            shape: t.shape().to_vec(),
            reason: "expected [N,3,H,W]".into(),
        });
    }
    Ok(())
}

fn split3<T: Scalar>(tape: &mut Tape<T>, img: VarId) -> Result<[VarId; 3]> {
    Ok([
        tape.slice_axis(img, 1, 0, 1)?,
        tape.slice_axis(img, 1, 1, 1)?,
        tape.slice_axis(img, 1, 2, 1)?,
    ])
}

fn mat3_apply<T: Scalar>(
    tape: &mut Tape<T>,
    m: &[[f64; 3]; 3],
    v: [VarId; 3],
) -> Result<[VarId; 3]> {
    let mut out = [v[0]; 3];
    for (row, slot) in m.iter().zip(out.iter_mut()) {
        let a = tape.mul_scalar(v[0], T::from_f64(row[0]));
        let b = tape.mul_scalar(v[1], T::from_f64(row[1]));
        let c = tape.mul_scalar(v[2], T::from_f64(row[2]));
        let ab = tape.add(a, b)?;
        *slot = tape.add(ab, c)?;
    }
    Ok(out)
}

/// sRGB transfer decode: v <= 0.04045 ? v/12.92 : ((v+0.055)/1.055)^2.4
fn srgb_to_linear<T: Scalar>(tape: &mut Tape<T>, v: VarId) -> Result<VarId> {
    let lin = tape.mul_scalar(v, T::from_f64(1.0 / 12.92));
    let shifted = tape.add_scalar(v, T::from_f64(0.055));
    let scaled = tape.mul_scalar(shifted, T::from_f64(1.0 / 1.055));
    let powed = tape.powf_const(scaled, T::from_f64(2.4));
    tape.select_ge(v, T::from_f64(0.04045), powed, lin)
}

/// sRGB transfer encode: v <= 0.0031308 ? 12.92 v : 1.055 v^(1/2.4) - 0.055
fn linear_to_srgb<T: Scalar>(tape: &mut Tape<T>, v: VarId) -> Result<VarId> {
    let lin = tape.mul_scalar(v, T::from_f64(12.92));
    let powed = tape.powf_const(v, T::from_f64(1.0 / 2.4));
    let scaled = tape.mul_scalar(powed, T::from_f64(1.055));
    let gamma = tape.add_scalar(scaled, T::from_f64(-0.055));
    tape.select_ge(v, T::from_f64(0.0031308), gamma, lin)
}

/// CIE f: t > delta^3 ? t^(1/3) : t/(3 delta^2) + 4/29
fn lab_f<T: Scalar>(tape: &mut Tape<T>, t: VarId) -> Result<VarId> {
    let cbrt = tape.powf_const(t, T::from_f64(1.0 / 3.0));
    let slope = tape.mul_scalar(t, T::from_f64(1.0 / (3.0 * DELTA * DELTA)));
    let linear = tape.add_scalar(slope, T::from_f64(4.0 / 29.0));
    tape.select_ge(t, T::from_f64(DELTA3), cbrt, linear)
}

/// Inverse CIE f: f > delta ? f^3 : 3 delta^2 (f - 4/29)
fn lab_f_inv<T: Scalar>(tape: &mut Tape<T>, f: VarId) -> Result<VarId> {
    let sq = tape.square(f);
    let cube = tape.mul(sq, f)?;
    let shifted = tape.add_scalar(f, T::from_f64(-4.0 / 29.0));
    let linear = tape.mul_scalar(shifted, T::from_f64(3.0 * DELTA * DELTA));
    tape.select_ge(f, T::from_f64(DELTA), cube, linear)
}

/// sRGB [N,3,H,W] in [0,1] -> LAB. Inputs are clamped to [0,1] first.
pub fn rgb_to_lab<T: Scalar>(tape: &mut Tape<T>, img: VarId) -> Result<Lab> {
    expect_rgb("rgb_to_lab", tape.value(img))?;
    let clamped = tape.clamp_op(img, T::zero(), T::one());
    let rgb = split3(tape, clamped)?;
    let lin = [
        srgb_to_linear(tape, rgb[0])?,
        srgb_to_linear(tape, rgb[1])?,
        srgb_to_linear(tape, rgb[2])?,
    ];
    let xyz = mat3_apply(tape, &M_RGB_XYZ, lin)?;
    let mut f = [xyz[0]; 3];
    for i in 0..3 {
        let t = tape.mul_scalar(xyz[i], T::from_f64(1.0 / WHITE_D65[i]));
        f[i] = lab_f(tape, t)?;
    }
    let l_scaled = tape.mul_scalar(f[1], T::from_f64(116.0));
    let l = tape.add_scalar(l_scaled, T::from_f64(-16.0));
    let fx_fy = tape.sub(f[0], f[1])?;
    let a = tape.mul_scalar(fx_fy, T::from_f64(500.0));
    let fy_fz = tape.sub(f[1], f[2])?;
    let b = tape.mul_scalar(fy_fz, T::from_f64(200.0));
    Ok(Lab(tape.concat(&[l, a, b], 1)?))
}

/// LAB -> sRGB in [0,1]; out-of-gamut results are clamped.
pub fn lab_to_rgb<T: Scalar>(tape: &mut Tape<T>, lab: Lab) -> Result<VarId> {
    expect_rgb("lab_to_rgb", tape.value(lab.0))?;
    let [l, a, b] = split3(tape, lab.0)?;
    let l_shift = tape.add_scalar(l, T::from_f64(16.0));
    let fy = tape.mul_scalar(l_shift, T::from_f64(1.0 / 116.0));
    let a_term = tape.mul_scalar(a, T::from_f64(1.0 / 500.0));
    let fx = tape.add(fy, a_term)?;
    let b_term = tape.mul_scalar(b, T::from_f64(-1.0 / 200.0));
    let fz = tape.add(fy, b_term)?;
    let tx = lab_f_inv(tape, fx)?;
    let ty = lab_f_inv(tape, fy)?;
    let tz = lab_f_inv(tape, fz)?;
    let xyz = [
        tape.mul_scalar(tx, T::from_f64(WHITE_D65[0])),
        tape.mul_scalar(ty, T::from_f64(WHITE_D65[1])),
        tape.mul_scalar(tz, T::from_f64(WHITE_D65[2])),
    ];
    let lin = mat3_apply(tape, &M_XYZ_RGB, xyz)?;
    let r = linear_to_srgb(tape, lin[0])?;
    let g = linear_to_srgb(tape, lin[1])?;
    let bb = linear_to_srgb(tape, lin[2])?;
    let rgb = tape.concat(&[r, g, bb], 1)?;
    Ok(tape.clamp_op(rgb, T::zero(), T::one()))
}

/// LAB -> LCH: L passes through, C = sqrt(A^2+B^2), H = atan2(B, A).
/// Achromatic pixels get H = 0.
pub fn lab_to_lch<T: Scalar>(tape: &mut Tape<T>, lab: Lab) -> Result<Lch> {
    expect_rgb("lab_to_lch", tape.value(lab.0))?;
    let [l, a, b] = split3(tape, lab.0)?;
    let a2 = tape.square(a);
    let b2 = tape.square(b);
    let sum = tape.add(a2, b2)?;
    let c = tape.sqrt_op(sum);
    let h = tape.atan2_op(b, a)?;
    Ok(Lch(tape.concat(&[l, c, h], 1)?))
}

/// sRGB -> LCH, the composition used by the LCH loss.
pub fn rgb_to_lch<T: Scalar>(tape: &mut Tape<T>, img: VarId) -> Result<Lch> {
    let lab = rgb_to_lab(tape, img)?;
    lab_to_lch(tape, lab)
}

/// Soft quantization of one channel over `bins` centers spanning
/// `range`; appends the bin axis. Each per-pixel vector is a
/// probability distribution, differentiable in the channel values.
pub fn quantize_soft<T: Scalar>(
    tape: &mut Tape<T>,
    channel: VarId,
    range: (f64, f64),
    bins: usize,
) -> Result<VarId> {
    tape.quantize_tri(channel, range.0, range.1, bins)
}

/// Value-only conversion helpers (no gradient bookkeeping).
pub fn rgb_to_lab_t<T: Scalar>(img: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::inference();
    let id = tape.leaf(img.clone());
    let lab = rgb_to_lab(&mut tape, id)?;
    Ok(tape.value(lab.0).clone())
}

pub fn lab_to_lch_t<T: Scalar>(lab: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::inference();
    let id = tape.leaf(lab.clone());
    let lch = lab_to_lch(&mut tape, Lab(id))?;
    Ok(tape.value(lch.0).clone())
}

pub fn lab_to_rgb_t<T: Scalar>(lab: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::inference();
    let id = tape.leaf(lab.clone());
    let rgb = lab_to_rgb(&mut tape, Lab(id))?;
    Ok(tape.value(rgb).clone())
}
