//! Training objectives. The generator total combines an adversarial
//! term with RGB, LAB, LCH, and perceptual distances; the reference
//! side of each distance is constant data and is evaluated outside the
//! gradient tape so only the generated branch carries nodes.

use serde::{Deserialize, Serialize};

use crate::color::{self, quantize_soft, Lab};
use crate::model::perceptual_features;
use crate::params::ParamMap;
use crate::tape::{Tape, VarId};
use crate::tensor::{Result, Scalar, Tensor, TensorError};

/// Log clamp for the quantized cross-entropy terms.
pub const LOG_EPS: f64 = 1e-8;

/// Weights of the generator loss combination.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lab: f64,
    pub lch: f64,
    pub rgb: f64,
    pub perceptual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lab: 0.001,
            lch: 1.0,
            rgb: 0.1,
            perceptual: 100.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lab < 0.0 || self.lch < 0.0 || self.rgb < 0.0 || self.perceptual < 0.0 {
            return Err(TensorError::Invalid {
                op: "loss_weights",
                reason: "weights must be nonnegative".into(),
            });
        }
        Ok(())
    }
}

/// The pixel loss is squared error early in training and absolute
/// error in the late phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RgbPhase {
    Early,
    Late,
}

/// Per-component loss values for one step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub rgb: f64,
    pub lab: f64,
    pub lch: f64,
    pub perceptual: f64,
    pub adversarial_g: f64,
    pub adversarial_d: f64,
    pub total: f64,
}

impl LossReport {
    /// Name of the first non-finite component, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("rgb", self.rgb),
            ("lab", self.lab),
            ("lch", self.lch),
            ("perceptual", self.perceptual),
            ("adversarial_g", self.adversarial_g),
            ("adversarial_d", self.adversarial_d),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(name, _)| name)
    }
}

fn check_same_shape<T: Scalar>(
    op: &'static str,
    tape: &Tape<T>,
    gen: VarId,
    reference: &Tensor<T>,
) -> Result<()> {
    if tape.shape(gen) != reference.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: tape.shape(gen).to_vec(),
            rhs: reference.shape().to_vec(),
        });
    }
    Ok(())
}

/// Mean squared (early) or mean absolute (late) pixel error.
pub fn loss_rgb<T: Scalar>(
    tape: &mut Tape<T>,
    gen: VarId,
    reference: &Tensor<T>,
    phase: RgbPhase,
) -> Result<VarId> {
    check_same_shape("loss_rgb", tape, gen, reference)?;
    let r = tape.leaf(reference.clone());
    let diff = tape.sub(gen, r)?;
    let per_pixel = match phase {
        RgbPhase::Early => tape.square(diff),
        RgbPhase::Late => tape.abs(diff),
    };
    Ok(tape.mean_all(per_pixel))
}

/// Quantize a constant channel in value space: [.., bins].
fn quantized_constant<T: Scalar>(channel: &Tensor<T>, range: (f64, f64)) -> Result<Tensor<T>> {
    let mut t = Tape::inference();
    let id = t.leaf(channel.clone());
    let q = quantize_soft(&mut t, id, range, color::QUANT_BINS)?;
    Ok(t.value(q).clone())
}

/// Cross-entropy of a quantized generated channel against the quantized
/// reference distribution, averaged over pixels.
fn quantized_cross_entropy<T: Scalar>(
    tape: &mut Tape<T>,
    gen_channel: VarId,
    ref_channel: &Tensor<T>,
    range: (f64, f64),
) -> Result<VarId> {
    let pixels = ref_channel.numel() as f64;
    let q_ref = tape.leaf(quantized_constant(ref_channel, range)?);
    let q_gen = quantize_soft(tape, gen_channel, range, color::QUANT_BINS)?;
    let log_q = tape.log_eps(q_gen, T::from_f64(LOG_EPS));
    let weighted = tape.mul(q_ref, log_q)?;
    let total = tape.sum_all(weighted);
    Ok(tape.mul_scalar(total, T::from_f64(-1.0 / pixels)))
}

fn split_channels<T: Scalar>(tape: &mut Tape<T>, img: VarId) -> Result<[VarId; 3]> {
    Ok([
        tape.slice_axis(img, 1, 0, 1)?,
        tape.slice_axis(img, 1, 1, 1)?,
        tape.slice_axis(img, 1, 2, 1)?,
    ])
}

fn channel<T: Scalar>(img: &Tensor<T>, c: usize) -> Tensor<T> {
    let (n, h, w) = (img.dim(0), img.dim(2), img.dim(3));
    let mut data = Vec::with_capacity(n * h * w);
    for ni in 0..n {
        let base = (ni * 3 + c) * h * w;
        data.extend_from_slice(&img.data()[base..base + h * w]);
    }
    Tensor::from_vec(vec![n, 1, h, w], data).expect("channel shape")
}

/// LAB loss: squared lightness error plus quantized cross-entropy on
/// the A and B opponent channels, each averaged over pixels.
pub fn loss_lab<T: Scalar>(
    tape: &mut Tape<T>,
    gen: VarId,
    reference: &Tensor<T>,
) -> Result<VarId> {
    check_same_shape("loss_lab", tape, gen, reference)?;
    let lab_g = color::rgb_to_lab(tape, gen)?;
    let [l_g, a_g, b_g] = split_channels(tape, lab_g.0)?;
    let lab_y = color::rgb_to_lab_t(reference)?;
    let l_y = tape.leaf(channel(&lab_y, 0));
    let dl = tape.sub(l_y, l_g)?;
    let dl2 = tape.square(dl);
    let l_term = tape.mean_all(dl2);
    let a_term = quantized_cross_entropy(tape, a_g, &channel(&lab_y, 1), color::AB_RANGE)?;
    let b_term = quantized_cross_entropy(tape, b_g, &channel(&lab_y, 2), color::AB_RANGE)?;
    let la = tape.add(l_term, a_term)?;
    tape.add(la, b_term)
}

/// LCH loss: quantized cross-entropy on lightness plus squared chroma
/// and wrapped squared hue errors, averaged over pixels.
pub fn loss_lch<T: Scalar>(
    tape: &mut Tape<T>,
    gen: VarId,
    reference: &Tensor<T>,
) -> Result<VarId> {
    check_same_shape("loss_lch", tape, gen, reference)?;
    let lch_g = color::rgb_to_lch(tape, gen)?;
    let [l_g, c_g, h_g] = split_channels(tape, lch_g.0)?;
    let lch_y = color::lab_to_lch_t(&color::rgb_to_lab_t(reference)?)?;

    let l_term = quantized_cross_entropy(tape, l_g, &channel(&lch_y, 0), color::L_RANGE)?;

    let c_y = tape.leaf(channel(&lch_y, 1));
    let dc = tape.sub(c_y, c_g)?;
    let dc2 = tape.square(dc);
    let c_term = tape.mean_all(dc2);

    let h_y = tape.leaf(channel(&lch_y, 2));
    let dh_raw = tape.sub(h_y, h_g)?;
    let dh = tape.wrap_angle(dh_raw);
    let dh2 = tape.square(dh);
    let h_term = tape.mean_all(dh2);

    let lc = tape.add(l_term, c_term)?;
    tape.add(lc, h_term)
}

/// Mean squared distance between frozen extractor features of the
/// generated and reference images, averaged over the tap layers. The
/// extractor weights take no update but gradients flow to `gen`.
pub fn loss_perceptual<T: Scalar>(
    tape: &mut Tape<T>,
    gen: VarId,
    reference: &Tensor<T>,
    extractor: &ParamMap<T>,
) -> Result<VarId> {
    check_same_shape("loss_perceptual", tape, gen, reference)?;
    let feats_g = perceptual_features(tape, gen)?;
    let feats_y = {
        let mut t = Tape::inference();
        extractor.bind(&mut t);
        let r = t.leaf(reference.clone());
        let ids = perceptual_features(&mut t, r)?;
        ids.iter().map(|&id| t.value(id).clone()).collect::<Vec<_>>()
    };
    let inv = T::from_f64(1.0 / feats_g.len() as f64);
    let mut total: Option<VarId> = None;
    for (fg, fy) in feats_g.into_iter().zip(feats_y) {
        let y = tape.leaf(fy);
        let diff = tape.sub(fg, y)?;
        let sq = tape.square(diff);
        let mse = tape.mean_all(sq);
        total = Some(match total {
            Some(acc) => tape.add(acc, mse)?,
            None => mse,
        });
    }
    Ok(tape.mul_scalar(total.unwrap(), inv))
}

/// Standard GAN loss from raw logit maps via a numerically safe
/// log-sigmoid. Returns (discriminator loss, generator loss); the
/// generator term is the non-saturating form -E[log sigma(D(fake))].
pub fn loss_gan<T: Scalar>(
    tape: &mut Tape<T>,
    real_logits: VarId,
    fake_logits: VarId,
) -> Result<(VarId, VarId)> {
    if tape.shape(real_logits) != tape.shape(fake_logits) {
        return Err(TensorError::ShapeMismatch {
            op: "loss_gan",
            lhs: tape.shape(real_logits).to_vec(),
            rhs: tape.shape(fake_logits).to_vec(),
        });
    }
    let eps = T::from_f64(LOG_EPS);
    let sr = tape.sigmoid(real_logits);
    let log_sr = tape.log_eps(sr, eps);
    let d_real = tape.mean_all(log_sr);

    let sf = tape.sigmoid(fake_logits);
    let neg_sf = tape.neg(sf);
    let one_minus = tape.add_scalar(neg_sf, T::one());
    let log_omf = tape.log_eps(one_minus, eps);
    let d_fake = tape.mean_all(log_omf);

    let d_sum = tape.add(d_real, d_fake)?;
    let d_loss = tape.neg(d_sum);

    let g_loss = gan_generator_loss(tape, fake_logits)?;
    Ok((d_loss, g_loss))
}

/// Non-saturating generator side: -mean log sigma(fake logits).
pub fn gan_generator_loss<T: Scalar>(tape: &mut Tape<T>, fake_logits: VarId) -> Result<VarId> {
    let eps = T::from_f64(LOG_EPS);
    let sf = tape.sigmoid(fake_logits);
    let log_sf = tape.log_eps(sf, eps);
    let m = tape.mean_all(log_sf);
    Ok(tape.neg(m))
}

/// adversarial + alpha lab + beta lch + gamma rgb + mu perceptual.
pub fn total_generator_loss<T: Scalar>(
    tape: &mut Tape<T>,
    adversarial_g: VarId,
    lab: VarId,
    lch: VarId,
    rgb: VarId,
    perceptual: VarId,
    w: &LossWeights,
) -> Result<VarId> {
    let lab_w = tape.mul_scalar(lab, T::from_f64(w.lab));
    let lch_w = tape.mul_scalar(lch, T::from_f64(w.lch));
    let rgb_w = tape.mul_scalar(rgb, T::from_f64(w.rgb));
    let per_w = tape.mul_scalar(perceptual, T::from_f64(w.perceptual));
    let t = tape.add(adversarial_g, lab_w)?;
    let t = tape.add(t, lch_w)?;
    let t = tape.add(t, rgb_w)?;
    tape.add(t, per_w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::seeded_uniform;
    use crate::model::init_perceptual;

    fn img(seed: u64, n: usize, s: usize) -> Tensor<f64> {
        seeded_uniform(&[n, 3, s, s], 0.02, 0.98, seed)
    }

    fn scalar_of(tape: &Tape<f64>, id: VarId) -> f64 {
        tape.value(id).item()
    }

    #[test]
    fn rgb_phases_match_spec_examples() {
        // constant difference 0.1: early 0.01, late 0.1
        let a = Tensor::<f64>::full(vec![1, 3, 4, 4], 0.5);
        let b = Tensor::<f64>::full(vec![1, 3, 4, 4], 0.6);
        let mut tape = Tape::new();
        let g = tape.leaf(a.clone());
        let e = loss_rgb(&mut tape, g, &b, RgbPhase::Early).unwrap();
        assert!((scalar_of(&tape, e) - 0.01).abs() < 1e-12);
        let l = loss_rgb(&mut tape, g, &b, RgbPhase::Late).unwrap();
        assert!((scalar_of(&tape, l) - 0.1).abs() < 1e-12);
        let same = loss_rgb(&mut tape, g, &a, RgbPhase::Early).unwrap();
        assert_eq!(scalar_of(&tape, same), 0.0);
    }

    #[test]
    fn lab_loss_on_identical_images_is_reference_entropy() {
        // gen = ref: the L term vanishes and each cross-entropy equals
        // the entropy of the reference distribution, which is >= 0.
        let x = img(42, 1, 6);
        let mut tape = Tape::new();
        let g = tape.leaf(x.clone());
        let v = loss_lab(&mut tape, g, &x).unwrap();
        let got = scalar_of(&tape, v);
        assert!(got >= 0.0);

        // Direct entropy computation of the quantized A/B reference.
        let lab = color::rgb_to_lab_t(&x).unwrap();
        let mut expect = 0.0;
        for c in 1..3 {
            let ch = channel(&lab, c);
            let q = quantized_constant(&ch, color::AB_RANGE).unwrap();
            let k = color::QUANT_BINS;
            let mut h = 0.0;
            for row in q.data().chunks(k) {
                for &p in row {
                    if p > 0.0 {
                        h -= p * p.max(LOG_EPS).ln();
                    }
                }
            }
            expect += h / ch.numel() as f64;
        }
        assert!((got - expect).abs() < 1e-9, "got {got}, expect {expect}");
    }

    #[test]
    fn lch_loss_zero_at_bin_centers() {
        // A gray ramp whose L values sit exactly on quantization
        // centers: identical images give exactly zero LCH loss.
        // L bins span [0,100] with 256 bins; centers at i*100/255.
        let l_targets = [10.0 * 100.0 / 255.0, 64.0 * 100.0 / 255.0];
        // Invert L -> gray value: for gray g, lab L = 116 f(y) - 16
        // with y the relative luminance of g. Use lab_to_rgb.
        let mut vals = Vec::new();
        for &l in &l_targets {
            let lab = Tensor::<f64>::from_vec(vec![1, 3, 1, 1], vec![l, 0.0, 0.0]).unwrap();
            let rgb = color::lab_to_rgb_t(&lab).unwrap();
            vals.push(rgb.data()[0]);
        }
        let data: Vec<f64> = vals
            .iter()
            .flat_map(|&v| std::iter::repeat(v).take(1))
            .collect();
        let n = data.len();
        let mut rgb = Vec::new();
        for _ in 0..3 {
            rgb.extend_from_slice(&data);
        }
        // Shape [1,3,n,1]: gray column image.
        let mut interleaved = vec![0.0; 3 * n];
        for c in 0..3 {
            for i in 0..n {
                interleaved[c * n + i] = data[i];
            }
        }
        let x = Tensor::<f64>::from_vec(vec![1, 3, n, 1], interleaved).unwrap();
        let mut tape = Tape::new();
        let g = tape.leaf(x.clone());
        let v = loss_lch(&mut tape, g, &x).unwrap();
        let got = scalar_of(&tape, v);
        assert!(got.abs() < 1e-9, "expected ~0, got {got}");
    }

    #[test]
    fn hue_wrap_example() {
        // wrapped difference of (-pi+0.01) vs (pi-0.01) is 0.02.
        let pi = std::f64::consts::PI;
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::scalar(-pi + 0.01));
        let b = tape.leaf(Tensor::scalar(pi - 0.01));
        let d = tape.sub(a, b).unwrap();
        let w = tape.wrap_angle(d);
        let sq = tape.square(w);
        assert!((scalar_of(&tape, sq) - 4e-4).abs() < 1e-12);
    }

    #[test]
    fn gan_loss_at_zero_logits() {
        let mut tape = Tape::<f64>::new();
        let r = tape.leaf(Tensor::zeros(vec![1, 1, 4, 4]));
        let f = tape.leaf(Tensor::zeros(vec![1, 1, 4, 4]));
        let (d, g) = loss_gan(&mut tape, r, f).unwrap();
        let ln2 = 2.0f64.ln();
        assert!((scalar_of(&tape, d) - 2.0 * ln2).abs() < 1e-12);
        assert!((scalar_of(&tape, g) - ln2).abs() < 1e-12);
    }

    #[test]
    fn gan_loss_perfect_discriminator_limit() {
        let mut tape = Tape::<f64>::new();
        let r = tape.leaf(Tensor::full(vec![2, 1, 2, 2], 1e4));
        let f = tape.leaf(Tensor::full(vec![2, 1, 2, 2], -1e4));
        let (d, _) = loss_gan(&mut tape, r, f).unwrap();
        assert!(scalar_of(&tape, d).abs() < 1e-9);
    }

    #[test]
    fn total_matches_eq15_weights() {
        let mut tape = Tape::<f64>::new();
        let one = Tensor::scalar(1.0);
        let ids: Vec<VarId> = (0..5).map(|_| tape.leaf(one.clone())).collect();
        let total = total_generator_loss(
            &mut tape,
            ids[0],
            ids[1],
            ids[2],
            ids[3],
            ids[4],
            &LossWeights::default(),
        )
        .unwrap();
        assert!((scalar_of(&tape, total) - 102.101).abs() < 1e-12);
    }

    #[test]
    fn total_is_linear_in_each_part() {
        let w = LossWeights::default();
        let mut tape = Tape::<f64>::new();
        let parts: Vec<VarId> = [3.0, 0.5, 2.0, 1.5, 0.25]
            .iter()
            .map(|&v| tape.leaf(Tensor::scalar(v)))
            .collect();
        let t1 = total_generator_loss(&mut tape, parts[0], parts[1], parts[2], parts[3], parts[4], &w)
            .unwrap();
        // Doubling mu doubles only the perceptual contribution.
        let w2 = LossWeights {
            perceptual: 2.0 * w.perceptual,
            ..w
        };
        let t2 = total_generator_loss(&mut tape, parts[0], parts[1], parts[2], parts[3], parts[4], &w2)
            .unwrap();
        let delta = scalar_of(&tape, t2) - scalar_of(&tape, t1);
        assert!((delta - w.perceptual * 0.25).abs() < 1e-12);
    }

    #[test]
    fn perceptual_zero_for_identical_inputs() {
        let extractor: ParamMap<f64> = init_perceptual();
        let x = img(5, 1, 16);
        let mut tape = Tape::new();
        extractor.bind(&mut tape);
        let g = tape.leaf(x.clone());
        let v = loss_perceptual(&mut tape, g, &x, &extractor).unwrap();
        assert_eq!(scalar_of(&tape, v), 0.0);
    }

    #[test]
    fn lab_lch_detect_constant_shifts() {
        // Loss strictly increases with the size of a constant shift.
        let base = img(77, 1, 8);
        let mut last_lab = 0.0;
        let mut last_lch = 0.0;
        for (k, delta) in [0.0, 0.02, 0.05].iter().enumerate() {
            let shifted = base.map(|v| (v + delta).min(1.0));
            let mut tape = Tape::new();
            let g = tape.leaf(shifted);
            let lab = loss_lab(&mut tape, g, &base).unwrap();
            let lch = loss_lch(&mut tape, g, &base).unwrap();
            let (lv, cv) = (scalar_of(&tape, lab), scalar_of(&tape, lch));
            if k > 0 {
                assert!(lv > last_lab, "lab loss not increasing: {lv} <= {last_lab}");
                assert!(cv > last_lch, "lch loss not increasing: {cv} <= {last_lch}");
            }
            last_lab = lv;
            last_lch = cv;
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let g = tape.leaf(Tensor::zeros(vec![1, 3, 4, 4]));
        let r = Tensor::zeros(vec![1, 3, 8, 8]);
        assert!(loss_rgb(&mut tape, g, &r, RgbPhase::Early).is_err());
        assert!(loss_lab(&mut tape, g, &r).is_err());
    }
}
