//! Multi-scale discriminator. Each of the four blocks concatenates the
//! previous block's output, the matching-scale tap map (decoder taps
//! for generated candidates; 1x1 projections of the pooled candidate
//! for reference candidates), and a 1x1 projection of the candidate
//! image pooled to that scale. Four stride-2 stages end in a 1/16-scale
//! patch logit map; no sigmoid here, the loss applies it safely.

use rand::Rng;

use super::{conv_bare, conv_unit, GeneratorConfig};
use crate::params::{init_conv, ParamMap};
use crate::tape::{Tape, VarId};
use crate::tensor::{Result, Scalar, TensorError};

pub fn init_discriminator<T: Scalar, R: Rng + ?Sized>(
    cfg: &GeneratorConfig,
    rng: &mut R,
) -> ParamMap<T> {
    let mut params = ParamMap::new();
    let c = cfg.channels();
    for (k, &ck) in c.iter().enumerate() {
        init_conv(&mut params, &format!("d/img{k}"), ck, 3, 1, rng);
        init_conv(&mut params, &format!("d/real{k}"), ck, 3, 1, rng);
        let prev = if k == 0 { 3 } else { c[k - 1] };
        init_conv(&mut params, &format!("d/blk{k}/c1"), ck, prev + 2 * ck, 3, rng);
        init_conv(&mut params, &format!("d/blk{k}/c2"), ck, ck, 3, rng);
        init_conv(&mut params, &format!("d/blk{k}/down"), ck, ck, 3, rng);
    }
    init_conv(&mut params, "d/head", 1, c[3], 1, rng);
    params
}

/// Tap maps for a reference candidate: the image average-pooled to the
/// four tap scales and projected to the decoder tap widths. Returned
/// coarse to fine (1/8, 1/4, 1/2, 1) to match the decoder tap order.
pub fn real_side_taps<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &GeneratorConfig,
    reference: VarId,
) -> Result<[VarId; 4]> {
    let mut taps = [reference; 4];
    for k in 0..4 {
        let pooled = tape.avg_pool_pow2(reference, 1 << k)?;
        taps[3 - k] = conv_bare(tape, &format!("d/real{k}"), pooled, 1)?;
    }
    let _ = cfg;
    Ok(taps)
}

/// Patch logits for one candidate. `taps` are ordered coarse to fine
/// (1/8, 1/4, 1/2, 1), as produced by the generator decoder and by
/// [`real_side_taps`].
pub fn discriminate<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &GeneratorConfig,
    candidate: VarId,
    taps: &[VarId; 4],
) -> Result<VarId> {
    let shape = tape.shape(candidate).to_vec();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(TensorError::InvalidShape {
            op: "discriminate",
            shape,
            reason: "expected [N,3,H,W] candidate".into(),
        });
    }
    let c = cfg.channels();
    let mut prev = candidate;
    for k in 0..4 {
        let tap = taps[3 - k];
        let tap_shape = tape.shape(tap).to_vec();
        let expect_side = shape[2] >> k;
        if tap_shape != [shape[0], c[k], expect_side, expect_side] {
            return Err(TensorError::InvalidShape {
                op: "discriminate tap",
                shape: tap_shape,
                reason: format!(
                    "scale 1/{} tap must be [{}, {}, {expect_side}, {expect_side}]",
                    1 << k,
                    shape[0],
                    c[k]
                ),
            });
        }
        let pooled = tape.avg_pool_pow2(candidate, 1 << k)?;
        let proj = conv_bare(tape, &format!("d/img{k}"), pooled, 1)?;
        let cat = tape.concat(&[prev, tap, proj], 1)?;
        let x = conv_unit(tape, &format!("d/blk{k}/c1"), cat, 1)?;
        let x = conv_unit(tape, &format!("d/blk{k}/c2"), x, 1)?;
        prev = conv_bare(tape, &format!("d/blk{k}/down"), x, 2)?;
    }
    conv_bare(tape, "d/head", prev, 1)
}
