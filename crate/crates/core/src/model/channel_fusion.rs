//! Channel-fusion transformer over the four encoder scales.
//!
//! Each scale is patch-projected to the same token count d =
//! (side/patch)^2, the per-scale sequences are concatenated along the
//! channel axis, and attention runs along channels: per head the
//! similarity map Q_i^T K is [C_i, C], instance-normalized and
//! softmaxed over the key-channel axis, then applied to V^T. Head
//! outputs are averaged (not concatenated), transposed back, and added
//! to the averaged query as a residual before a per-scale FFN.

use rand::Rng;

use super::{conv_bare, feed_forward, layer_norm_affine, GeneratorConfig};
use crate::params::{init_conv, init_linear, init_ln_affine, uniform_fan_in, ParamMap};
use crate::tape::{Tape, VarId};
use crate::tensor::{Result, Scalar, TensorError};

pub fn init_channel_fusion<T: Scalar, R: Rng + ?Sized>(
    params: &mut ParamMap<T>,
    cfg: &GeneratorConfig,
    rng: &mut R,
) {
    let c = cfg.channels();
    let csum = cfg.channel_sum();
    for (i, &ci) in c.iter().enumerate() {
        let k = cfg.patch >> i;
        init_conv(params, &format!("g/channel/patch{i}"), ci, ci, k, rng);
    }
    for l in 0..cfg.layers {
        let p = format!("g/channel/l{l}");
        for h in 0..cfg.heads {
            params.insert(
                format!("{p}/h{h}/k/w"),
                uniform_fan_in(&[csum, csum], csum, rng),
            );
            params.insert(
                format!("{p}/h{h}/v/w"),
                uniform_fan_in(&[csum, csum], csum, rng),
            );
            for (i, &ci) in c.iter().enumerate() {
                params.insert(
                    format!("{p}/h{h}/q{i}/w"),
                    uniform_fan_in(&[ci, ci], ci, rng),
                );
            }
        }
        for (i, &ci) in c.iter().enumerate() {
            init_ln_affine(params, &format!("{p}/ln{i}"), ci);
            init_linear(params, &format!("{p}/ffn{i}/fc1"), ci, 4 * ci, rng);
            init_linear(params, &format!("{p}/ffn{i}/fc2"), 4 * ci, ci, rng);
        }
    }
}

/// Inputs are the encoder maps at scales 1, 1/2, 1/4, 1/8 with widths
/// C1..C4; outputs are fused maps at the same scales and widths.
pub fn channel_fusion_forward<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &GeneratorConfig,
    feats: [VarId; 4],
) -> Result<[VarId; 4]> {
    let c = cfg.channels();
    let csum = cfg.channel_sum();
    let grid = cfg.side / cfg.patch;
    let d = grid * grid;
    let n = tape.shape(feats[0])[0];

    // Patch projection: conv with kernel = stride = patch/2^i, then
    // flatten the token grid and move channels last: [n, d, C_i].
    let mut seqs = [feats[0]; 4];
    for i in 0..4 {
        let k = cfg.patch >> i;
        let projected = conv_bare(tape, &format!("g/channel/patch{i}"), feats[i], k)?;
        let got = tape.shape(projected).to_vec();
        if got != [n, c[i], grid, grid] {
            return Err(TensorError::InvalidShape {
                op: "channel_fusion tokens",
                shape: got,
                reason: format!("expected [{n}, {}, {grid}, {grid}]", c[i]),
            });
        }
        let flat = tape.reshape(projected, vec![n, c[i], d])?;
        seqs[i] = tape.transpose12(flat)?;
    }

    let inv_heads = T::from_f64(1.0 / cfg.heads as f64);
    let scale = T::from_f64(1.0 / (csum as f64).sqrt());
    for l in 0..cfg.layers {
        let p = format!("g/channel/l{l}");
        let s = tape.concat(&seqs, 2)?; // [n, d, C]
        // Per-head key/value projections of the concatenated sequence.
        let mut keys = Vec::with_capacity(cfg.heads);
        let mut values_t = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let k = tape.matmul(s, tape.p(&format!("{p}/h{h}/k/w")))?;
            let v = tape.matmul(s, tape.p(&format!("{p}/h{h}/v/w")))?;
            keys.push(k);
            values_t.push(tape.transpose12(v)?); // [n, C, d]
        }
        for i in 0..4 {
            let mut ca_sum: Option<VarId> = None;
            let mut q_sum: Option<VarId> = None;
            for h in 0..cfg.heads {
                let q = tape.matmul(seqs[i], tape.p(&format!("{p}/h{h}/q{i}/w")))?;
                let qt = tape.transpose12(q)?; // [n, C_i, d]
                let sim = tape.bmm(qt, keys[h])?; // [n, C_i, C]
                let sim = tape.mul_scalar(sim, scale);
                let sim = tape.instance_norm(sim)?;
                let att = tape.softmax_last(sim)?;
                let ca = tape.bmm(att, values_t[h])?; // [n, C_i, d]
                ca_sum = Some(match ca_sum {
                    Some(acc) => tape.add(acc, ca)?,
                    None => ca,
                });
                q_sum = Some(match q_sum {
                    Some(acc) => tape.add(acc, q)?,
                    None => q,
                });
            }
            let ca_mean = tape.mul_scalar(ca_sum.unwrap(), inv_heads);
            // The head average is [C_i, d]; transpose so the residual
            // add against the [d, C_i] query is well-formed.
            let ca_t = tape.transpose12(ca_mean)?;
            let q_mean = tape.mul_scalar(q_sum.unwrap(), inv_heads);
            let attended = tape.add(ca_t, q_mean)?;
            let normed = layer_norm_affine(tape, &format!("{p}/ln{i}"), attended)?;
            let ffn = feed_forward(tape, &format!("{p}/ffn{i}"), normed)?;
            seqs[i] = tape.add(attended, ffn)?;
        }
    }

    // Remap: tokens back onto the grid, then nearest-neighbor upsample
    // each token over its patch footprint.
    let mut maps = [seqs[0]; 4];
    for i in 0..4 {
        let t = tape.transpose12(seqs[i])?; // [n, C_i, d]
        let g = tape.reshape(t, vec![n, c[i], grid, grid])?;
        maps[i] = tape.upsample_nn_pow2(g, cfg.patch >> i)?;
    }
    Ok(maps)
}
