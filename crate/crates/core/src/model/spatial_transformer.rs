//! Bottleneck transformer: the 1/16-scale feature map is flattened to
//! a token sequence by a linear projection, a learnable position
//! embedding is added, and a stack of standard pre-norm transformer
//! layers models global spatial context before the map is restored.

use rand::Rng;

use super::{feed_forward, layer_norm_affine, linear, GeneratorConfig};
use crate::params::{init_linear, init_ln_affine, ParamMap};
use crate::tape::{Tape, VarId};
use crate::tensor::{Result, Scalar, Tensor, TensorError};

pub fn init_spatial_transformer<T: Scalar, R: Rng + ?Sized>(
    params: &mut ParamMap<T>,
    cfg: &GeneratorConfig,
    rng: &mut R,
) {
    let c4 = cfg.channels()[3];
    init_linear(params, "g/spatial/proj", c4, c4, rng);
    // Zero-initialized position embedding, one row per token.
    params.insert(
        "g/spatial/pe",
        Tensor::zeros(vec![cfg.bottleneck_tokens(), c4]),
    );
    for l in 0..cfg.layers {
        let p = format!("g/spatial/l{l}");
        init_ln_affine(params, &format!("{p}/ln1"), c4);
        for name in ["q", "k", "v", "o"] {
            init_linear(params, &format!("{p}/attn/{name}"), c4, c4, rng);
        }
        init_ln_affine(params, &format!("{p}/ln2"), c4);
        init_linear(params, &format!("{p}/ffn/fc1"), c4, 4 * c4, rng);
        init_linear(params, &format!("{p}/ffn/fc2"), 4 * c4, c4, rng);
    }
}

/// Multi-head self-attention over [n, d, c]; heads are contiguous
/// slices of the projected channels.
fn self_attention<T: Scalar>(
    tape: &mut Tape<T>,
    prefix: &str,
    x: VarId,
    heads: usize,
) -> Result<VarId> {
    let c = *tape.shape(x).last().unwrap();
    let hd = c / heads;
    let q = linear(tape, &format!("{prefix}/q"), x)?;
    let k = linear(tape, &format!("{prefix}/k"), x)?;
    let v = linear(tape, &format!("{prefix}/v"), x)?;
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_axis(q, 2, h * hd, hd)?;
        let kh = tape.slice_axis(k, 2, h * hd, hd)?;
        let vh = tape.slice_axis(v, 2, h * hd, hd)?;
        let kt = tape.transpose12(kh)?;
        let scores = tape.bmm(qh, kt)?;
        let scores = tape.mul_scalar(scores, scale);
        let att = tape.softmax_last(scores)?;
        outs.push(tape.bmm(att, vh)?);
    }
    let merged = tape.concat(&outs, 2)?;
    linear(tape, &format!("{prefix}/o"), merged)
}

/// [n, c4, s, s] -> [n, c4, s, s] with s = side/16.
pub fn spatial_transformer_forward<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &GeneratorConfig,
    bottleneck: VarId,
) -> Result<VarId> {
    let shape = tape.shape(bottleneck).to_vec();
    if shape.len() != 4 {
        return Err(TensorError::RankMismatch {
            op: "spatial_transformer",
            expected: 4,
            shape,
        });
    }
    let (n, c4, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let d = h * w;
    let pe = tape.p("g/spatial/pe");
    if tape.shape(pe) != [d, c4] {
        return Err(TensorError::ShapeMismatch {
            op: "spatial_transformer pe",
            lhs: vec![d, c4],
            rhs: tape.shape(pe).to_vec(),
        });
    }
    let flat = tape.reshape(bottleneck, vec![n, c4, d])?;
    let tokens = tape.transpose12(flat)?;
    let projected = linear(tape, "g/spatial/proj", tokens)?;
    let mut s = tape.add(projected, pe)?;
    for l in 0..cfg.layers {
        let p = format!("g/spatial/l{l}");
        let normed = layer_norm_affine(tape, &format!("{p}/ln1"), s)?;
        let mha = self_attention(tape, &format!("{p}/attn"), normed, cfg.heads)?;
        s = tape.add(mha, s)?;
        let normed = layer_norm_affine(tape, &format!("{p}/ln2"), s)?;
        let ffn = feed_forward(tape, &format!("{p}/ffn"), normed)?;
        s = tape.add(ffn, s)?;
    }
    let back = tape.transpose12(s)?;
    tape.reshape(back, vec![n, c4, h, w])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> GeneratorConfig {
        GeneratorConfig {
            side: 32,
            patch: 8,
            width_mult: 0.125,
            layers: 2,
            ..Default::default()
        }
    }

    #[test]
    fn preserves_shape() {
        let cfg = tiny_cfg();
        cfg.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = ParamMap::<f64>::new();
        init_spatial_transformer(&mut params, &cfg, &mut rng);
        let mut tape = Tape::new();
        params.bind(&mut tape);
        let c4 = cfg.channels()[3];
        let x = tape.leaf(Tensor::rand_uniform(vec![2, c4, 2, 2], -1.0, 1.0, &mut rng));
        let y = spatial_transformer_forward(&mut tape, &cfg, x).unwrap();
        assert_eq!(tape.shape(y), &[2, c4, 2, 2]);
        assert!(tape.value(y).all_finite());
    }

    #[test]
    fn zeroed_projections_reduce_to_residual_identity() {
        // With attention output projections and FFN second layers
        // zeroed, every layer is an identity, so the module equals the
        // remapped input projection plus position embedding.
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = ParamMap::<f64>::new();
        init_spatial_transformer(&mut params, &cfg, &mut rng);
        let c4 = cfg.channels()[3];
        for l in 0..cfg.layers {
            params.set(
                &format!("g/spatial/l{l}/attn/o/w"),
                Tensor::zeros(vec![c4, c4]),
            );
            params.set(
                &format!("g/spatial/l{l}/ffn/fc2/w"),
                Tensor::zeros(vec![4 * c4, c4]),
            );
        }
        let mut tape = Tape::new();
        params.bind(&mut tape);
        let x = tape.leaf(Tensor::rand_uniform(vec![1, c4, 2, 2], -1.0, 1.0, &mut rng));
        let y = spatial_transformer_forward(&mut tape, &cfg, x).unwrap();

        // Expected: remap(proj(tokens) + pe) with pe = 0.
        let mut ref_tape = Tape::<f64>::new();
        params.bind(&mut ref_tape);
        let xr = ref_tape.leaf(tape.value(x).clone());
        let flat = ref_tape.reshape(xr, vec![1, c4, 4]).unwrap();
        let tok = ref_tape.transpose12(flat).unwrap();
        let proj = linear(&mut ref_tape, "g/spatial/proj", tok).unwrap();
        let back = ref_tape.transpose12(proj).unwrap();
        let expect = ref_tape.reshape(back, vec![1, c4, 2, 2]).unwrap();

        let diff = tape.value(y).max_abs_diff(ref_tape.value(expect));
        assert!(diff < 1e-12, "not an identity: {diff}");
    }

    #[test]
    fn position_embedding_receives_gradient() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ParamMap::<f64>::new();
        init_spatial_transformer(&mut params, &cfg, &mut rng);
        let c4 = cfg.channels()[3];
        let mut tape = Tape::new();
        params.bind(&mut tape);
        let x = tape.leaf(Tensor::rand_uniform(vec![1, c4, 2, 2], -1.0, 1.0, &mut rng));
        let y = spatial_transformer_forward(&mut tape, &cfg, x).unwrap();
        let sq = tape.square(y);
        let loss = tape.mean_all(sq);
        let grads = tape.backward(loss).unwrap();
        let pe_grad = grads.get(tape.p("g/spatial/pe")).expect("pe grad");
        let norm: f64 = pe_grad.data().iter().map(|v| v * v).sum();
        assert!(norm > 0.0, "position embedding got no gradient");
    }
}
