//! U-shaped generator. The encoder fuses progressively pooled copies
//! of the input into four convolutional scales; the bottleneck runs
//! the spatial transformer; skip connections pass through the channel
//! fusion transformer; the decoder upsamples back to full resolution
//! and exposes its intermediate maps as taps for the multi-scale
//! discriminator.

use rand::Rng;

use super::{
    channel_fusion_forward, conv_bare, conv_unit, init_channel_fusion, init_spatial_transformer,
    spatial_transformer_forward, GeneratorConfig,
};
use crate::params::{init_conv, ParamMap};
use crate::tape::{Tape, VarId};
use crate::tensor::{Result, Scalar, TensorError};

/// Encoder output: maps at scales 1, 1/2, 1/4, 1/8 with widths C1..C4,
/// plus the 1/16-scale bottleneck (width C4).
pub struct EncoderFeatures {
    pub scales: [VarId; 4],
    pub bottleneck: VarId,
}

/// Full forward output: the enhanced image and the four decoder taps
/// ordered coarse to fine (1/8, 1/4, 1/2, 1).
pub struct GeneratorOutput {
    pub image: VarId,
    pub taps: [VarId; 4],
}

pub fn init_generator<T: Scalar, R: Rng + ?Sized>(
    cfg: &GeneratorConfig,
    rng: &mut R,
) -> ParamMap<T> {
    let mut params = ParamMap::new();
    let c = cfg.channels();
    // Encoder blocks with image-fusion projections between scales.
    init_conv(&mut params, "g/enc0/c1", c[0], 3, 3, rng);
    init_conv(&mut params, "g/enc0/c2", c[0], c[0], 3, rng);
    for i in 1..4 {
        init_conv(&mut params, &format!("g/down{i}"), c[i], c[i - 1], 3, rng);
        init_conv(&mut params, &format!("g/fuse{i}"), c[i], 3, 1, rng);
        init_conv(&mut params, &format!("g/enc{i}/c1"), c[i], c[i], 3, rng);
        init_conv(&mut params, &format!("g/enc{i}/c2"), c[i], c[i], 3, rng);
    }
    init_conv(&mut params, "g/bott", c[3], c[3], 3, rng);
    init_spatial_transformer(&mut params, cfg, rng);
    init_channel_fusion(&mut params, cfg, rng);
    // Decoder: up-convs then two conv units per scale.
    for i in 0..4 {
        let ct = c[3 - i];
        let cprev = if i == 0 { c[3] } else { c[4 - i] };
        init_conv(&mut params, &format!("g/dec{i}/up"), ct, cprev, 3, rng);
        init_conv(&mut params, &format!("g/dec{i}/c1"), ct, 2 * ct, 3, rng);
        init_conv(&mut params, &format!("g/dec{i}/c2"), ct, ct, 3, rng);
    }
    init_conv(&mut params, "g/out", 3, c[0], 1, rng);
    params
}

/// Multi-scale encoder. The input image is average-pooled to 1/2, 1/4
/// and 1/8, projected by 1x1 convolutions, and added to the
/// corresponding block inputs; a strided convolution of the last block
/// output forms the 1/16 bottleneck.
pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &GeneratorConfig,
    img: VarId,
) -> Result<EncoderFeatures> {
    let shape = tape.shape(img).to_vec();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(TensorError::InvalidShape {
            op: "encode",
            shape,
            reason: "expected [N,3,H,W]".into(),
        });
    }
    if shape[2] != cfg.side || shape[3] != cfg.side {
        return Err(TensorError::InvalidShape {
            op: "encode",
            shape,
            reason: format!("expected side {} per config", cfg.side),
        });
    }

    let mut scales = [img; 4];
    let b = conv_unit(tape, "g/enc0/c1", img, 1)?;
    scales[0] = conv_unit(tape, "g/enc0/c2", b, 1)?;
    for i in 1..4 {
        let down = conv_bare(tape, &format!("g/down{i}"), scales[i - 1], 2)?;
        let pooled = tape.avg_pool_pow2(img, 1 << i)?;
        let fused = conv_bare(tape, &format!("g/fuse{i}"), pooled, 1)?;
        let block_in = tape.add(down, fused)?;
        let b = conv_unit(tape, &format!("g/enc{i}/c1"), block_in, 1)?;
        scales[i] = conv_unit(tape, &format!("g/enc{i}/c2"), b, 1)?;
    }
    let bottleneck = conv_bare(tape, "g/bott", scales[3], 2)?;
    Ok(EncoderFeatures { scales, bottleneck })
}

pub fn generator_forward<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &GeneratorConfig,
    img: VarId,
) -> Result<GeneratorOutput> {
    let enc = encode(tape, cfg, img)?;
    let bott = spatial_transformer_forward(tape, cfg, enc.bottleneck)?;
    let fused = channel_fusion_forward(tape, cfg, enc.scales)?;

    let mut cur = bott;
    let mut taps = [bott; 4];
    for i in 0..4 {
        let up = tape.upsample_nn_x2(cur)?;
        let upc = conv_bare(tape, &format!("g/dec{i}/up"), up, 1)?;
        let cat = tape.concat(&[upc, fused[3 - i]], 1)?;
        let u = conv_unit(tape, &format!("g/dec{i}/c1"), cat, 1)?;
        cur = conv_unit(tape, &format!("g/dec{i}/c2"), u, 1)?;
        taps[i] = cur;
    }
    let logits = conv_bare(tape, "g/out", cur, 1)?;
    let image = tape.sigmoid(logits);
    Ok(GeneratorOutput { image, taps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> GeneratorConfig {
        GeneratorConfig {
            side: 32,
            patch: 8,
            width_mult: 0.125,
            layers: 1,
            heads: 2,
            ..Default::default()
        }
    }

    #[test]
    fn encoder_shapes_follow_scale_law() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params: ParamMap<f32> = init_generator(&cfg, &mut rng);
        let mut tape = Tape::new();
        params.bind(&mut tape);
        let img = tape.leaf(Tensor::rand_uniform(vec![1, 3, 32, 32], 0.0, 1.0, &mut rng));
        let enc = encode(&mut tape, &cfg, img).unwrap();
        let c = cfg.channels();
        for (i, &s) in enc.scales.iter().enumerate() {
            assert_eq!(tape.shape(s), &[1, c[i], 32 >> i, 32 >> i]);
        }
        assert_eq!(tape.shape(enc.bottleneck), &[1, c[3], 2, 2]);
    }

    #[test]
    fn zero_image_with_zero_biases_stays_zero() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params: ParamMap<f64> = init_generator(&cfg, &mut rng);
        let mut tape = Tape::new();
        params.bind(&mut tape);
        let img = tape.leaf(Tensor::zeros(vec![1, 3, 32, 32]));
        let enc = encode(&mut tape, &cfg, img).unwrap();
        for s in enc.scales {
            assert!(tape.value(s).all_finite());
            assert!(tape.value(s).data().iter().all(|&v| v == 0.0));
        }
        assert!(tape.value(enc.bottleneck).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_emits_image_and_taps() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params: ParamMap<f32> = init_generator(&cfg, &mut rng);
        let mut tape = Tape::new();
        params.bind(&mut tape);
        let img = tape.leaf(Tensor::rand_uniform(vec![2, 3, 32, 32], 0.0, 1.0, &mut rng));
        let out = generator_forward(&mut tape, &cfg, img).unwrap();
        assert_eq!(tape.shape(out.image), &[2, 3, 32, 32]);
        assert!(tape
            .value(out.image)
            .data()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
        let c = cfg.channels();
        for (i, &t) in out.taps.iter().enumerate() {
            let s = 4 << i; // scales 1/8 .. 1 of side 32
            assert_eq!(tape.shape(t), &[2, c[3 - i], s, s]);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let params: ParamMap<f32> = init_generator(&cfg, &mut rng);
        let img = Tensor::rand_uniform(vec![1, 3, 32, 32], 0.0, 1.0, &mut rng);
        let run = || {
            let mut tape = Tape::new();
            params.bind(&mut tape);
            let x = tape.leaf(img.clone());
            let out = generator_forward(&mut tape, &cfg, x).unwrap();
            tape.value(out.image).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn every_parameter_trains() {
        // An L2 loss against a random target must reach every parameter,
        // including the position embedding and all attention projections.
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params: ParamMap<f64> = init_generator(&cfg, &mut rng);
        let mut tape = Tape::new();
        params.bind(&mut tape);
        let img = tape.leaf(Tensor::rand_uniform(vec![1, 3, 32, 32], 0.0, 1.0, &mut rng));
        let target = tape.leaf(Tensor::rand_uniform(vec![1, 3, 32, 32], 0.0, 1.0, &mut rng));
        let out = generator_forward(&mut tape, &cfg, img).unwrap();
        let diff = tape.sub(out.image, target).unwrap();
        let sq = tape.square(diff);
        let loss = tape.mean_all(sq);
        let grads = tape.backward(loss).unwrap();
        for name in params.names() {
            let g = grads.get_or_zeros(tape.p(name));
            let norm: f64 = g.data().iter().map(|v| v * v).sum();
            assert!(norm > 0.0, "parameter {name} received no gradient");
        }
    }
}
