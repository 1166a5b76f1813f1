//! Frozen feature extractor for the perceptual loss: a fixed,
//! seed-deterministic four-stage strided conv pyramid. Its weights are
//! never updated (gradients still flow through it to the generator),
//! and an externally trained extractor can be loaded from a checkpoint
//! in its place as long as the shapes match.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::params::{init_conv, ParamMap};
use crate::tape::{Tape, VarId};
use crate::tensor::{Result, Scalar};

pub const PERCEPTUAL_SEED: u64 = 0x7e47_f00d;
const STAGE_WIDTHS: [usize; 4] = [16, 32, 64, 64];

pub fn init_perceptual<T: Scalar>() -> ParamMap<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(PERCEPTUAL_SEED);
    let mut params = ParamMap::new();
    let mut cin = 3;
    for (i, &cout) in STAGE_WIDTHS.iter().enumerate() {
        init_conv(&mut params, &format!("p/s{i}"), cout, cin, 3, &mut rng);
        cin = cout;
    }
    params
}

/// Feature maps at the output of each stride-2 stage.
pub fn perceptual_features<T: Scalar>(tape: &mut Tape<T>, img: VarId) -> Result<Vec<VarId>> {
    let mut taps = Vec::with_capacity(STAGE_WIDTHS.len());
    let mut cur = img;
    for i in 0..STAGE_WIDTHS.len() {
        let w = tape.p(&format!("p/s{i}/w"));
        let b = tape.p(&format!("p/s{i}/b"));
        let y = tape.conv2d(cur, w, Some(b), 2)?;
        cur = tape.leaky_relu(y, T::from_f64(super::LRELU_SLOPE));
        taps.push(cur);
    }
    Ok(taps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn seed_determinism() {
        let a: ParamMap<f32> = init_perceptual();
        let b: ParamMap<f32> = init_perceptual();
        for (name, t) in a.iter() {
            assert_eq!(t.data(), b.get(name).data(), "{name} differs across inits");
        }
    }

    #[test]
    fn pyramid_halves_each_stage() {
        let params: ParamMap<f32> = init_perceptual();
        let mut tape = Tape::new();
        params.bind(&mut tape);
        let img = tape.leaf(Tensor::full(vec![1, 3, 32, 32], 0.3));
        let taps = perceptual_features(&mut tape, img).unwrap();
        let sides = [16, 8, 4, 2];
        for (t, (&side, &w)) in taps.iter().zip(sides.iter().zip(&STAGE_WIDTHS)) {
            assert_eq!(tape.shape(*t), &[1, w, side, side]);
        }
    }
}
