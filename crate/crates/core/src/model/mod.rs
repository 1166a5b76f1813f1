//! The enhancement network: U-shaped generator with a spatial
//! transformer bottleneck and channel-fusion skip paths, plus the
//! multi-scale discriminator and the frozen perceptual extractor.

mod channel_fusion;
mod config;
mod discriminator;
mod generator;
mod perceptual;
mod spatial_transformer;

pub use config::{ConfigError, GeneratorConfig};
pub use discriminator::{discriminate, init_discriminator, real_side_taps};
pub use generator::{encode, generator_forward, init_generator, EncoderFeatures, GeneratorOutput};
pub use perceptual::{init_perceptual, perceptual_features, PERCEPTUAL_SEED};

pub use channel_fusion::{channel_fusion_forward, init_channel_fusion};
pub use spatial_transformer::{init_spatial_transformer, spatial_transformer_forward};

use crate::tape::{Tape, VarId};
use crate::tensor::{Result, Scalar};

pub const LRELU_SLOPE: f64 = 0.2;

/// conv -> instance norm -> leaky rectifier, the standard block unit.
pub(crate) fn conv_unit<T: Scalar>(
    tape: &mut Tape<T>,
    prefix: &str,
    x: VarId,
    stride: usize,
) -> Result<VarId> {
    let w = tape.p(&format!("{prefix}/w"));
    let b = tape.p(&format!("{prefix}/b"));
    let y = tape.conv2d(x, w, Some(b), stride)?;
    let y = tape.instance_norm(y)?;
    Ok(tape.leaky_relu(y, T::from_f64(LRELU_SLOPE)))
}

/// Plain convolution with bias, no norm or activation.
pub(crate) fn conv_bare<T: Scalar>(
    tape: &mut Tape<T>,
    prefix: &str,
    x: VarId,
    stride: usize,
) -> Result<VarId> {
    let w = tape.p(&format!("{prefix}/w"));
    let b = tape.p(&format!("{prefix}/b"));
    tape.conv2d(x, w, Some(b), stride)
}

/// Linear layer y = x w + b on [.., din] with broadcast bias.
pub(crate) fn linear<T: Scalar>(tape: &mut Tape<T>, prefix: &str, x: VarId) -> Result<VarId> {
    let w = tape.p(&format!("{prefix}/w"));
    let b = tape.p(&format!("{prefix}/b"));
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// Layer norm followed by the learned affine (gamma, beta broadcast
/// over the last axis).
pub(crate) fn layer_norm_affine<T: Scalar>(
    tape: &mut Tape<T>,
    prefix: &str,
    x: VarId,
) -> Result<VarId> {
    let normed = tape.layer_norm(x)?;
    let gamma = tape.p(&format!("{prefix}/gamma"));
    let beta = tape.p(&format!("{prefix}/beta"));
    let scaled = tape.mul(normed, gamma)?;
    tape.add(scaled, beta)
}

/// Two-layer feed-forward with 4x hidden width and leaky rectifier.
pub(crate) fn feed_forward<T: Scalar>(
    tape: &mut Tape<T>,
    prefix: &str,
    x: VarId,
) -> Result<VarId> {
    let h = linear(tape, &format!("{prefix}/fc1"), x)?;
    let h = tape.leaky_relu(h, T::from_f64(LRELU_SLOPE));
    linear(tape, &format!("{prefix}/fc2"), h)
}
