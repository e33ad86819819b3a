//! Per-frame convolutional feature extractor.
//!
//! Each block is conv3x3 → normalization → ReLU twice. The first convolution of
//! blocks `0..log2(stride)` has stride 2.

use alloc::format;

use crate::weights::Params;
use crate::{Error, ModelConfig, Real, Result, Tape, Var};

const NORM_EPS: f64 = 1e-5;

/// Encodes frames `[B, H, W]` (or `[B, 1, H, W]`) to
/// `[B, d_feat, H/stride, W/stride]`. Frames never mix.
pub fn encode_frames<S: Real>(tape: &mut Tape<S>, params: &Params, config: &ModelConfig, frames: Var) -> Result<Var> {
    let shape = tape.shape(frames).to_vec();
    let (b, h, w) = match shape.as_slice() {
        &[b, h, w] | &[b, 1, h, w] => (b, h, w),
        _ => return Err(Error::shape("encode_frames", format!("expected [T, H, W] frames, got {shape:?}"))),
    };
    let stride = config.encoder_stride;
    if h % stride != 0 || w % stride != 0 {
        let pad = |n: usize| (stride - n % stride) % stride;
        return Err(Error::shape(
            "encode_frames",
            format!(
                "frame size {h}x{w} is not divisible by the encoder stride {stride}; pad by {} rows and {} columns",
                pad(h),
                pad(w)
            ),
        ));
    }
    let mut x = tape.reshape(frames, &[b, 1, h, w])?;
    let eps = S::from_f64(NORM_EPS);
    for block in 0..config.encoder_widths.len() {
        for j in 0..2 {
            let s = if j == 0 && block < config.downsampling_blocks() { 2 } else { 1 };
            let p = |part: &str| params.get(&format!("encoder.b{block}.{part}"));
            x = tape.conv2d(x, p(&format!("conv{j}.weight"))?, Some(p(&format!("conv{j}.bias"))?), s, 1)?;
            let groups = config.encoder_widths[block] / config.norm_group_size;
            x = tape.group_norm(x, groups, p(&format!("norm{j}.gain"))?, p(&format!("norm{j}.offset"))?, eps)?;
            x = tape.relu(x);
        }
    }
    Ok(x)
}

/// Samples frame features `[C, h, w]` at query pixels `[N, 2]`, giving
/// `Q: [N, C]`.
pub fn extract_track_features<S: Real>(
    tape: &mut Tape<S>,
    config: &ModelConfig,
    features: Var,
    queries: Var,
) -> Result<Var> {
    let scaled = tape.scale(queries, S::one() / S::from_usize(config.encoder_stride));
    tape.bilinear_sample(features, scaled)
}
