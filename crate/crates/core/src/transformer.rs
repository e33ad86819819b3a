//! Token assembly, the time/track attention stack and the coordinate head.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use core::f64::consts::{FRAC_PI_2, PI};

use crate::weights::Params;
use crate::{Error, ModelConfig, Real, Result, Tape, Tensor, Var};

const NORM_EPS: f64 = 1e-5;

/// Sinusoids of one coordinate: channel `i` uses frequency index `i / 2`,
/// sine for even `i`, cosine for odd. Frequencies are geometric from
/// `pi / (2 * extent)` to `pi / 2`.
fn embed_axis(v: f64, channels: usize, extent: usize, out: &mut Vec<f64>) {
    for i in 0..channels {
        let w = axis_frequency(i, channels, extent);
        out.push(if i % 2 == 0 { (w * v).sin() } else { (w * v).cos() });
    }
}

fn axis_frequency(i: usize, channels: usize, extent: usize) -> f64 {
    let m = channels.div_ceil(2);
    let lo = PI / (2.0 * extent as f64);
    if m > 1 { lo * (FRAC_PI_2 / lo).powf((i / 2) as f64 / (m - 1) as f64) } else { lo }
}

/// Embeds query points `[N, 2]` as `[N, width]`: the x channels first, then
/// the y channels.
pub fn embed_initial_coords<S: Real>(queries: &[[f64; 2]], width: usize, extent: usize) -> Result<Tensor<S>> {
    if !width.is_multiple_of(2) {
        return Err(Error::invalid(format!("coordinate embedding width {width} must be even")));
    }
    let mut out = Vec::with_capacity(queries.len() * width);
    for &[x, y] in queries {
        embed_axis(x, width / 2, extent, &mut out);
        embed_axis(y, width / 2, extent, &mut out);
    }
    Tensor::new(vec![queries.len(), width], out.into_iter().map(S::from_f64).collect())
}

/// [`embed_initial_coords`] recorded on the tape, so that the embedding of
/// predicted queries (later windows) passes gradients back.
pub fn record_coord_embedding<S: Real>(tape: &mut Tape<S>, queries: Var, width: usize, extent: usize) -> Result<Var> {
    if !width.is_multiple_of(2) {
        return Err(Error::invalid(format!("coordinate embedding width {width} must be even")));
    }
    let n = tape.shape(queries)[0];
    let half = width / 2;
    // cos(a) = sin(a + pi/2) turns the embedding into one sine of an affine map
    let mut f = vec![S::zero(); 2 * width];
    let mut phase = vec![S::zero(); width];
    for axis in 0..2 {
        for i in 0..half {
            let c = axis * half + i;
            f[axis * width + c] = S::from_f64(axis_frequency(i, half, extent));
            if i % 2 == 1 {
                phase[c] = S::from_f64(FRAC_PI_2);
            }
        }
    }
    let f = tape.constant(Tensor::from_parts(vec![2, width], f));
    let phase = tape.constant(Tensor::from_parts(vec![1, width], phase));
    let phase = tape.expand(phase, &[n, width])?;
    let angles = tape.matmul(queries, f, false)?;
    let angles = tape.add(angles, phase)?;
    Ok(tape.sin(angles))
}

/// [`positional_encoding`] recorded on the tape.
pub fn record_positional_encoding<S: Real>(tape: &mut Tape<S>, frames: usize, queries: Var, d: usize, extent: usize) -> Result<Var> {
    let n = tape.shape(queries)[0];
    let temporal = tape.constant(positional_encoding(frames, &vec![[0.0, 0.0]; n], d, extent)?);
    let origin = tape.constant(embed_initial_coords(&vec![[0.0, 0.0]; n], d, extent)?);
    let spatial = record_coord_embedding(tape, queries, d, extent)?;
    let spatial = tape.sub(spatial, origin)?;
    let spatial = tape.reshape(spatial, &[1, n, d])?;
    let spatial = tape.expand(spatial, &[frames, n, d])?;
    tape.add(temporal, spatial)
}

/// Fixed encoding `[T, N, d]`: a frame-index sinusoid plus an embedding of
/// each query position. Only used by the positional-encoding ablation.
pub fn positional_encoding<S: Real>(frames: usize, queries: &[[f64; 2]], d: usize, extent: usize) -> Result<Tensor<S>> {
    let spatial = embed_initial_coords::<f64>(queries, d, extent)?;
    let n = queries.len();
    Ok(Tensor::from_fn(vec![frames, n, d], |i| {
        let (t, p, c) = (i / (n * d), (i / d) % n, i % d);
        let rate = 1.0 / 10000f64.powf((2 * (c / 2)) as f64 / d as f64);
        let temporal = if c % 2 == 0 { (t as f64 * rate).sin() } else { (t as f64 * rate).cos() };
        S::from_f64(temporal + spatial.data()[p * d + c])
    }))
}

/// Concatenates `Q: [N, C]`, correlation `[T, N, K]` and the coordinate
/// embedding `[N, E]` per token and projects to `[T, N, d_model]`.
pub fn assemble_input<S: Real>(tape: &mut Tape<S>, params: &Params, q: Var, corr: Var, embed: Var) -> Result<Var> {
    let cs = tape.shape(corr).to_vec();
    let (qs, es) = (tape.shape(q).to_vec(), tape.shape(embed).to_vec());
    if cs.len() != 3 || qs.len() != 2 || es.len() != 2 || qs[0] != cs[1] || es[0] != cs[1] {
        return Err(Error::shape(
            "assemble_input",
            format!("Q {qs:?}, correlation {cs:?} and embedding {es:?} disagree on T or N"),
        ));
    }
    let (t, n) = (cs[0], cs[1]);
    let qr = tape.reshape(q, &[1, n, qs[1]])?;
    let qe = tape.expand(qr, &[t, n, qs[1]])?;
    let er = tape.reshape(embed, &[1, n, es[1]])?;
    let ee = tape.expand(er, &[t, n, es[1]])?;
    let x = tape.concat(&[qe, corr, ee], 2)?;
    tape.linear(x, params.get("tracker.input.weight")?, Some(params.get("tracker.input.bias")?))
}

fn norm<S: Real>(tape: &mut Tape<S>, params: &Params, prefix: &str, x: Var) -> Result<Var> {
    let g = params.get(&format!("{prefix}.gain"))?;
    let o = params.get(&format!("{prefix}.offset"))?;
    tape.layer_norm(x, g, o, S::from_f64(NORM_EPS))
}

fn dense<S: Real>(tape: &mut Tape<S>, params: &Params, prefix: &str, x: Var) -> Result<Var> {
    let w = params.get(&format!("{prefix}.weight"))?;
    let b = params.get(&format!("{prefix}.bias"))?;
    tape.linear(x, w, Some(b))
}

/// Pre-norm multi-head self-attention over axis 1 of `[B, L, D]` followed
/// by a pre-norm feed-forward layer, both residual.
fn attend<S: Real>(tape: &mut Tape<S>, params: &Params, config: &ModelConfig, prefix: &str, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, l, d) = (s[0], s[1], s[2]);
    let h = config.heads;
    let dh = d / h;
    let y = norm(tape, params, &format!("{prefix}.norm"), x)?;
    let qkv = dense(tape, params, &format!("{prefix}.qkv"), y)?;
    let mut heads = Vec::with_capacity(3);
    for i in 0..3 {
        let part = tape.narrow(qkv, 2, i * d, d)?;
        let part = tape.reshape(part, &[b, l, h, dh])?;
        heads.push(tape.permute(part, &[0, 2, 1, 3])?);
    }
    let a = tape.softmax_attention(heads[0], heads[1], heads[2])?;
    let a = tape.permute(a, &[0, 2, 1, 3])?;
    let a = tape.reshape(a, &[b, l, d])?;
    let a = dense(tape, params, &format!("{prefix}.out"), a)?;
    let x = tape.add(x, a)?;

    let y = norm(tape, params, &format!("{prefix}.ff_norm"), x)?;
    let y = dense(tape, params, &format!("{prefix}.ff1"), y)?;
    let y = tape.gelu(y);
    let y = dense(tape, params, &format!("{prefix}.ff2"), y)?;
    tape.add(x, y)
}

/// The attention stack on tokens `[T, N, D]`: each block attends along
/// time within every track, then across tracks within every frame.
pub fn run_blocks<S: Real>(tape: &mut Tape<S>, params: &Params, config: &ModelConfig, tokens: Var) -> Result<Var> {
    let mut x = tokens;
    for blk in 0..config.blocks {
        let per_track = tape.permute(x, &[1, 0, 2])?;
        let per_track = attend(tape, params, config, &format!("tracker.blocks.{blk}.time"), per_track)?;
        x = tape.permute(per_track, &[1, 0, 2])?;
        x = attend(tape, params, config, &format!("tracker.blocks.{blk}.track"), x)?;
    }
    Ok(x)
}

/// Final norm and linear head: `base + head(tokens)` as `[T, N, 2]`.
pub fn predict_coordinates<S: Real>(tape: &mut Tape<S>, params: &Params, tokens: Var, base: Var) -> Result<Var> {
    let y = norm(tape, params, "tracker.final_norm", tokens)?;
    let disp = dense(tape, params, "tracker.head", y)?;
    tape.add(base, disp)
}
