//! The full tracker: encoder, pyramid correlation and attention stack.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::correlation::{build_pyramid, correlate};
use crate::encoder::{encode_frames, extract_track_features};
use crate::transformer::{assemble_input, predict_coordinates, record_coord_embedding, record_positional_encoding, run_blocks};
use crate::weights::Params;
use crate::{Error, ModelConfig, Real, Result, Tape, Tensor, TrajectorySet, Var, WeightStore};

/// Work done by one forward call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardStats {
    pub encoder_passes: usize,
    pub correlation_passes: usize,
    pub transformer_passes: usize,
    /// Largest number of bytes held by recorded values at any time.
    pub peak_bytes: usize,
}

/// Window start frames for length `s`: stride `s/2`, the last window
/// clamped to end at frame `frames`.
pub fn window_offsets(frames: usize, s: usize) -> Result<Vec<usize>> {
    if s < 2 || !s.is_multiple_of(2) {
        return Err(Error::invalid(format!("window length {s} must be an even number >= 2")));
    }
    if frames < s {
        return Err(Error::invalid(format!(
            "sequence of {frames} frames is shorter than the window length {s}; use whole-sequence mode (window_length 0)"
        )));
    }
    let half = s / 2;
    let count = (frames - s).div_ceil(half) + 1;
    let mut offsets: Vec<usize> = (0..count).map(|i| i * half).collect();
    *offsets.last_mut().unwrap() = frames - s;
    Ok(offsets)
}

fn check_inputs(frames: usize, points: usize) -> Result<()> {
    if frames < 2 {
        return Err(Error::invalid(format!("sequence has {frames} frame(s); at least 2 are required")));
    }
    if points == 0 {
        return Err(Error::invalid("empty query set; at least one query point is required"));
    }
    Ok(())
}

/// Records the whole network: video `[T, H, W]` and frame-0 queries
/// `[N, 2]` in pixels to predicted trajectories `[T, N, 2]`.
pub fn track<S: Real>(
    tape: &mut Tape<S>,
    params: &Params,
    config: &ModelConfig,
    video: Var,
    queries: Var,
    stats: &mut ForwardStats,
) -> Result<Var> {
    let frames = tape.shape(video).first().copied().unwrap_or(0);
    check_inputs(frames, tape.shape(queries).first().copied().unwrap_or(0))?;
    let features = encode_frames(tape, params, config, video)?;
    stats.encoder_passes += 1;
    track_features(tape, params, config, features, queries, stats)
}

/// Everything after the encoder, on features `[T, C, h, w]`.
pub fn track_features<S: Real>(
    tape: &mut Tape<S>,
    params: &Params,
    config: &ModelConfig,
    features: Var,
    queries: Var,
    stats: &mut ForwardStats,
) -> Result<Var> {
    let fs = tape.shape(features).to_vec();
    let qs = tape.shape(queries).to_vec();
    if fs.len() != 4 || qs.len() != 2 || qs[1] != 2 {
        return Err(Error::shape("track", format!("features {fs:?} / queries {qs:?}")));
    }
    let frames = fs[0];
    check_inputs(frames, qs[0])?;
    let out = if config.window_length == 0 {
        track_window(tape, params, config, features, queries, stats)?
    } else {
        let s = config.window_length;
        let offsets = window_offsets(frames, s)?;
        let mut q = queries;
        let mut pieces = Vec::with_capacity(offsets.len());
        for (i, &o) in offsets.iter().enumerate() {
            let window = tape.narrow(features, 0, o, s)?;
            let pred = track_window(tape, params, config, window, q, stats)?;
            // a window owns its frames up to where the next one starts
            let end = offsets.get(i + 1).map_or(s, |&next| next - o);
            pieces.push(tape.narrow(pred, 0, 0, end)?);
            if let Some(&next) = offsets.get(i + 1) {
                let at = tape.narrow(pred, 0, next - o, 1)?;
                q = tape.reshape(at, &[qs[0], 2])?;
            }
        }
        tape.concat(&pieces, 0)?
    };
    stats.peak_bytes = stats.peak_bytes.max(tape.peak_value_bytes());
    Ok(out)
}

fn track_window<S: Real>(
    tape: &mut Tape<S>,
    params: &Params,
    config: &ModelConfig,
    features: Var,
    queries: Var,
    stats: &mut ForwardStats,
) -> Result<Var> {
    let fs = tape.shape(features).to_vec();
    let (frames, n) = (fs[0], tape.shape(queries)[0]);
    let pyramid = build_pyramid(tape, features, config.pyramid_levels)?;
    let first = tape.narrow(features, 0, 0, 1)?;
    let first = tape.reshape(first, &fs[1..])?;
    let q = extract_track_features(tape, config, first, queries)?;
    let embed = record_coord_embedding(tape, queries, config.coord_embed_width, config.input_size)?;
    let pe = if config.positional_encoding {
        Some(record_positional_encoding(tape, frames, queries, config.d_model, config.input_size)?)
    } else {
        None
    };
    let base = tape.reshape(queries, &[1, n, 2])?;
    let mut coords = tape.expand(base, &[frames, n, 2])?;
    let mark = tape.len();
    for _ in 0..config.passes() {
        let corr = correlate(tape, config, q, &pyramid, coords)?;
        stats.correlation_passes += 1;
        let mut tokens = assemble_input(tape, params, q, corr, embed)?;
        if let Some(pe) = pe {
            tokens = tape.add(tokens, pe)?;
        }
        let tokens = run_blocks(tape, params, config, tokens)?;
        stats.transformer_passes += 1;
        coords = predict_coordinates(tape, params, tokens, coords)?;
        if !tape.grad_enabled() {
            // without gradients only the new estimate outlives the pass
            let value = tape.value(coords).clone();
            tape.truncate(mark)?;
            coords = tape.constant(value);
        }
    }
    Ok(coords)
}

fn queries_tensor<S: Real>(queries: &[[f32; 2]]) -> Tensor<S> {
    Tensor::from_parts(vec![queries.len(), 2], queries.iter().flatten().map(|&v| S::from_f64(v as f64)).collect())
}

/// A configured network with 32-bit weights, for inference.
#[derive(Clone, Debug)]
pub struct Network {
    config: ModelConfig,
    weights: WeightStore,
}

impl Network {
    /// Freshly initialized from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let weights = WeightStore::init(&config)?;
        Ok(Self { config, weights })
    }

    pub fn from_weights(config: ModelConfig, weights: WeightStore) -> Result<Self> {
        config.validate()?;
        weights.check(&config)?;
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &WeightStore {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut WeightStore {
        &mut self.weights
    }

    /// Same weights under a different inference schedule (refinement,
    /// windowing); fails if the weight layout would change.
    pub fn with_config(&self, config: ModelConfig) -> Result<Self> {
        Self::from_weights(config, self.weights.clone())
    }

    pub fn forward(&self, video: &Tensor<f32>, queries: &[[f32; 2]]) -> Result<TrajectorySet> {
        self.forward_with_stats(video, queries).map(|(t, _)| t)
    }

    pub fn forward_with_stats(&self, video: &Tensor<f32>, queries: &[[f32; 2]]) -> Result<(TrajectorySet, ForwardStats)> {
        if video.rank() != 3 {
            return Err(Error::shape("forward", format!("video must be [T, H, W], got {:?}", video.shape())));
        }
        check_inputs(video.shape()[0], queries.len())?;
        let mut stats = ForwardStats::default();
        let features = self.encode(video, &mut stats)?;
        let out = self.track_encoded(&features, queries, &mut stats)?;
        Ok((out, stats))
    }

    /// Encoder output `[T, C, h, w]`, computed one frame at a time so the
    /// intermediate activations of only one frame are alive.
    pub fn encode(&self, video: &Tensor<f32>, stats: &mut ForwardStats) -> Result<Tensor<f32>> {
        let (t, h, w) = match *video.shape() {
            [t, h, w] => (t, h, w),
            _ => return Err(Error::shape("encode", format!("video must be [T, H, W], got {:?}", video.shape()))),
        };
        let mut data = Vec::new();
        let mut shape = Vec::new();
        for f in 0..t {
            let mut tape = Tape::inference();
            let params = self.weights.bind(&mut tape, false);
            let frame = Tensor::from_parts(vec![1, h, w], video.data()[f * h * w..(f + 1) * h * w].to_vec());
            let v = tape.constant(frame);
            let y = encode_frames(&mut tape, &params, &self.config, v)?;
            shape = tape.shape(y)[1..].to_vec();
            data.extend_from_slice(tape.data(y));
            stats.peak_bytes = stats.peak_bytes.max(tape.peak_value_bytes() + data.len() * 4);
        }
        stats.encoder_passes += 1;
        let mut full = vec![t];
        full.extend(shape);
        Tensor::new(full, data)
    }

    /// Correlation and transformer stages on precomputed features.
    pub fn track_encoded(&self, features: &Tensor<f32>, queries: &[[f32; 2]], stats: &mut ForwardStats) -> Result<TrajectorySet> {
        let mut tape = Tape::inference();
        let params = self.weights.bind(&mut tape, false);
        let f = tape.constant(features.clone());
        let q = tape.constant(queries_tensor(queries));
        let y = track_features(&mut tape, &params, &self.config, f, q, stats)?;
        TrajectorySet::from_tensor(tape.value(y))
    }
}

#[cfg(test)]
mod tests {
    use alloc::string::ToString;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            input_size: 32,
            encoder_widths: vec![4, 4, 4, 4],
            pyramid_levels: 2,
            kernel: 3,
            d_model: 8,
            blocks: 1,
            heads: 2,
            ff_width: 8,
            coord_embed_width: 8,
            ..ModelConfig::default()
        }
    }

    fn randomize(net: &mut Network, seed: u64, scale: f32) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in net.weights_mut().tensors_mut() {
            for v in t.data_mut() {
                *v = rng.random_range(-scale..scale);
            }
        }
    }

    fn video(frames: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(vec![frames, 32, 32], |_| rng.random_range(0.0..1.0))
    }

    const QUERIES: [[f32; 2]; 3] = [[10.0, 12.5], [20.0, 7.0], [3.5, 28.0]];

    #[test]
    fn window_schedule() {
        assert_eq!(window_offsets(12, 8).unwrap(), vec![0, 4]);
        assert_eq!(window_offsets(8, 8).unwrap(), vec![0]);
        assert_eq!(window_offsets(13, 8).unwrap(), vec![0, 4, 5]);
        assert_eq!(window_offsets(64, 8).unwrap().len(), 15);
        assert!(window_offsets(7, 8).unwrap_err().to_string().contains("whole-sequence"));
    }

    #[test]
    fn untrained_model_is_static_and_counts_one_pass() {
        let net = Network::new(tiny()).unwrap();
        let (out, stats) = net.forward_with_stats(&video(5, 1), &QUERIES).unwrap();
        assert_eq!(out, TrajectorySet::constant(&QUERIES, 5));
        assert_eq!((stats.encoder_passes, stats.correlation_passes, stats.transformer_passes), (1, 1, 1));
    }

    #[test]
    fn input_errors() {
        let net = Network::new(tiny()).unwrap();
        assert!(net.forward(&video(1, 1), &QUERIES).unwrap_err().to_string().contains("at least 2"));
        assert!(net.forward(&video(3, 1), &[]).unwrap_err().to_string().contains("empty query"));
    }

    #[test]
    fn duplicated_queries_give_identical_tracks() {
        let mut net = Network::new(tiny()).unwrap();
        randomize(&mut net, 2, 0.3);
        let q = [QUERIES[0], QUERIES[1], QUERIES[0]];
        let out = net.forward(&video(4, 3), &q).unwrap();
        for t in 0..4 {
            assert_eq!(out.get(t, 0), out.get(t, 2));
        }
        assert_ne!(out.get(3, 0), QUERIES[0]);
    }

    #[test]
    fn refinement_and_windows_reduce_to_single_pass() {
        let mut net = Network::new(tiny()).unwrap();
        let v = video(8, 4);
        for m in [1, 3] {
            let refined = net.with_config(ModelConfig { refinement_iters: m, ..tiny() }).unwrap();
            let (out, stats) = refined.forward_with_stats(&v, &QUERIES).unwrap();
            assert_eq!(out, net.forward(&v, &QUERIES).unwrap());
            assert_eq!(stats.transformer_passes, m);
        }
        let windowed = net.with_config(ModelConfig { window_length: 4, ..tiny() }).unwrap();
        let (out, stats) = windowed.forward_with_stats(&v, &QUERIES).unwrap();
        assert_eq!(out, TrajectorySet::constant(&QUERIES, 8));
        assert_eq!(stats.transformer_passes, 3);

        randomize(&mut net, 5, 0.3);
        let one = net.with_config(ModelConfig { refinement_iters: 1, ..tiny() }).unwrap();
        assert_eq!(one.forward(&v, &QUERIES).unwrap(), net.forward(&v, &QUERIES).unwrap());
        let whole = net.forward(&v, &QUERIES).unwrap();
        let single = net.with_config(ModelConfig { window_length: 8, ..tiny() }).unwrap();
        assert_eq!(single.forward(&v, &QUERIES).unwrap(), whole);
    }

    #[test]
    fn later_window_owns_the_overlap() {
        let mut net = Network::new(tiny()).unwrap();
        randomize(&mut net, 6, 0.3);
        let v = video(12, 7);
        let windowed = net.with_config(ModelConfig { window_length: 8, ..tiny() }).unwrap();
        let out = windowed.forward(&v, &QUERIES).unwrap();

        let first = Tensor::from_parts(vec![8, 32, 32], v.data()[..8 * 1024].to_vec());
        let a = net.forward(&first, &QUERIES).unwrap();
        let q2 = a.frame(4);
        let second = Tensor::from_parts(vec![8, 32, 32], v.data()[4 * 1024..].to_vec());
        let b = net.forward(&second, &q2).unwrap();
        for t in 0..12 {
            let expected = if t < 4 { a.frame(t) } else { b.frame(t - 4) };
            assert_eq!(out.frame(t), expected, "frame {t}");
        }
    }

    #[test]
    fn inference_memory_does_not_grow_with_passes() {
        let mut net = Network::new(tiny()).unwrap();
        randomize(&mut net, 9, 0.3);
        let v = video(8, 10);
        let features = net.encode(&v, &mut ForwardStats::default()).unwrap();
        for (refine, window) in [(3, 0), (2, 4)] {
            let config = ModelConfig { refinement_iters: refine, window_length: window, ..tiny() };
            let net = net.with_config(config.clone()).unwrap();
            let got = net.track_encoded(&features, &QUERIES, &mut ForwardStats::default()).unwrap();

            let mut tape = Tape::<f32>::new();
            let params = net.weights().bind(&mut tape, true);
            let f = tape.constant(features.clone());
            let q = tape.constant(queries_tensor(&QUERIES));
            let y = track_features(&mut tape, &params, &config, f, q, &mut ForwardStats::default()).unwrap();
            assert_eq!(got, TrajectorySet::from_tensor(tape.value(y)).unwrap(), "refine {refine}, window {window}");
        }
        let peak = |refine| {
            let net = net.with_config(ModelConfig { refinement_iters: refine, ..tiny() }).unwrap();
            let mut stats = ForwardStats::default();
            net.track_encoded(&features, &QUERIES, &mut stats).unwrap();
            stats.peak_bytes
        };
        assert_eq!(peak(2), peak(5));
        assert!(peak(1) <= peak(2));
    }

    #[test]
    fn positional_encoding_adds_no_parameters() {
        let pe = ModelConfig { positional_encoding: true, ..tiny() };
        assert_eq!(crate::weights::count_parameters(&pe), crate::weights::count_parameters(&tiny()));
    }
}
