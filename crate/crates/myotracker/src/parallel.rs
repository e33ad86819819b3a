//! Inference with the per-frame encoder spread over threads.

use myotracker_core::{ForwardStats, Network, Result, Tensor, TrajectorySet};

/// Same result as [`Network::forward`], with frames encoded on up to
/// `threads` scoped threads before the shared tracking stage.
pub fn forward_parallel(net: &Network, video: &Tensor<f32>, queries: &[[f32; 2]], threads: usize) -> Result<TrajectorySet> {
    if video.rank() != 3 || threads <= 1 {
        return net.forward(video, queries);
    }
    let (t, h, w) = (video.shape()[0], video.shape()[1], video.shape()[2]);
    let per = t.div_ceil(threads.min(t.max(1)));
    let frame = h * w;
    let parts: Vec<Result<Tensor<f32>>> = std::thread::scope(|s| {
        let handles: Vec<_> = video
            .data()
            .chunks(per * frame)
            .map(|chunk| {
                s.spawn(move || {
                    let sub = Tensor::new(vec![chunk.len() / frame, h, w], chunk.to_vec())?;
                    net.encode(&sub, &mut ForwardStats::default())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("encoder thread panicked")).collect()
    });
    let mut shape = Vec::new();
    let mut data = Vec::new();
    for p in parts {
        let p = p?;
        shape = p.shape().to_vec();
        data.extend_from_slice(p.data());
    }
    shape[0] = t;
    let features = Tensor::new(shape, data)?;
    net.track_encoded(&features, queries, &mut ForwardStats::default())
}
