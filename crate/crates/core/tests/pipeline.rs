use myotracker_core::synth::{dataset_params, generate_dataset, SynthParams};
use myotracker_core::training::{
    affine, evaluate, fix_size, reverse_time, shuffle_points, skip_frames, train, AffineParams, AugmentConfig, TrainConfig,
};
use myotracker_core::{Clip, ModelConfig, Network, Tensor, TrajectorySet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

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

fn small_synth() -> SynthParams {
    SynthParams { size: 32, frames: (38, 40), points_per_wall: (21, 22), max_step_px: 2.0, ..SynthParams::desk() }
}

fn clips(count: usize, seed: u64) -> Vec<Clip> {
    generate_dataset(count, &small_synth(), seed).unwrap().into_iter().map(|s| s.clip).collect()
}

#[test]
fn zero_steps_return_the_initialization() {
    let data = clips(2, 1);
    let tc = TrainConfig { steps: 0, clip_frames: 8, clip_points: 6, ..TrainConfig::default() };
    let out = train(&tiny(), &tc, &data[..1], &data[1..], |_| panic!("no records expected")).unwrap();
    assert!(out.log.is_empty());
    assert_eq!(out.best_epoch, None);
    assert_eq!(out.weights.tensors(), Network::new(tiny()).unwrap().weights().tensors());
}

#[test]
fn best_epoch_is_kept() {
    let data = clips(6, 2);
    let tc = TrainConfig { steps: 12, batch: 2, clip_frames: 8, clip_points: 6, ..TrainConfig::default() };
    let mut seen = 0;
    let out = train(&tiny(), &tc, &data[..4], &data[4..], |_| seen += 1).unwrap();
    assert_eq!(out.steps_run, 12);
    assert_eq!(out.log.len(), 12);
    assert_eq!(seen, 12 + out.epoch_metrics.len());
    assert_eq!(out.epoch_metrics.len(), 6);
    let best = out.best_metric().unwrap();
    assert!(out.epoch_metrics.iter().all(|&m| best <= m));
    let net = Network::from_weights(tiny(), out.weights.clone()).unwrap();
    assert_eq!(evaluate(&net, &data[4..]).unwrap(), best);
    for (i, r) in out.log.iter().enumerate() {
        assert_eq!(r.step, i);
        assert!(r.loss.is_finite() && r.loss >= 0.0);
        assert_eq!(r.val_metric.is_some(), (i + 1) % 2 == 0);
    }
}

#[test]
fn training_is_reproducible() {
    let data = clips(3, 3);
    let tc = TrainConfig { steps: 3, batch: 2, clip_frames: 8, clip_points: 6, ..TrainConfig::default() };
    let a = train(&tiny(), &tc, &data[..2], &data[2..], |_| {}).unwrap();
    let b = train(&tiny(), &tc, &data[..2], &data[2..], |_| {}).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.weights.tensors(), b.weights.tensors());
    let c = train(&tiny(), &TrainConfig { augment: AugmentConfig::none(), ..tc }, &data[..2], &data[2..], |_| {}).unwrap();
    assert_ne!(a.log, c.log);
}

/// A clip whose frames show a bright dot under every track position.
fn marker_clip(seed: u64) -> Clip {
    let (t, side, n) = (6, 48, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchors = [[14.0, 14.0], [33.0, 14.0], [14.0, 33.0], [33.0, 33.0]];
    let mut tracks = Vec::new();
    for f in 0..t {
        for a in anchors.iter().take(n) {
            tracks.extend([a[0] + f as f32 * 0.4 + rng.random_range(-0.5..0.5), a[1] - f as f32 * 0.3 + rng.random_range(-0.5..0.5)]);
        }
    }
    let tracks = TrajectorySet::new(t, n, tracks).unwrap();
    let video = Tensor::from_fn(vec![t, side, side], |i| {
        let (f, y, x) = (i / (side * side), (i / side) % side, i % side);
        (0..n)
            .map(|p| {
                let [px, py] = tracks.get(f, p);
                let d2 = (x as f32 - px).powi(2) + (y as f32 - py).powi(2);
                (-d2 / (2.0 * 1.3 * 1.3)).exp()
            })
            .sum::<f32>()
            .min(1.0)
    });
    Clip::new(video, tracks, 0.5).unwrap()
}

/// Largest distance between a track and the intensity centroid around it.
fn marker_offset(clip: &Clip) -> f64 {
    let (h, w) = (clip.height(), clip.width());
    let mut worst = 0.0f64;
    for f in 0..clip.frames() {
        let frame = clip.frame(f);
        for p in 0..clip.tracks.points() {
            let [px, py] = clip.tracks.get(f, p);
            let (cx, cy) = (px.round() as isize, py.round() as isize);
            let (mut sw, mut sx, mut sy) = (0.0f64, 0.0f64, 0.0f64);
            for y in (cy - 4).max(0)..=(cy + 4).min(h as isize - 1) {
                for x in (cx - 4).max(0)..=(cx + 4).min(w as isize - 1) {
                    let v = frame[y as usize * w + x as usize] as f64;
                    sw += v;
                    sx += v * x as f64;
                    sy += v * y as f64;
                }
            }
            worst = worst.max((sx / sw - px as f64).hypot(sy / sw - py as f64));
        }
    }
    worst
}

#[test]
fn geometric_augmentations_move_markers_and_tracks_together() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for seed in 0..4 {
        let clip = marker_clip(seed);
        assert!(marker_offset(&clip) < 0.2);
        let params = AffineParams {
            angle_rad: rng.random_range(-0.25..0.25),
            zoom: rng.random_range(0.9..1.1),
            shift: [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)],
        };
        let warped = affine(&clip, params).expect("markers stay in frame");
        assert!(marker_offset(&warped) < 0.3, "{params:?}: {}", marker_offset(&warped));
        assert!(marker_offset(&skip_frames(&clip)) < 0.2);
        assert!(marker_offset(&reverse_time(&clip)) < 0.2);
        assert!(marker_offset(&shuffle_points(&clip, &mut rng)) < 0.2);
        let fixed = fix_size(&clip, 9, 7, &mut rng).unwrap();
        assert_eq!((fixed.frames(), fixed.tracks.points()), (9, 7));
        assert!(marker_offset(&fixed) < 0.2);
    }
    let clip = marker_clip(0);
    let far = AffineParams { angle_rad: 0.0, zoom: 1.0, shift: [40.0, 0.0] };
    assert!(affine(&clip, far).is_none());
}

#[test]
fn default_ranges_hold_over_eighty_samples() {
    let params = dataset_params(80, &SynthParams::default(), 0).unwrap();
    assert_eq!(params.len(), 80);
    for p in &params {
        assert!((38..=128).contains(&p.frames), "{} frames", p.frames);
        assert!((21..=44).contains(&p.points_per_wall), "{} points", p.points_per_wall);
        assert_eq!(p.size, 256);
    }
    let frames: Vec<usize> = params.iter().map(|p| p.frames).collect();
    assert!(frames.iter().max().unwrap() - frames.iter().min().unwrap() > 40, "frame counts should spread: {frames:?}");
}

#[test]
fn datasets_are_seeded() {
    let one = generate_dataset(1, &small_synth(), 5).unwrap();
    assert_eq!(one.len(), 1);
    assert!(dataset_params(0, &small_synth(), 5).is_err());
    let (a, b) = (dataset_params(4, &small_synth(), 5).unwrap(), dataset_params(4, &small_synth(), 6).unwrap());
    for (x, y) in a.iter().zip(&b) {
        assert_ne!((x.center, x.axes), (y.center, y.axes));
    }
    for i in 0..a.len() {
        for j in 0..i {
            assert_ne!(a[i].axes, a[j].axes);
        }
    }
    assert_eq!(a, dataset_params(4, &small_synth(), 5).unwrap());
}

#[test]
fn trajectories_stay_in_frame_and_close_the_cycle() {
    for s in generate_dataset(4, &small_synth(), 11).unwrap() {
        let c = &s.clip;
        let hi = (c.width() - 1) as f32;
        assert!(c.tracks.data().iter().all(|&v| (0.0..=hi).contains(&v)));
        assert!(c.video.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let (first, last) = (c.tracks.frame(0), c.tracks.frame(c.frames() - 1));
        for (a, b) in first.iter().zip(&last) {
            assert!((a[0] - b[0]).hypot(a[1] - b[1]) < 0.5);
        }
        assert_eq!(c.tracks.points(), 2 * s.points_per_wall());
    }
}
