//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 5 and 8 train the desk-scale model twice for 2000 steps each,
//! which takes the better part of an hour on one CPU core.

use std::io::Cursor;
use std::time::Instant;

use myotracker::cli::gradcheck_rows;
use myotracker::formats::{
    read_keypoints, read_sequence, read_weights, save_weights, load_weights_for, write_keypoints, write_sequence,
    write_weights, FormatError, Keypoints, PixelType,
};
use myotracker_core::model::track;
use myotracker_core::strain::{fws_curve, fws_from_tracks, trajectory_metrics, KeypointGraph};
use myotracker_core::synth::{dataset_params, generate_dataset, keypoints, SampleParams, SynthParams};
use myotracker_core::training::{evaluate, loss_terms, train, trajectory_loss, TrainConfig, TrainOutcome};
use myotracker_core::weights::count_parameters;
use myotracker_core::{Clip, ForwardStats, ModelConfig, Network, Tape, Tensor, TrajectorySet, WeightStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict { passed, detail: detail.into() }
}

fn report(id: &str, name: &str, started: Instant, v: &Verdict) {
    println!(
        "criterion {id:<3} {:<4} {name}: {} [{:.1} s]",
        if v.passed { "PASS" } else { "FAIL" },
        v.detail,
        started.elapsed().as_secs_f64()
    );
}

fn parameter_budget() -> Verdict {
    let n = count_parameters(&ModelConfig::default());
    verdict((285_000..=349_000).contains(&n), format!("{n} parameters in the default model, allowed 285000..=349000"))
}

fn gradient_integrity() -> Verdict {
    let rows = match gradcheck_rows(0, 5, 2) {
        Ok(r) => r,
        Err(e) => return verdict(false, e.to_string()),
    };
    let worst = rows.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed || r.instances < 5).map(|r| r.name.as_str()).collect();
    verdict(
        failed.is_empty() && worst.max_rel_error < 1e-4,
        format!(
            "{} checks x 5 instances, worst {} at {:.2e} (limit 1e-4){}",
            rows.len(),
            worst.name,
            worst.max_rel_error,
            if failed.is_empty() { String::new() } else { format!("; failing: {failed:?}") }
        ),
    )
}

/// Default-size features for T = 64, N = 88, shared by criteria 3 and 8b.
struct FullSize {
    net: Network,
    features: Tensor<f32>,
    queries: Vec<[f32; 2]>,
}

fn full_size() -> FullSize {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut net = Network::new(ModelConfig::default()).unwrap();
    // a non-zero head, so that refinement passes really move the points
    for name in ["tracker.head.weight", "tracker.head.bias"] {
        net.weights_mut().get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.01..0.01));
    }
    let video = Tensor::from_fn(vec![64, 256, 256], |_| rng.random_range(0.0..1.0f32));
    let queries: Vec<[f32; 2]> = (0..88).map(|_| [rng.random_range(40.0..215.0), rng.random_range(40.0..215.0)]).collect();
    let features = net.encode(&video, &mut ForwardStats::default()).unwrap();
    FullSize { net, features, queries }
}

fn pass_counts(fs: &FullSize) -> Verdict {
    let passes = |config: ModelConfig| -> usize {
        let net = fs.net.with_config(config).unwrap();
        let mut stats = ForwardStats::default();
        let out = net.track_encoded(&fs.features, &fs.queries, &mut stats).unwrap();
        assert_eq!((out.frames(), out.points()), (64, 88));
        stats.transformer_passes
    };
    let base = ModelConfig::default();
    let single = passes(base.clone());
    let refined = passes(ModelConfig { refinement_iters: 6, ..base.clone() });
    let windowed = passes(ModelConfig { window_length: 8, ..base });
    let schedule = (64usize - 8).div_ceil(4) + 1;
    verdict(
        (single, refined, windowed) == (1, 6, schedule),
        format!("T=64, N=88: {single} pass by default, {refined} with refinement x6, {windowed} with S=8 (schedule {schedule})"),
    )
}

fn random_store(config: &ModelConfig, seed: u64) -> WeightStore<f64> {
    let mut store = WeightStore::<f32>::init(config).unwrap().cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in store.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
    }
    store
}

fn run64(config: &ModelConfig, store: &WeightStore<f64>, video: &Tensor<f64>, queries: &[[f64; 2]]) -> Vec<f64> {
    let mut tape = Tape::<f64>::inference();
    let params = store.bind(&mut tape, false);
    let v = tape.constant(video.clone());
    let q = tape.constant(Tensor::new(vec![queries.len(), 2], queries.iter().flatten().copied().collect()).unwrap());
    let y = track(&mut tape, &params, config, v, q, &mut ForwardStats::default()).unwrap();
    tape.value(y).data().to_vec()
}

fn symmetry() -> Verdict {
    let (t, n, side) = (6, 5, 64);
    let per = side * side;
    let mut point_gap = 0.0f64;
    let mut frame_gap = 0.0f64;
    let mut broken = 0;
    let trials = 3;
    for seed in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let video = Tensor::from_fn(vec![t, side, side], |_| rng.random_range(0.0..1.0));
        let queries: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(2.0..61.0), rng.random_range(2.0..61.0)]).collect();
        let mut points: Vec<usize> = (0..n).collect();
        points.rotate_left(2);
        points.swap(0, 3);
        let mut frames: Vec<usize> = (1..t).collect();
        frames.reverse();
        frames.insert(0, 0);
        let shuffled = Tensor::new(
            vec![t, side, side],
            frames.iter().flat_map(|&f| video.data()[f * per..(f + 1) * per].iter().copied()).collect(),
        )
        .unwrap();
        let at = |out: &[f64], f: usize, p: usize| [out[(f * n + p) * 2], out[(f * n + p) * 2 + 1]];
        let gap = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).abs().max((a[1] - b[1]).abs());

        let plain = ModelConfig::desk();
        let store = random_store(&plain, seed);
        let base = run64(&plain, &store, &video, &queries);
        let permuted: Vec<[f64; 2]> = points.iter().map(|&i| queries[i]).collect();
        let by_point = run64(&plain, &store, &video, &permuted);
        let by_frame = run64(&plain, &store, &shuffled, &queries);
        for f in 0..t {
            for (j, &i) in points.iter().enumerate() {
                point_gap = point_gap.max(gap(at(&by_point, f, j), at(&base, f, i)));
            }
            for p in 0..n {
                frame_gap = frame_gap.max(gap(at(&by_frame, f, p), at(&base, frames[f], p)));
            }
        }

        let encoded = ModelConfig { positional_encoding: true, ..ModelConfig::desk() };
        let store = random_store(&encoded, seed);
        let base = run64(&encoded, &store, &video, &queries);
        let by_frame = run64(&encoded, &store, &shuffled, &queries);
        let worst = (0..t)
            .flat_map(|f| (0..n).map(move |p| (f, p)))
            .map(|(f, p)| gap(at(&by_frame, f, p), at(&base, frames[f], p)))
            .fold(0.0, f64::max);
        if worst > 1e-6 {
            broken += 1;
        }
    }
    // "exact" up to the reordering of sums at 64-bit
    let tol = 1e-10;
    verdict(
        point_gap < tol && frame_gap < tol && broken >= 1,
        format!(
            "point permutation gap {point_gap:.1e}, frame permutation gap {frame_gap:.1e} (limit {tol:.0e}); \
             encoding ON broke frame equivariance in {broken}/{trials} instances"
        ),
    )
}

fn static_baseline(clips: &[Clip]) -> f64 {
    clips
        .iter()
        .map(|c| trajectory_metrics(&c.tracks, &TrajectorySet::constant(&c.tracks.queries(), c.frames()), 1.0).unwrap().avg_px)
        .sum::<f64>()
        / clips.len() as f64
}

struct Trained {
    outcome: TrainOutcome,
    config: ModelConfig,
    minutes: f64,
}

fn train_desk(train_set: &[Clip], val_set: &[Clip], window_length: usize) -> Trained {
    let config = ModelConfig { window_length, ..ModelConfig::desk() };
    let tc = TrainConfig::desk();
    let t0 = Instant::now();
    let outcome = train(&config, &tc, train_set, val_set, |r| {
        if let Some(m) = r.val_metric {
            if r.step % 200 == 199 || r.step + 1 == tc.steps {
                eprintln!("  [S={window_length}] step {:>4}  loss {:.3}  val {:.3} px", r.step + 1, r.loss, m);
            }
        }
    })
    .unwrap();
    Trained { outcome, config, minutes: t0.elapsed().as_secs_f64() / 60.0 }
}

fn learning_signal(run: &Trained, val_set: &[Clip], baseline: f64) -> Verdict {
    let o = &run.outcome;
    let Some(best) = o.best_metric() else { return verdict(false, "no epoch finished") };
    let reduction = 1.0 - best / baseline;
    let kept = o.epoch_metrics.iter().all(|&m| best <= m);
    let saved = evaluate(&Network::from_weights(run.config.clone(), o.weights.clone()).unwrap(), val_set).unwrap();
    let lr_ok = o.log.iter().all(|r| r.lr == 1e-3 * 0.99995f64.powf(r.step as f64));
    verdict(
        reduction >= 0.30 && kept && saved == best && lr_ok && o.steps_run == 2000,
        format!(
            "static baseline {baseline:.3} px -> best {best:.3} px (epoch {} of {}), reduction {:.1}% (need 30%); \
             saved checkpoint re-evaluates to {saved:.3} px and is <= every epoch: {kept}; {} steps, batch 8, {:.1} min",
            o.best_epoch.unwrap() + 1,
            o.epoch_metrics.len(),
            100.0 * reduction,
            o.steps_run,
            run.minutes
        ),
    )
}

fn free_wall_base(p: &SampleParams) -> f64 {
    -std::f64::consts::FRAC_PI_2 - p.free_wall_span
}

/// Closed-form strain of the mid-wall polyline through the keypoints of the
/// free wall: every chord is `r(t) |A (e(θ'_k+1) - e(θ'_k))|` with
/// `A = diag(a_x, a_y)`, so the rigid shift drops out.
fn oracle_strain(p: &SampleParams) -> (Vec<f64>, usize) {
    let n = p.points_per_wall;
    let apex = -std::f64::consts::FRAC_PI_2;
    let step = (p.free_wall_span + p.septal_span) / (n - 1) as f64;
    let angles: Vec<f64> = (0..n).map(|k| free_wall_base(p) + step * k as f64).collect();
    let rho_mid = (p.rho_inner + p.rho_outer) / 2.0;
    let g = |t: usize| (1.0 - (std::f64::consts::TAU * t as f64 / (p.frames - 1) as f64).cos()) / 2.0;
    let pos = |rho: f64, th: f64, gt: f64| {
        let r = rho * (1.0 - p.contraction * gt);
        let th = apex + (th - apex) * (1.0 - p.shear * gt);
        [p.axes[0] * r * th.cos(), p.axes[1] * r * th.sin()]
    };
    let mids: Vec<[f64; 2]> = angles.iter().map(|&a| pos(rho_mid, a, 0.0)).collect();
    let d = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).hypot(a[1] - b[1]);
    let apex_index = (0..n).fold(0, |best, k| if d(mids[0], mids[k]) > d(mids[0], mids[best]) { k } else { best });
    let length = |gt: f64| -> f64 { (0..apex_index).map(|k| d(pos(rho_mid, angles[k], gt), pos(rho_mid, angles[k + 1], gt))).sum() };
    let l0 = length(0.0);
    ((0..p.frames).map(|t| (length(g(t)) - l0) / l0 * 100.0).collect(), apex_index)
}

fn strain_oracle() -> Verdict {
    let params = dataset_params(20, &SynthParams::default(), 7).unwrap();
    let mut worst = 0.0f64;
    let mut apex_ok = true;
    let mut radial_worst = 0.0f64;
    let mut invariance = 0.0f64;
    for p in &params {
        let data: Vec<f32> = (0..p.frames)
            .flat_map(|t| keypoints(p, t as f64 / (p.frames - 1) as f64))
            .flat_map(|[x, y]| [x as f32, y as f32])
            .collect();
        let tracks = TrajectorySet::new(p.frames, 2 * p.points_per_wall, data).unwrap();
        let curve = fws_from_tracks(&tracks).unwrap();
        let (expected, apex) = oracle_strain(p);
        apex_ok &= curve.apex == apex;
        for (a, b) in curve.values.iter().zip(&expected) {
            worst = worst.max((a - b).abs());
        }

        // pure radial contraction: every chord scales by 1 - a g(t)
        let radial = SampleParams { shear: 0.0, ..p.clone() };
        let frames: Vec<KeypointGraph> = (0..p.frames)
            .map(|t| {
                let k = keypoints(&radial, t as f64 / (p.frames - 1) as f64);
                KeypointGraph::new(k[..p.points_per_wall].to_vec(), k[p.points_per_wall..].to_vec()).unwrap()
            })
            .collect();
        let c = fws_curve(&frames).unwrap();
        for (t, v) in c.values.iter().enumerate() {
            let g = (1.0 - (std::f64::consts::TAU * t as f64 / (p.frames - 1) as f64).cos()) / 2.0;
            radial_worst = radial_worst.max((v + 100.0 * p.contraction * g).abs());
        }

        let (s, co) = (0.7f64).sin_cos();
        let moved: Vec<KeypointGraph> =
            frames.iter().map(|g| g.map(|[x, y]| [2.5 * (co * x - s * y) - 40.0, 2.5 * (s * x + co * y) + 13.0])).collect();
        let m = fws_curve(&moved).unwrap();
        for (a, b) in c.values.iter().zip(&m.values) {
            invariance = invariance.max((a - b).abs());
        }
        apex_ok &= m.apex == c.apex;
    }
    verdict(
        worst < 0.1 && radial_worst < 1e-9 && invariance < 1e-9 && apex_ok,
        format!(
            "20 samples: largest gap to the closed form {worst:.2e} pp (limit 0.1), pure radial {radial_worst:.1e} pp, \
             rotation+scale+shift changes strain by {invariance:.1e} pp, apex indices agree: {apex_ok}"
        ),
    )
}

fn metric_definitions() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (t, n) = (7, 9);
    let a = TrajectorySet::new(t, n, (0..t * n * 2).map(|_| rng.random_range(0.0..64.0)).collect()).unwrap();
    let b = TrajectorySet::new(t, n, (0..t * n * 2).map(|_| rng.random_range(0.0..64.0)).collect()).unwrap();
    let m = trajectory_metrics(&a, &b, 0.5).unwrap();
    let dist = |u: [f32; 2], v: [f32; 2]| ((u[0] as f64 - v[0] as f64).powi(2) + (u[1] as f64 - v[1] as f64).powi(2)).sqrt();
    let mut sum = 0.0;
    for f in 0..t {
        for p in 0..n {
            sum += dist(a.get(f, p), b.get(f, p));
        }
    }
    let avg = sum / (t * n) as f64;
    let end = (0..n).map(|p| dist(a.get(t - 1, p), b.get(t - 1, p))).sum::<f64>() / n as f64;
    let drift = (0..n).map(|p| dist(b.get(0, p), b.get(t - 1, p))).sum::<f64>() / n as f64;
    let loop_ok = (m.avg_px - avg).abs() < 1e-12 && (m.end_px - end).abs() < 1e-12 && (m.drift_px - drift).abs() < 1e-12;
    let mut shifted = a.clone();
    shifted.map_points(|[x, y]| [x + 3.0, y + 4.0]);
    let offset = trajectory_metrics(&a, &shifted, 1.0).unwrap();
    verdict(
        loop_ok && offset.avg_px == 5.0 && offset.end_px == 5.0,
        format!("per-point loop agrees: {loop_ok}; offset (3, 4) gives {} px average, {} px last frame", offset.avg_px, offset.end_px),
    )
}

fn window_direction(whole: &Trained, windowed: &Trained) -> Verdict {
    let (Some(a), Some(b)) = (whole.outcome.best_metric(), windowed.outcome.best_metric()) else {
        return verdict(false, "a run finished no epoch");
    };
    verdict(b >= a, format!("best validation error {a:.3} px whole-sequence vs {b:.3} px with S=8 ({:+.1}%)", 100.0 * (b / a - 1.0)))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn refinement_latency(fs: &FullSize) -> Verdict {
    let nets: Vec<Network> =
        (1..=6).map(|i| fs.net.with_config(ModelConfig { refinement_iters: i, ..ModelConfig::default() }).unwrap()).collect();
    let stage_once = |net: &Network| {
        let t0 = Instant::now();
        net.track_encoded(&fs.features, &fs.queries, &mut ForwardStats::default()).unwrap();
        t0.elapsed().as_secs_f64()
    };
    for net in &nets {
        stage_once(net);
    }
    // rounds visit every pass count in turn, so a slow stretch of the host
    // hits all of them alike; the minimum is the least disturbed run
    let mut runs = vec![Vec::new(); nets.len()];
    for _ in 0..7 {
        for (net, r) in nets.iter().zip(&mut runs) {
            r.push(stage_once(net));
        }
    }
    let stage: Vec<f64> = runs.iter().map(|r| r.iter().copied().fold(f64::INFINITY, f64::min)).collect();
    let medians: Vec<f64> = runs.iter().map(|r| median(r.clone())).collect();
    let monotone = stage.windows(2).all(|w| w[1] > w[0]);
    let ratio = stage[5] / stage[0];
    let whole_once = |net: &Network| {
        let t0 = Instant::now();
        let mut s = ForwardStats::default();
        let f = net.encode(&Tensor::zeros(vec![64, 256, 256]), &mut s).unwrap();
        net.track_encoded(&f, &fs.queries, &mut s).unwrap();
        t0.elapsed().as_secs_f64()
    };
    let whole_ratio = whole_once(&nets[5]) / whole_once(&nets[0]);
    let ms = |v: &[f64]| v.iter().map(|s| format!("{:.0}", s * 1e3)).collect::<Vec<_>>().join("/");
    verdict(
        (4.0..=8.0).contains(&ratio) && monotone,
        format!(
            "correlation+transformer stage {} ms (min of 7; medians {}) for 1..6 passes (monotone: {monotone}), \
             x6/x1 = {ratio:.2} (need 4..8); whole forward incl. encoder x6/x1 = {whole_ratio:.2}",
            ms(&stage),
            ms(&medians)
        ),
    )
}

fn loss_arithmetic() -> Verdict {
    let p = TrajectorySet::new(2, 1, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
    let q = TrajectorySet::new(2, 1, vec![0.0; 4]).unwrap();
    let (coord, flow) = loss_terms(&p, &q).unwrap();
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(p.to_tensor().cast());
    let b = tape.constant(q.to_tensor().cast());
    let l = trajectory_loss(&mut tape, b, a).unwrap();
    let total = tape.value(l).data()[0];
    verdict((coord, flow, total) == (0.25, 0.5, 0.75), format!("coordinate term {coord}, flow term {flow}, total {total}"))
}

fn format_round_trips() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut net = Network::new(ModelConfig::desk()).unwrap();
    for t in net.weights_mut().tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    let mut buf = Vec::new();
    write_weights(&mut buf, net.config(), net.weights()).unwrap();
    let (config, store) = read_weights(&mut Cursor::new(&buf)).unwrap();
    let bits = |s: &WeightStore| s.tensors().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect::<Vec<_>>();
    let weights_ok = config == *net.config() && bits(&store) == bits(net.weights());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.bin");
    save_weights(&path, net.config(), net.weights()).unwrap();
    let other = ModelConfig { kernel: 7, ..ModelConfig::desk() };
    let rejected = matches!(load_weights_for(&path, &other), Err(FormatError::Core(myotracker_core::Error::Fingerprint { .. })));

    let sample = &generate_dataset(1, &SynthParams::desk(), 4).unwrap()[0];
    let mut seq = Vec::new();
    write_sequence(&mut seq, &sample.clip.video, PixelType::F32).unwrap();
    let video_ok = read_sequence(&mut Cursor::new(&seq)).unwrap() == sample.clip.video;

    let csv = dir.path().join("k.csv");
    let kp = Keypoints::new(sample.clip.tracks.clone(), sample.clip.scale_mm_per_px as f64, Some(sample.params.seed)).unwrap();
    write_keypoints(&csv, &kp).unwrap();
    let csv_ok = read_keypoints(&csv).unwrap() == kp;
    verdict(
        weights_ok && rejected && video_ok && csv_ok,
        format!("weights bit-exact: {weights_ok}, mismatched config rejected: {rejected}, sequence: {video_ok}, keypoint CSV: {csv_ok}"),
    )
}

fn main() {
    let mut failures = 0;
    let mut record = |id: &str, name: &str, f: &mut dyn FnMut() -> Verdict| {
        let t0 = Instant::now();
        let v = f();
        report(id, name, t0, &v);
        if !v.passed {
            failures += 1;
        }
    };
    record("1", "parameter budget", &mut parameter_budget);
    record("2", "gradient integrity", &mut gradient_integrity);
    let fs = full_size();
    record("3", "single pass", &mut || pass_counts(&fs));
    record("4", "symmetry suite", &mut symmetry);
    record("6", "strain oracle", &mut strain_oracle);
    record("7", "metric definitions", &mut metric_definitions);
    record("8b", "refinement latency", &mut || refinement_latency(&fs));
    drop(fs);
    record("9", "loss arithmetic", &mut loss_arithmetic);
    record("10", "format round-trips", &mut format_round_trips);

    let samples = generate_dataset(80, &SynthParams::desk(), 0).unwrap();
    let clips: Vec<Clip> = samples.into_iter().map(|s| s.clip).collect();
    let (train_set, val_set) = clips.split_at(64);
    let baseline = static_baseline(val_set);
    eprintln!("training the whole-sequence and S=8 models (2000 steps each)");
    let whole = train_desk(train_set, val_set, 0);
    record("5", "learning signal", &mut || learning_signal(&whole, val_set, baseline));
    let windowed = train_desk(train_set, val_set, 8);
    record("8a", "sliding-window direction", &mut || window_direction(&whole, &windowed));

    if failures > 0 {
        println!("{failures} criterion check(s) failed");
        std::process::exit(1);
    }
}
