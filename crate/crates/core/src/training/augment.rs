use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Clip, Error, Result, Tensor};

/// Probabilities and ranges of the random transforms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub p_rotate: f64,
    pub p_zoom: f64,
    pub p_translate: f64,
    pub p_noise: f64,
    pub p_skip_frames: f64,
    pub p_reverse: f64,
    pub p_blur: f64,
    pub p_blackout: f64,
    pub max_rotation_deg: f64,
    pub zoom_range: (f64, f64),
    /// Largest shift as a fraction of the frame side.
    pub max_translation: f64,
    pub max_noise_sd: f64,
    pub max_blur_sigma: f64,
    /// Side range of blacked-out or replaced squares, as a fraction of the
    /// frame side.
    pub blackout_size: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_rotate: 0.5,
            p_zoom: 0.5,
            p_translate: 0.5,
            p_noise: 0.5,
            p_skip_frames: 0.5,
            p_reverse: 0.5,
            p_blur: 0.5,
            p_blackout: 0.5,
            max_rotation_deg: 15.0,
            zoom_range: (0.85, 1.15),
            max_translation: 0.08,
            max_noise_sd: 0.08,
            max_blur_sigma: 1.0,
            blackout_size: (0.1, 0.3),
        }
    }
}

impl AugmentConfig {
    /// Only the point shuffle.
    pub fn none() -> Self {
        Self {
            p_rotate: 0.0,
            p_zoom: 0.0,
            p_translate: 0.0,
            p_noise: 0.0,
            p_skip_frames: 0.0,
            p_reverse: 0.0,
            p_blur: 0.0,
            p_blackout: 0.0,
            ..Self::default()
        }
    }
}

/// Similarity transform about the frame center:
/// `p' = c + zoom * R(angle) * (p - c) + shift`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    pub angle_rad: f64,
    pub zoom: f64,
    pub shift: [f64; 2],
}

impl AffineParams {
    pub fn identity() -> Self {
        Self { angle_rad: 0.0, zoom: 1.0, shift: [0.0, 0.0] }
    }

    fn forward(&self, c: [f64; 2], p: [f64; 2]) -> [f64; 2] {
        let (s, co) = self.angle_rad.sin_cos();
        let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
        [
            c[0] + self.zoom * (co * dx - s * dy) + self.shift[0],
            c[1] + self.zoom * (s * dx + co * dy) + self.shift[1],
        ]
    }

    fn inverse(&self, c: [f64; 2], p: [f64; 2]) -> [f64; 2] {
        let (s, co) = self.angle_rad.sin_cos();
        let (dx, dy) = ((p[0] - c[0] - self.shift[0]) / self.zoom, (p[1] - c[1] - self.shift[1]) / self.zoom);
        [c[0] + co * dx + s * dy, c[1] - s * dx + co * dy]
    }
}

/// Bilinear lookup with zeros outside the frame.
fn sample_zero(frame: &[f32], h: usize, w: usize, x: f64, y: f64) -> f32 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = ((x - x0) as f32, (y - y0) as f32);
    let at = |xx: f64, yy: f64| {
        if xx < 0.0 || yy < 0.0 || xx >= w as f64 || yy >= h as f64 {
            0.0
        } else {
            frame[yy as usize * w + xx as usize]
        }
    };
    (1.0 - fx) * (1.0 - fy) * at(x0, y0)
        + fx * (1.0 - fy) * at(x0 + 1.0, y0)
        + (1.0 - fx) * fy * at(x0, y0 + 1.0)
        + fx * fy * at(x0 + 1.0, y0 + 1.0)
}

/// Warps every frame and moves every point by the same transform. Returns
/// `None` if a point would leave the frame.
pub fn affine(clip: &Clip, params: AffineParams) -> Option<Clip> {
    let (t, h, w) = (clip.frames(), clip.height(), clip.width());
    let c = [(w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0];
    let mut tracks = clip.tracks.clone();
    let mut inside = true;
    tracks.map_points(|[x, y]| {
        let [nx, ny] = params.forward(c, [x as f64, y as f64]);
        inside &= nx >= 0.0 && ny >= 0.0 && nx <= (w - 1) as f64 && ny <= (h - 1) as f64;
        [nx as f32, ny as f32]
    });
    if !inside {
        return None;
    }
    let mut data = Vec::with_capacity(clip.video.len());
    for f in 0..t {
        let frame = clip.frame(f);
        for y in 0..h {
            for x in 0..w {
                let [sx, sy] = params.inverse(c, [x as f64, y as f64]);
                data.push(sample_zero(frame, h, w, sx, sy));
            }
        }
    }
    Some(Clip { video: Tensor::new(vec![t, h, w], data).ok()?, tracks, ..clip.clone() })
}

pub fn gaussian_noise(clip: &Clip, sd: f64, rng: &mut impl Rng) -> Clip {
    let normal = Normal::new(0.0, sd.max(0.0)).unwrap_or_else(|_| Normal::new(0.0, 0.0).unwrap());
    let data = clip.video.data().iter().map(|&v| (v + normal.sample(rng) as f32).clamp(0.0, 1.0)).collect();
    Clip { video: Tensor::from_parts(clip.video.shape().to_vec(), data), ..clip.clone() }
}

/// `i`-th index of the endpoint-repeating reflection of `0..n`:
/// `0, 1, .., n-1, n-1, .., 0, 0, 1, ..`.
pub fn reflect_index(i: usize, n: usize) -> usize {
    let r = i % (2 * n);
    if r < n { r } else { 2 * n - 1 - r }
}

/// Keeps the even frames, then reflect-pads back to the original length.
pub fn skip_frames(clip: &Clip) -> Clip {
    let t = clip.frames();
    let kept: Vec<usize> = (0..t).step_by(2).collect();
    let order: Vec<usize> = (0..t).map(|i| kept[reflect_index(i, kept.len())]).collect();
    clip.select_frames(&order)
}

pub fn reverse_time(clip: &Clip) -> Clip {
    let order: Vec<usize> = (0..clip.frames()).rev().collect();
    clip.select_frames(&order)
}

/// Separable Gaussian blur of every frame, borders clamped.
pub fn blur(clip: &Clip, sigma: f64) -> Clip {
    if sigma <= 0.0 {
        return clip.clone();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp() as f32).collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
    let (t, h, w) = (clip.frames(), clip.height(), clip.width());
    let mut out = Vec::with_capacity(clip.video.len());
    let mut tmp = vec![0.0f32; h * w];
    for f in 0..t {
        let frame = clip.frame(f);
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * frame[y * w + (x as isize + k as isize - r).clamp(0, w as isize - 1) as usize])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                out.push(
                    kernel
                        .iter()
                        .enumerate()
                        .map(|(k, kv)| kv * tmp[(y as isize + k as isize - r).clamp(0, h as isize - 1) as usize * w + x])
                        .sum(),
                );
            }
        }
    }
    Clip { video: Tensor::from_parts(vec![t, h, w], out), ..clip.clone() }
}

/// Blacks out the square at `(x, y)` of side `side` in every frame, or, if
/// `source` is given, fills it with the square found there.
pub fn blackout(clip: &Clip, x: usize, y: usize, side: usize, source: Option<(usize, usize)>) -> Clip {
    let (t, h, w) = (clip.frames(), clip.height(), clip.width());
    let mut video = clip.video.clone();
    let data = video.data_mut();
    for f in 0..t {
        let base = f * h * w;
        for yy in y..(y + side).min(h) {
            for xx in x..(x + side).min(w) {
                data[base + yy * w + xx] = match source {
                    None => 0.0,
                    Some((sx, sy)) => {
                        let (px, py) = ((sx + xx - x).min(w - 1), (sy + yy - y).min(h - 1));
                        clip.video.data()[base + py * w + px]
                    }
                };
            }
        }
    }
    Clip { video, ..clip.clone() }
}

/// Random order of the tracks; `source` records where each came from.
pub fn shuffle_points(clip: &Clip, rng: &mut impl Rng) -> Clip {
    let mut order: Vec<usize> = (0..clip.tracks.points()).collect();
    order.shuffle(rng);
    clip.select_points(&order)
}

/// Each transform independently with its probability, then the point
/// shuffle.
pub fn augment(clip: &Clip, config: &AugmentConfig, rng: &mut impl Rng) -> Clip {
    let mut out = clip.clone();
    let side = out.height().min(out.width()) as f64;
    let mut params = AffineParams::identity();
    let mut geometric = false;
    if rng.random_bool(config.p_rotate) {
        let m = config.max_rotation_deg.to_radians();
        params.angle_rad = rng.random_range(-m..=m);
        geometric = true;
    }
    if rng.random_bool(config.p_zoom) {
        params.zoom = rng.random_range(config.zoom_range.0..=config.zoom_range.1);
        geometric = true;
    }
    if rng.random_bool(config.p_translate) {
        let m = config.max_translation * side;
        params.shift = [rng.random_range(-m..=m), rng.random_range(-m..=m)];
        geometric = true;
    }
    if geometric {
        // shrink toward the identity until every point stays in frame
        let mut p = params;
        for _ in 0..4 {
            if let Some(c) = affine(&out, p) {
                out = c;
                break;
            }
            p = AffineParams {
                angle_rad: p.angle_rad / 2.0,
                zoom: 1.0 + (p.zoom - 1.0) / 2.0,
                shift: [p.shift[0] / 2.0, p.shift[1] / 2.0],
            };
        }
    }
    if rng.random_bool(config.p_skip_frames) {
        out = skip_frames(&out);
    }
    if rng.random_bool(config.p_reverse) {
        out = reverse_time(&out);
    }
    if rng.random_bool(config.p_blur) {
        let s = rng.random_range(0.0..=config.max_blur_sigma);
        out = blur(&out, s);
    }
    if rng.random_bool(config.p_blackout) {
        let (lo, hi) = config.blackout_size;
        let s = ((rng.random_range(lo..=hi) * side) as usize).max(1);
        let (h, w) = (out.height(), out.width());
        let (x, y) = (rng.random_range(0..w.saturating_sub(s).max(1)), rng.random_range(0..h.saturating_sub(s).max(1)));
        let source = if rng.random_bool(0.5) {
            Some((rng.random_range(0..w.saturating_sub(s).max(1)), rng.random_range(0..h.saturating_sub(s).max(1))))
        } else {
            None
        };
        out = blackout(&out, x, y, s, source);
    }
    if rng.random_bool(config.p_noise) {
        let sd = rng.random_range(0.0..=config.max_noise_sd);
        out = gaussian_noise(&out, sd, rng);
    }
    shuffle_points(&out, rng)
}

/// Crops a random chunk of `frames` frames or reflect-pads to that length,
/// and duplicates random tracks up to `points` (or keeps a random subset of
/// `points` tracks).
pub fn fix_size(clip: &Clip, frames: usize, points: usize, rng: &mut impl Rng) -> Result<Clip> {
    let (t, n) = (clip.frames(), clip.tracks.points());
    if t < 2 || frames < 2 {
        return Err(Error::invalid(format!("cannot fit {t} frames to {frames}; both need at least 2")));
    }
    if n == 0 || points == 0 {
        return Err(Error::invalid(format!("cannot fit {n} points to {points}; both need at least 1")));
    }
    let order: Vec<usize> = if t >= frames {
        let start = rng.random_range(0..=t - frames);
        (start..start + frames).collect()
    } else {
        (0..frames).map(|i| reflect_index(i, t)).collect()
    };
    let mut out = clip.select_frames(&order);
    if n > points {
        let mut keep = rand::seq::index::sample(rng, n, points).into_vec();
        keep.sort_unstable();
        out = out.select_points(&keep);
    } else if n < points {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.extend((n..points).map(|_| rng.random_range(0..n)));
        out = out.select_points(&idx);
        for d in &mut out.duplicate[n..] {
            *d = true;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::TrajectorySet;

    fn ramp_clip(t: usize, n: usize) -> Clip {
        let video = Tensor::from_fn(vec![t, 8, 8], |i| (i / 64) as f32 / t as f32);
        let tracks = TrajectorySet::new(t, n, (0..t * n * 2).map(|i| (i / (2 * n)) as f32).collect()).unwrap();
        Clip::new(video, tracks, 0.5).unwrap()
    }

    #[test]
    fn reversal_is_an_involution() {
        let c = ramp_clip(5, 3);
        assert_eq!(reverse_time(&reverse_time(&c)), c);
        assert_eq!(reverse_time(&c).tracks.get(0, 0), [4.0, 4.0]);
    }

    #[test]
    fn skipping_traces_even_frames_and_reflects() {
        let c = ramp_clip(10, 2);
        let s = skip_frames(&c);
        assert_eq!(s.frames(), 10);
        let seen: Vec<f32> = (0..10).map(|t| s.tracks.get(t, 1)[0]).collect();
        assert_eq!(seen, vec![0.0, 2.0, 4.0, 6.0, 8.0, 8.0, 6.0, 4.0, 2.0, 0.0]);
        assert_eq!(s.frame(3)[0], 6.0 / 10.0);
    }

    #[test]
    fn fix_size_pads_crops_and_flags() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = ramp_clip(40, 44);
        let f = fix_size(&c, 64, 88, &mut rng).unwrap();
        assert_eq!((f.frames(), f.tracks.points()), (64, 88));
        let frames: Vec<f32> = (0..64).map(|t| f.tracks.get(t, 0)[0]).collect();
        let expected: Vec<f32> = (0..40).chain((16..40).rev()).map(|v| v as f32).collect();
        assert_eq!(frames, expected);
        assert_eq!(f.duplicate.iter().filter(|&&d| d).count(), 44);
        assert!(f.source[44..].iter().all(|&s| s < 44));

        let same = fix_size(&ramp_clip(64, 88), 64, 88, &mut rng).unwrap();
        assert_eq!(same, ramp_clip(64, 88));
        let long = fix_size(&ramp_clip(70, 3), 64, 88, &mut rng).unwrap();
        let start = long.tracks.get(0, 0)[0] as usize;
        assert!((0..64).all(|t| long.tracks.get(t, 0)[0] as usize == start + t));
        let fewer = fix_size(&ramp_clip(5, 3), 8, 2, &mut rng).unwrap();
        assert_eq!(fewer.tracks.points(), 2);
        assert!(fewer.duplicate.iter().all(|d| !d));
        assert!(fix_size(&ramp_clip(5, 3), 64, 0, &mut rng).is_err());
    }

    #[test]
    fn shuffle_records_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut c = ramp_clip(3, 6);
        c.tracks = TrajectorySet::new(3, 6, (0..36).map(|v| v as f32).collect()).unwrap();
        let s = shuffle_points(&c, &mut rng);
        for (i, &src) in s.source.iter().enumerate() {
            assert_eq!(s.tracks.get(2, i), c.tracks.get(2, src));
        }
    }
}
