//! Synthetic echo-like sequences with exact keypoint trajectories.
//!
//! A crescent-shaped wall is laid out on an elliptical polar grid
//! `p = c + (a_x ρ cos θ, a_y ρ sin θ)` (y down, apex at θ = -π/2). Over one
//! cycle the grid contracts radially and compresses angularly toward the
//! apex with the envelope `g(φ) = (1 - cos 2πφ) / 2`. A fixed speckle
//! texture is backward-warped through the motion, so the ground truth is
//! the analytic forward map of the keypoints.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::{FRAC_PI_2, PI, TAU};

#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Clip, Error, Result, Tensor, TrajectorySet};

/// Ranges the generator draws sample parameters from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    /// Frame side in pixels.
    pub size: usize,
    pub frames: (usize, usize),
    pub points_per_wall: (usize, usize),
    /// Outer-boundary semi-axes as fractions of the frame side.
    pub axis_x: (f64, f64),
    pub axis_y: (f64, f64),
    /// Wall thickness as a fraction of the outer radius.
    pub thickness: (f64, f64),
    /// Angle from the apex to the free-wall and septal bases, in radians.
    pub free_wall_span: (f64, f64),
    pub septal_span: (f64, f64),
    /// Peak radial contraction (fraction of the radius).
    pub contraction: (f64, f64),
    /// Peak angular compression toward the apex.
    pub shear: (f64, f64),
    /// Peak rigid shift as a fraction of the frame side.
    pub translation: (f64, f64),
    /// Speckle grain, in pixels.
    pub speckle_sigma: (f64, f64),
    /// Reject samples whose keypoints move more than this between frames.
    pub max_step_px: f64,
    pub dropout_fraction: f64,
    pub burst_fraction: f64,
    /// Pixel spacing range for a 256-pixel frame; scaled for other sizes.
    pub mm_per_px_256: (f64, f64),
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            size: 256,
            frames: (38, 128),
            points_per_wall: (21, 44),
            axis_x: (0.26, 0.34),
            axis_y: (0.30, 0.38),
            thickness: (0.15, 0.25),
            free_wall_span: (0.62 * PI, 0.78 * PI),
            septal_span: (0.50 * PI, 0.65 * PI),
            contraction: (0.10, 0.22),
            shear: (0.0, 0.12),
            translation: (0.0, 0.03),
            speckle_sigma: (0.8, 1.4),
            max_step_px: 3.0,
            dropout_fraction: 0.25,
            burst_fraction: 0.25,
            mm_per_px_256: (0.40, 0.65),
        }
    }
}

impl SynthParams {
    /// Small frames and short clips for CPU training runs.
    pub fn desk() -> Self {
        Self { size: 64, frames: (38, 48), points_per_wall: (21, 24), speckle_sigma: (0.6, 0.9), ..Self::default() }
    }
}

/// A dark sector fanning out from the top center of the frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dropout {
    /// Sector direction, radians from straight down.
    pub angle: f64,
    pub width: f64,
    /// Intensity multiplier inside the sector.
    pub gain: f64,
}

/// Frames `start..start + len` get extra Gaussian noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseBurst {
    pub start: usize,
    pub len: usize,
    pub sd: f64,
}

/// Every parameter of one generated sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleParams {
    pub seed: u64,
    pub size: usize,
    pub frames: usize,
    pub points_per_wall: usize,
    pub center: [f64; 2],
    pub axes: [f64; 2],
    pub rho_inner: f64,
    pub rho_outer: f64,
    pub free_wall_span: f64,
    pub septal_span: f64,
    pub contraction: f64,
    pub shear: f64,
    pub translation: [f64; 2],
    pub speckle_sigma: f64,
    pub dropout: Option<Dropout>,
    pub burst: Option<NoiseBurst>,
    pub mm_per_px: f64,
    pub max_step_px: f64,
}

pub const APEX_ANGLE: f64 = -FRAC_PI_2;

fn wrap(a: f64) -> f64 {
    let r = a - TAU * ((a + PI) / TAU).floor();
    if r == -PI { PI } else { r }
}

/// Cycle envelope: 0 at both ends, 1 at mid-cycle.
pub fn envelope(phase: f64) -> f64 {
    (1.0 - (TAU * phase).cos()) / 2.0
}

/// The analytic deformation of one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionModel {
    pub center: [f64; 2],
    pub axes: [f64; 2],
    pub contraction: f64,
    pub shear: f64,
    pub translation: [f64; 2],
}

impl MotionModel {
    pub fn from_params(p: &SampleParams) -> Self {
        Self { center: p.center, axes: p.axes, contraction: p.contraction, shear: p.shear, translation: p.translation }
    }

    /// Pixel position of the material point at polar `(ρ, θ)`.
    pub fn position(&self, rho: f64, theta: f64, phase: f64) -> [f64; 2] {
        let g = envelope(phase);
        let r = rho * (1.0 - self.contraction * g);
        let th = APEX_ANGLE + wrap(theta - APEX_ANGLE) * (1.0 - self.shear * g);
        [
            self.center[0] + self.translation[0] * g + self.axes[0] * r * th.cos(),
            self.center[1] + self.translation[1] * g + self.axes[1] * r * th.sin(),
        ]
    }

    /// Polar material coordinates of the point seen at pixel `p`.
    pub fn material(&self, p: [f64; 2], phase: f64) -> (f64, f64) {
        let g = envelope(phase);
        let u = (p[0] - self.center[0] - self.translation[0] * g) / self.axes[0];
        let v = (p[1] - self.center[1] - self.translation[1] * g) / self.axes[1];
        let rho = u.hypot(v) / (1.0 - self.contraction * g);
        let theta = APEX_ANGLE + wrap(v.atan2(u) - APEX_ANGLE) / (1.0 - self.shear * g);
        (rho, theta)
    }

    /// Reference-frame pixel of the material point seen at `p`.
    pub fn inverse(&self, p: [f64; 2], phase: f64) -> [f64; 2] {
        let (rho, theta) = self.material(p, phase);
        self.position(rho, theta, 0.0)
    }
}

/// Polar angles of the keypoints, free-wall base first.
pub fn keypoint_angles(p: &SampleParams) -> Vec<f64> {
    let n = p.points_per_wall;
    let start = APEX_ANGLE - p.free_wall_span;
    let step = (p.free_wall_span + p.septal_span) / (n - 1) as f64;
    (0..n).map(|i| start + step * i as f64).collect()
}

/// Exact keypoint positions at `phase`: inner wall then outer wall.
pub fn keypoints(p: &SampleParams, phase: f64) -> Vec<[f64; 2]> {
    let m = MotionModel::from_params(p);
    let angles = keypoint_angles(p);
    let inner = angles.iter().map(|&a| m.position(p.rho_inner, a, phase));
    let outer = angles.iter().map(|&a| m.position(p.rho_outer, a, phase));
    inner.chain(outer).collect()
}

fn phase_of(t: usize, frames: usize) -> f64 {
    t as f64 / (frames - 1) as f64
}

/// Draws one parameter set from `ranges`; `seed` fixes every draw.
pub fn draw_params(ranges: &SynthParams, seed: u64) -> SampleParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = ranges.size as f64;
    let u = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let frames = rng.random_range(ranges.frames.0..=ranges.frames.1);
    let points_per_wall = rng.random_range(ranges.points_per_wall.0..=ranges.points_per_wall.1);
    let axes = [u(&mut rng, ranges.axis_x) * size, u(&mut rng, ranges.axis_y) * size];
    let center = [size / 2.0 + u(&mut rng, (-0.04, 0.04)) * size, size / 2.0 + u(&mut rng, (0.0, 0.06)) * size];
    let thickness = u(&mut rng, ranges.thickness);
    let shift = u(&mut rng, ranges.translation) * size;
    let shift_dir = rng.random_range(0.0..TAU);
    let dropout = rng.random_bool(ranges.dropout_fraction).then(|| Dropout {
        angle: rng.random_range(-0.6..0.6),
        width: rng.random_range(0.15..0.35),
        gain: rng.random_range(0.1..0.4),
    });
    let burst = rng.random_bool(ranges.burst_fraction).then(|| {
        let len = rng.random_range(2..=6).min(frames);
        NoiseBurst { start: rng.random_range(0..=frames - len), len, sd: rng.random_range(0.08..0.2) }
    });
    SampleParams {
        seed,
        size: ranges.size,
        frames,
        points_per_wall,
        center,
        axes,
        rho_inner: 1.0 - thickness,
        rho_outer: 1.0,
        free_wall_span: u(&mut rng, ranges.free_wall_span),
        septal_span: u(&mut rng, ranges.septal_span),
        contraction: u(&mut rng, ranges.contraction),
        shear: u(&mut rng, ranges.shear),
        translation: [shift * shift_dir.cos(), shift * shift_dir.sin()],
        speckle_sigma: u(&mut rng, ranges.speckle_sigma),
        dropout,
        burst,
        mm_per_px: u(&mut rng, ranges.mm_per_px_256) * 256.0 / size,
        max_step_px: ranges.max_step_px,
    }
}

/// Checks geometry and motion limits of `p`.
pub fn validate(p: &SampleParams) -> Result<()> {
    if p.frames < 2 || p.points_per_wall < 3 {
        return Err(Error::invalid(format!("{} frames and {} points per wall are too few", p.frames, p.points_per_wall)));
    }
    if !(0.0..1.0).contains(&p.contraction) || !(0.0..1.0).contains(&p.shear) {
        return Err(Error::invalid("contraction and shear must lie in [0, 1)"));
    }
    if !(0.0 < p.rho_inner && p.rho_inner < p.rho_outer) {
        return Err(Error::invalid("the inner wall must lie inside the outer wall"));
    }
    let hi = (p.size - 1) as f64;
    let m = MotionModel::from_params(p);
    // the whole outer boundary stays in frame over the cycle
    for t in 0..p.frames {
        let phase = phase_of(t, p.frames);
        for i in 0..64 {
            let [x, y] = m.position(p.rho_outer, TAU * i as f64 / 64.0, phase);
            if x < 0.0 || y < 0.0 || x > hi || y > hi {
                return Err(Error::invalid(format!("the wall leaves the {}-pixel frame at frame {t}", p.size)));
            }
        }
    }
    let mut prev = keypoints(p, 0.0);
    for t in 1..p.frames {
        let cur = keypoints(p, phase_of(t, p.frames));
        let step = prev.iter().zip(&cur).map(|(a, b)| (a[0] - b[0]).hypot(a[1] - b[1])).fold(0.0, f64::max);
        if step > p.max_step_px {
            return Err(Error::invalid(format!(
                "keypoints move {step:.2} px between frames {} and {t}, above the {} px limit",
                t - 1,
                p.max_step_px
            )));
        }
        prev = cur;
    }
    Ok(())
}

/// One generated sequence with its keypoint trajectories (inner tracks
/// first, then outer).
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub clip: Clip,
    pub params: SampleParams,
}

impl SyntheticSample {
    pub fn points_per_wall(&self) -> usize {
        self.params.points_per_wall
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable blur with wrap-around borders.
fn blur(field: &[f64], side: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let at = |i: isize| i.rem_euclid(side as isize) as usize;
    let mut tmp = vec![0.0; field.len()];
    for y in 0..side {
        for x in 0..side {
            tmp[y * side + x] = k.iter().enumerate().map(|(j, w)| w * field[y * side + at(x as isize + j as isize - r)]).sum();
        }
    }
    let mut out = vec![0.0; field.len()];
    for y in 0..side {
        for x in 0..side {
            out[y * side + x] = k.iter().enumerate().map(|(j, w)| w * tmp[at(y as isize + j as isize - r) * side + x]).sum();
        }
    }
    out
}

/// Speckle intensity with unit mean: squared magnitude of two band-passed
/// noise fields.
fn speckle(side: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut band = || {
        let white: Vec<f64> = (0..side * side).map(|_| StandardNormal.sample(&mut *rng)).collect();
        let fine = blur(&white, side, sigma);
        let coarse = blur(&white, side, 2.0 * sigma);
        fine.iter().zip(&coarse).map(|(a, b)| a - b).collect::<Vec<f64>>()
    };
    let (u, v) = (band(), band());
    let raw: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a * a + b * b).collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    raw.into_iter().map(|s| s / mean.max(1e-12)).collect()
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Echo brightness of the material point `(ρ, θ)`: bright wall, dark
/// cavity, grey surroundings.
fn tissue(p: &SampleParams, rho: f64, theta: f64) -> f64 {
    let rel = wrap(theta - APEX_ANGLE);
    let edge = 0.04;
    let in_span = smoothstep(-p.free_wall_span - 0.25, -p.free_wall_span, rel)
        * (1.0 - smoothstep(p.septal_span, p.septal_span + 0.25, rel));
    let wall = smoothstep(p.rho_inner - edge, p.rho_inner + edge, rho) * (1.0 - smoothstep(p.rho_outer - edge, p.rho_outer + edge, rho));
    let cavity = 1.0 - smoothstep(p.rho_inner - edge, p.rho_inner + edge, rho);
    let (wall_b, blood_b, other_b) = (0.9, 0.06, 0.22);
    let background = cavity * blood_b + (1.0 - cavity) * other_b;
    let wall = wall * in_span;
    wall * wall_b + (1.0 - wall) * background
}

fn bilinear_wrap(field: &[f64], side: usize, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let at = |xx: f64, yy: f64| {
        let xi = (xx as i64).rem_euclid(side as i64) as usize;
        let yi = (yy as i64).rem_euclid(side as i64) as usize;
        field[yi * side + xi]
    };
    (1.0 - fx) * (1.0 - fy) * at(x0, y0) + fx * (1.0 - fy) * at(x0 + 1.0, y0) + (1.0 - fx) * fy * at(x0, y0 + 1.0) + fx * fy * at(x0 + 1.0, y0 + 1.0)
}

/// Renders the sample described by `p`.
pub fn generate(p: &SampleParams) -> Result<SyntheticSample> {
    validate(p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed ^ 0x5eed_5eed_5eed_5eed);
    let side = p.size;
    let texture = speckle(side, p.speckle_sigma, &mut rng);
    let m = MotionModel::from_params(p);
    let apex_px = [(side as f64 - 1.0) / 2.0, 0.0];
    let mut data = Vec::with_capacity(p.frames * side * side);
    for t in 0..p.frames {
        let phase = phase_of(t, p.frames);
        let burst = p.burst.filter(|b| t >= b.start && t < b.start + b.len);
        for y in 0..side {
            for x in 0..side {
                let (rho, theta) = m.material([x as f64, y as f64], phase);
                let [rx, ry] = m.position(rho, theta, 0.0);
                let mut v = tissue(p, rho, theta) * bilinear_wrap(&texture, side, rx, ry) * 0.5;
                if let Some(d) = p.dropout {
                    let a = (x as f64 - apex_px[0]).atan2(y as f64 - apex_px[1]);
                    v *= 1.0 - (1.0 - d.gain) * (1.0 - smoothstep(d.width / 2.0, d.width / 2.0 + 0.05, (a - d.angle).abs()));
                }
                if let Some(b) = burst {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    v += b.sd * n;
                }
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    let video = Tensor::new(vec![p.frames, side, side], data)?;
    let n = 2 * p.points_per_wall;
    let mut coords = Vec::with_capacity(p.frames * n * 2);
    for t in 0..p.frames {
        for q in keypoints(p, phase_of(t, p.frames)) {
            coords.push(q[0] as f32);
            coords.push(q[1] as f32);
        }
    }
    let tracks = TrajectorySet::new(p.frames, n, coords)?;
    Ok(SyntheticSample { clip: Clip::new(video, tracks, p.mm_per_px as f32)?, params: p.clone() })
}

/// Draws until a valid parameter set is found.
pub fn draw_valid(ranges: &SynthParams, rng: &mut impl RngCore) -> Result<SampleParams> {
    for _ in 0..100 {
        let p = draw_params(ranges, rng.next_u64());
        if validate(&p).is_ok() {
            return Ok(p);
        }
    }
    Err(Error::invalid("no valid sample in 100 draws; widen the parameter ranges or raise max_step_px"))
}

/// Parameters of the `count` samples that [`generate_dataset`] renders.
pub fn dataset_params(count: usize, ranges: &SynthParams, seed: u64) -> Result<Vec<SampleParams>> {
    if count == 0 {
        return Err(Error::invalid("a dataset needs at least one sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| draw_valid(ranges, &mut rng)).collect()
}

/// `count` samples with independent random parameters.
pub fn generate_dataset(count: usize, ranges: &SynthParams, seed: u64) -> Result<Vec<SyntheticSample>> {
    dataset_params(count, ranges, seed)?.iter().map(generate).collect()
}
