//! Point trajectories and video clips with ground truth.

use alloc::format;
use alloc::vec::Vec;

use crate::{Error, Result, Tensor};

/// `(x, y)` pixel coordinates of `points` tracks over `frames` frames,
/// stored frame-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySet {
    frames: usize,
    points: usize,
    data: Vec<f32>,
}

impl TrajectorySet {
    pub fn new(frames: usize, points: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * points * 2 {
            return Err(Error::shape(
                "trajectories",
                format!("{} values for {frames} frames x {points} points", data.len()),
            ));
        }
        Ok(Self { frames, points, data })
    }

    /// Every frame repeats `queries`.
    pub fn constant(queries: &[[f32; 2]], frames: usize) -> Self {
        let frame: Vec<f32> = queries.iter().flatten().copied().collect();
        Self { frames, points: queries.len(), data: frame.repeat(frames) }
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        match *t.shape() {
            [frames, points, 2] => Self::new(frames, points, t.data().to_vec()),
            _ => Err(Error::shape("trajectories", format!("expected [T, N, 2], got {:?}", t.shape()))),
        }
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_parts(alloc::vec![self.frames, self.points, 2], self.data.clone())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, t: usize, n: usize) -> [f32; 2] {
        let i = (t * self.points + n) * 2;
        [self.data[i], self.data[i + 1]]
    }

    pub fn set(&mut self, t: usize, n: usize, p: [f32; 2]) {
        let i = (t * self.points + n) * 2;
        self.data[i] = p[0];
        self.data[i + 1] = p[1];
    }

    pub fn frame(&self, t: usize) -> Vec<[f32; 2]> {
        (0..self.points).map(|n| self.get(t, n)).collect()
    }

    /// Positions in frame 0.
    pub fn queries(&self) -> Vec<[f32; 2]> {
        self.frame(0)
    }

    /// Point `i` of the result is point `order[i]` of `self`.
    pub fn select_points(&self, order: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.frames * order.len() * 2);
        for t in 0..self.frames {
            for &n in order {
                data.extend_from_slice(&self.get(t, n));
            }
        }
        Self { frames: self.frames, points: order.len(), data }
    }

    /// Frame `i` of the result is frame `order[i]` of `self`.
    pub fn select_frames(&self, order: &[usize]) -> Self {
        let w = self.points * 2;
        let data = order.iter().flat_map(|&t| self.data[t * w..(t + 1) * w].iter().copied()).collect();
        Self { frames: order.len(), points: self.points, data }
    }

    pub fn map_points(&mut self, mut f: impl FnMut([f32; 2]) -> [f32; 2]) {
        for p in self.data.chunks_exact_mut(2) {
            let q = f([p[0], p[1]]);
            p.copy_from_slice(&q);
        }
    }
}

/// A video `[T, H, W]` with intensities in `[0, 1]`, its ground-truth
/// trajectories and the pixel spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub video: Tensor<f32>,
    pub tracks: TrajectorySet,
    pub scale_mm_per_px: f32,
    /// For each track, the index of the original point it copies.
    pub source: Vec<usize>,
    /// Tracks added by oversampling; evaluation should skip them.
    pub duplicate: Vec<bool>,
}

impl Clip {
    pub fn new(video: Tensor<f32>, tracks: TrajectorySet, scale_mm_per_px: f32) -> Result<Self> {
        if video.rank() != 3 || video.shape()[0] != tracks.frames() {
            return Err(Error::shape(
                "clip",
                format!("video {:?} does not match {} trajectory frames", video.shape(), tracks.frames()),
            ));
        }
        let n = tracks.points();
        Ok(Self { video, tracks, scale_mm_per_px, source: (0..n).collect(), duplicate: alloc::vec![false; n] })
    }

    pub fn frames(&self) -> usize {
        self.video.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.video.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.video.shape()[2]
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let s = self.height() * self.width();
        &self.video.data()[t * s..(t + 1) * s]
    }

    /// Reorders frames of both video and trajectories.
    pub fn select_frames(&self, order: &[usize]) -> Self {
        let s = self.height() * self.width();
        let data = order.iter().flat_map(|&t| self.video.data()[t * s..(t + 1) * s].iter().copied()).collect();
        Self {
            video: Tensor::from_parts(alloc::vec![order.len(), self.height(), self.width()], data),
            tracks: self.tracks.select_frames(order),
            ..self.clone()
        }
    }

    /// Reorders (or duplicates) tracks, keeping the provenance fields in step.
    pub fn select_points(&self, order: &[usize]) -> Self {
        Self {
            tracks: self.tracks.select_points(order),
            source: order.iter().map(|&i| self.source[i]).collect(),
            duplicate: order.iter().map(|&i| self.duplicate[i]).collect(),
            ..self.clone()
        }
    }
}
