//! Free-wall strain from keypoint trajectories, trajectory error metrics
//! and paired agreement statistics.

use alloc::format;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, TrajectorySet};

pub type Point = [f64; 2];

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Inner and outer boundary points, each ordered from the free-wall base
/// (index 0) to the septal base (index N-1).
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointGraph {
    pub inner: Vec<Point>,
    pub outer: Vec<Point>,
}

impl KeypointGraph {
    pub fn new(inner: Vec<Point>, outer: Vec<Point>) -> Result<Self> {
        if inner.len() != outer.len() || inner.len() < 3 {
            return Err(Error::invalid(format!(
                "sub-graphs need equal lengths of at least 3, got {} and {}",
                inner.len(),
                outer.len()
            )));
        }
        Ok(Self { inner, outer })
    }

    pub fn len(&self) -> usize {
        self.inner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.is_empty()
    }

    /// Frame `t` of trajectories laid out as N inner tracks then N outer.
    pub fn from_frame(tracks: &TrajectorySet, t: usize) -> Result<Self> {
        let n = tracks.points();
        if !n.is_multiple_of(2) {
            return Err(Error::invalid(format!("{n} tracks cannot split into two equal sub-graphs")));
        }
        let pt = |i: usize| {
            let [x, y] = tracks.get(t, i);
            [x as f64, y as f64]
        };
        Self::new((0..n / 2).map(pt).collect(), (n / 2..n).map(pt).collect())
    }

    pub fn map(&self, f: impl Fn(Point) -> Point) -> Self {
        Self { inner: self.inner.iter().map(|&p| f(p)).collect(), outer: self.outer.iter().map(|&p| f(p)).collect() }
    }

    fn midpoints(&self, last: usize) -> Vec<Point> {
        (0..=last).map(|i| [(self.inner[i][0] + self.outer[i][0]) / 2.0, (self.inner[i][1] + self.outer[i][1]) / 2.0]).collect()
    }
}

/// Index of the point farthest from the first one; the lowest index wins
/// ties.
pub fn farthest_from_first(points: &[Point]) -> usize {
    let mut best = 0;
    let mut best_d = -1.0;
    for (i, &p) in points.iter().enumerate() {
        let d = dist(points[0], p);
        if d > best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Apex index: the full-length centerline point farthest from its base.
pub fn find_apex(graph: &KeypointGraph) -> usize {
    farthest_from_first(&graph.midpoints(graph.len() - 1))
}

/// Midpoints of inner and outer points from the base up to `apex`.
pub fn centerline(graph: &KeypointGraph, apex: usize) -> Result<Vec<Point>> {
    if apex == 0 || apex >= graph.len() {
        return Err(Error::invalid(format!("apex index {apex} outside 1..{}", graph.len())));
    }
    Ok(graph.midpoints(apex))
}

pub fn polyline_length(points: &[Point]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::invalid(format!("a polyline needs at least 2 points, got {}", points.len())));
    }
    Ok(points.windows(2).map(|w| dist(w[0], w[1])).sum())
}

/// Per-frame free-wall strain in percent, relative to frame 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrainCurve {
    pub values: Vec<f64>,
    pub apex: usize,
    /// Frame where inner plus outer sub-graph length is smallest.
    pub peak_frame: usize,
}

impl StrainCurve {
    pub fn peak(&self) -> f64 {
        self.values[self.peak_frame]
    }
}

/// Strain of the free-wall centerline over frames; frame 0 is the
/// reference and its apex index is used throughout.
pub fn fws_curve(frames: &[KeypointGraph]) -> Result<StrainCurve> {
    let ed = frames.first().ok_or_else(|| Error::invalid("no frames"))?;
    let apex = find_apex(ed);
    let l0 = polyline_length(&centerline(ed, apex)?)?;
    if l0 <= 0.0 {
        return Err(Error::invalid("free-wall length at the reference frame is zero"));
    }
    let mut values = Vec::with_capacity(frames.len());
    let mut peak_frame = 0;
    let mut shortest = f64::INFINITY;
    for (t, g) in frames.iter().enumerate() {
        if g.len() != ed.len() {
            return Err(Error::invalid(format!("frame {t} has {} points, frame 0 has {}", g.len(), ed.len())));
        }
        let l = polyline_length(&centerline(g, apex)?)?;
        values.push((l - l0) / l0 * 100.0);
        let total = polyline_length(&g.inner)? + polyline_length(&g.outer)?;
        if total < shortest {
            shortest = total;
            peak_frame = t;
        }
    }
    Ok(StrainCurve { values, apex, peak_frame })
}

/// Strain curve of trajectories stored as N inner tracks then N outer.
pub fn fws_from_tracks(tracks: &TrajectorySet) -> Result<StrainCurve> {
    let frames = (0..tracks.frames()).map(|t| KeypointGraph::from_frame(tracks, t)).collect::<Result<Vec<_>>>()?;
    fws_curve(&frames)
}

/// Trajectory errors in pixels and millimetres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMetrics {
    /// Mean point error over all frames and points.
    pub avg_px: f64,
    /// Mean point error in the last frame.
    pub end_px: f64,
    /// Mean distance between each predicted point's first and last frame.
    pub drift_px: f64,
    pub avg_mm: f64,
    pub end_mm: f64,
    pub drift_mm: f64,
}

pub fn trajectory_metrics(reference: &TrajectorySet, predicted: &TrajectorySet, mm_per_px: f64) -> Result<TrajectoryMetrics> {
    let (t, n) = (reference.frames(), reference.points());
    if (t, n) != (predicted.frames(), predicted.points()) || t == 0 || n == 0 {
        return Err(Error::shape(
            "trajectory_metrics",
            format!("reference {}x{} vs prediction {}x{}", t, n, predicted.frames(), predicted.points()),
        ));
    }
    if !(mm_per_px > 0.0) {
        return Err(Error::invalid(format!("pixel spacing {mm_per_px} must be positive")));
    }
    let err = |f: usize, p: usize| {
        let (a, b) = (reference.get(f, p), predicted.get(f, p));
        (a[0] as f64 - b[0] as f64).hypot(a[1] as f64 - b[1] as f64)
    };
    let mut total = 0.0;
    for f in 0..t {
        for p in 0..n {
            total += err(f, p);
        }
    }
    let avg_px = total / (t * n) as f64;
    let end_px = (0..n).map(|p| err(t - 1, p)).sum::<f64>() / n as f64;
    let drift_px = (0..n)
        .map(|p| {
            let (a, b) = (predicted.get(0, p), predicted.get(t - 1, p));
            (a[0] as f64 - b[0] as f64).hypot(a[1] as f64 - b[1] as f64)
        })
        .sum::<f64>()
        / n as f64;
    Ok(TrajectoryMetrics {
        avg_px,
        end_px,
        drift_px,
        avg_mm: avg_px * mm_per_px,
        end_mm: end_px * mm_per_px,
        drift_mm: drift_px * mm_per_px,
    })
}

/// Bland-Altman style agreement of paired measurements.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub pairs: usize,
    /// Mean of `predicted - reference`.
    pub bias: f64,
    /// Sample standard deviation of the differences.
    pub sd: f64,
    pub loa_low: f64,
    pub loa_high: f64,
    /// Pearson correlation; absent when either side is constant.
    pub pearson: Option<f64>,
}

pub fn compare_report(reference: &[f64], predicted: &[f64]) -> Result<Agreement> {
    let n = reference.len();
    if n != predicted.len() || n < 2 {
        return Err(Error::invalid(format!("need at least 2 pairs, got {} and {}", n, predicted.len())));
    }
    let diffs: Vec<f64> = predicted.iter().zip(reference).map(|(p, r)| p - r).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let bias = mean(&diffs);
    let sd = (diffs.iter().map(|d| (d - bias).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let (mr, mp) = (mean(reference), mean(predicted));
    let cov: f64 = reference.iter().zip(predicted).map(|(r, p)| (r - mr) * (p - mp)).sum();
    let vr: f64 = reference.iter().map(|r| (r - mr).powi(2)).sum();
    let vp: f64 = predicted.iter().map(|p| (p - mp).powi(2)).sum();
    let pearson = if vr > 0.0 && vp > 0.0 { Some(cov / (vr * vp).sqrt()) } else { None };
    Ok(Agreement { pairs: n, bias, sd, loa_low: bias - 1.96 * sd, loa_high: bias + 1.96 * sd, pearson })
}
