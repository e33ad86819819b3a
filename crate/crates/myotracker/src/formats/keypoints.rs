//! Keypoint tables: CSV rows `frame,point_id,subgraph,x,y` plus a JSON
//! sidecar next to the CSV (`points.csv` → `points.json`).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use myotracker_core::TrajectorySet;
use serde::{Deserialize, Serialize};

use super::{FormatError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointMeta {
    /// Points per sub-graph.
    pub n_points: usize,
    pub n_frames: usize,
    pub scale_mm_per_px: f64,
    pub seed: Option<u64>,
}

/// Trajectories of a keypoint graph: `n_points` inner tracks followed by
/// `n_points` outer tracks.
#[derive(Clone, Debug, PartialEq)]
pub struct Keypoints {
    pub tracks: TrajectorySet,
    pub meta: KeypointMeta,
}

impl Keypoints {
    pub fn new(tracks: TrajectorySet, scale_mm_per_px: f64, seed: Option<u64>) -> Result<Self> {
        if tracks.points() == 0 || !tracks.points().is_multiple_of(2) {
            return Err(FormatError::malformed(format!(
                "a keypoint graph needs equal inner and outer sub-graphs, got {} points",
                tracks.points()
            )));
        }
        let meta = KeypointMeta { n_points: tracks.points() / 2, n_frames: tracks.frames(), scale_mm_per_px, seed };
        Ok(Self { tracks, meta })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Subgraph {
    Inner,
    Outer,
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    frame: usize,
    point_id: usize,
    subgraph: Subgraph,
    x: f32,
    y: f32,
}

pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

pub fn write_keypoints(path: &Path, kp: &Keypoints) -> Result<()> {
    let file = File::create(path).map_err(|e| FormatError::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let n = kp.meta.n_points;
    for t in 0..kp.tracks.frames() {
        for i in 0..2 * n {
            let [x, y] = kp.tracks.get(t, i);
            let subgraph = if i < n { Subgraph::Inner } else { Subgraph::Outer };
            w.serialize(Row { frame: t, point_id: i % n, subgraph, x, y }).map_err(csv_error)?;
        }
    }
    w.flush().map_err(|e| FormatError::io(path, e))?;
    let side = sidecar_path(path);
    let mut f = File::create(&side).map_err(|e| FormatError::io(&side, e))?;
    serde_json::to_writer_pretty(&mut f, &kp.meta).map_err(|e| FormatError::malformed(e.to_string()))?;
    f.write_all(b"\n").map_err(|e| FormatError::io(&side, e))
}

fn csv_error(e: csv::Error) -> FormatError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => FormatError::from(io),
        other => FormatError::malformed(format!("keypoint CSV: {:?}", other)),
    }
}

/// Reads a keypoint CSV and its sidecar. Without a sidecar the scale is
/// 1 mm/px and the seed unknown.
pub fn read_keypoints(path: &Path) -> Result<Keypoints> {
    let file = File::open(path).map_err(|e| FormatError::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let headers = r.headers().map_err(csv_error)?.clone();
    if headers.iter().collect::<Vec<_>>() != ["frame", "point_id", "subgraph", "x", "y"] {
        return Err(FormatError::malformed(format!(
            "{}: expected header frame,point_id,subgraph,x,y",
            path.display()
        )));
    }
    let mut cells: BTreeMap<(usize, Subgraph, usize), [f32; 2]> = BTreeMap::new();
    for (line, row) in r.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| FormatError::malformed(format!("{}: row {}: {}", path.display(), line + 2, e)))?;
        if cells.insert((row.frame, row.subgraph, row.point_id), [row.x, row.y]).is_some() {
            return Err(FormatError::malformed(format!(
                "{}: duplicate entry for frame {}, {:?} point {}",
                path.display(),
                row.frame,
                row.subgraph,
                row.point_id
            )));
        }
    }
    let frames = cells.keys().map(|k| k.0 + 1).max().unwrap_or(0);
    let count = |s: Subgraph| cells.keys().filter(|k| k.0 == 0 && k.1 == s).count();
    let n = count(Subgraph::Inner);
    if frames == 0 || n == 0 || count(Subgraph::Outer) != n || cells.len() != frames * 2 * n {
        return Err(FormatError::malformed(format!(
            "{}: expected every frame to list the same {} inner and {} outer points",
            path.display(),
            n,
            count(Subgraph::Outer)
        )));
    }
    let mut data = Vec::with_capacity(frames * 2 * n * 2);
    for t in 0..frames {
        for (s, i) in (0..2 * n).map(|i| (if i < n { Subgraph::Inner } else { Subgraph::Outer }, i % n)) {
            let p = cells.get(&(t, s, i)).ok_or_else(|| {
                FormatError::malformed(format!("{}: frame {t} lacks {s:?} point {i}", path.display()))
            })?;
            data.extend_from_slice(p);
        }
    }
    let tracks = TrajectorySet::new(frames, 2 * n, data)?;
    let side = sidecar_path(path);
    let meta = if side.exists() {
        let text = std::fs::read_to_string(&side).map_err(|e| FormatError::io(&side, e))?;
        let meta: KeypointMeta = serde_json::from_str(&text)
            .map_err(|e| FormatError::malformed(format!("{}: {}", side.display(), e)))?;
        if meta.n_points != n || meta.n_frames != frames {
            return Err(FormatError::malformed(format!(
                "{}: sidecar says {} points x {} frames, the table has {} x {}",
                side.display(),
                meta.n_points,
                meta.n_frames,
                n,
                frames
            )));
        }
        meta
    } else {
        KeypointMeta { n_points: n, n_frames: frames, scale_mm_per_px: 1.0, seed: None }
    };
    Ok(Keypoints { tracks, meta })
}
