//! Dataset directories: one `NAME.myotseq` video, `NAME.csv` keypoint table
//! and `NAME.json` sidecar per sample, plus `manifest.json` listing the
//! samples and the parameters that generated them.

use std::fs;
use std::path::{Path, PathBuf};

use myotracker_core::synth::{SampleParams, SynthParams, SyntheticSample};
use myotracker_core::Clip;
use serde::{Deserialize, Serialize};

use crate::formats::{load_sequence, read_keypoints, save_sequence, write_keypoints, FormatError, Keypoints, PixelType, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub name: String,
    pub params: SampleParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub ranges: SynthParams,
    pub dtype: PixelType,
    pub samples: Vec<SampleEntry>,
}

/// One sample read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    pub clip: Clip,
    pub seed: Option<u64>,
}

impl Sample {
    pub fn keypoints(&self) -> Result<Keypoints> {
        Keypoints::new(self.clip.tracks.clone(), self.clip.scale_mm_per_px as f64, self.seed)
    }
}

pub fn sample_name(i: usize) -> String {
    format!("sample_{i:04}")
}

pub fn video_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.myotseq"))
}

pub fn keypoint_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.csv"))
}

/// Writes `samples` and a manifest into `dir` (created if needed).
pub fn write_dataset(
    dir: &Path,
    samples: &[SyntheticSample],
    ranges: &SynthParams,
    seed: u64,
    dtype: PixelType,
) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| FormatError::io(dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let name = sample_name(i);
        save_sequence(&video_path(dir, &name), &s.clip.video, dtype)?;
        let kp = Keypoints::new(s.clip.tracks.clone(), s.clip.scale_mm_per_px as f64, Some(s.params.seed))?;
        write_keypoints(&keypoint_path(dir, &name), &kp)?;
        entries.push(SampleEntry { name, params: s.params.clone() });
    }
    let manifest = DatasetManifest { seed, ranges: ranges.clone(), dtype, samples: entries };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| FormatError::malformed(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| FormatError::io(path, e))
}

/// Sample names of `dir`: the manifest order if there is one, otherwise
/// every `*.myotseq` file in name order.
pub fn sample_names(dir: &Path) -> Result<Vec<String>> {
    let manifest = dir.join(MANIFEST);
    if manifest.exists() {
        let text = fs::read_to_string(&manifest).map_err(|e| FormatError::io(&manifest, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| FormatError::malformed(format!("{}: {}", manifest.display(), e)))?;
        return Ok(m.samples.into_iter().map(|s| s.name).collect());
    }
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| FormatError::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            (p.extension()? == "myotseq").then(|| p.file_stem()?.to_str().map(String::from))?
        })
        .collect();
    names.sort();
    Ok(names)
}

pub fn read_sample(dir: &Path, name: &str) -> Result<Sample> {
    let video = load_sequence(&video_path(dir, name))?;
    let kp = read_keypoints(&keypoint_path(dir, name))?;
    if kp.tracks.frames() != video.shape()[0] {
        return Err(FormatError::malformed(format!(
            "{name}: the video has {} frames, the keypoints {}",
            video.shape()[0],
            kp.tracks.frames()
        )));
    }
    let clip = Clip::new(video, kp.tracks, kp.meta.scale_mm_per_px as f32)?;
    Ok(Sample { name: name.to_string(), clip, seed: kp.meta.seed })
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let names = sample_names(dir)?;
    if names.is_empty() {
        return Err(FormatError::malformed(format!("{} contains no samples", dir.display())));
    }
    names.iter().map(|n| read_sample(dir, n)).collect()
}
