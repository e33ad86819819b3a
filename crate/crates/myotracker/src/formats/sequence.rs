//! `MYOTSEQ1` video container: magic, `u16` version, `T`, `H`, `W` as
//! little-endian `u32`, a dtype byte (0 = u8, 1 = f32) and frame-major
//! pixels.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use myotracker_core::Tensor;

use super::{FormatError, Result};

pub const SEQ_MAGIC: &[u8; 8] = b"MYOTSEQ1";
pub const SEQ_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PixelType {
    /// Intensities quantized to `round(255 v)`.
    U8,
    F32,
}

pub fn write_sequence(w: &mut impl Write, video: &Tensor<f32>, dtype: PixelType) -> Result<()> {
    let [t, h, wd] = *video.shape() else {
        return Err(FormatError::malformed(format!("a sequence must be [T, H, W], got {:?}", video.shape())));
    };
    w.write_all(SEQ_MAGIC)?;
    w.write_all(&SEQ_VERSION.to_le_bytes())?;
    for d in [t, h, wd] {
        let d = u32::try_from(d).map_err(|_| FormatError::malformed("dimension exceeds u32"))?;
        w.write_all(&d.to_le_bytes())?;
    }
    match dtype {
        PixelType::U8 => {
            w.write_all(&[0])?;
            let bytes: Vec<u8> = video.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
            w.write_all(&bytes)?;
        }
        PixelType::F32 => {
            w.write_all(&[1])?;
            let bytes: Vec<u8> = video.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            w.write_all(&bytes)?;
        }
    }
    Ok(())
}

pub fn read_sequence(r: &mut impl Read) -> Result<Tensor<f32>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != SEQ_MAGIC {
        return Err(FormatError::malformed("not a sequence file (bad magic)"));
    }
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2)?;
    let version = u16::from_le_bytes(b2);
    if version != SEQ_VERSION {
        return Err(FormatError::malformed(format!("unsupported sequence version {version}")));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        *d = u32::from_le_bytes(b4) as usize;
    }
    let mut dtype = [0u8; 1];
    r.read_exact(&mut dtype)?;
    let n = dims.iter().product::<usize>();
    let data = match dtype[0] {
        0 => {
            let mut bytes = vec![0u8; n];
            r.read_exact(&mut bytes)?;
            bytes.into_iter().map(|b| b as f32 / 255.0).collect()
        }
        1 => {
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes)?;
            bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
        }
        d => return Err(FormatError::malformed(format!("unknown dtype byte {d}"))),
    };
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(FormatError::malformed("trailing bytes after pixel data"));
    }
    Ok(Tensor::new(dims.to_vec(), data)?)
}

pub fn save_sequence(path: &Path, video: &Tensor<f32>, dtype: PixelType) -> Result<()> {
    let file = File::create(path).map_err(|e| FormatError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_sequence(&mut w, video, dtype)?;
    w.flush().map_err(|e| FormatError::io(path, e))
}

pub fn load_sequence(path: &Path) -> Result<Tensor<f32>> {
    let file = File::open(path).map_err(|e| FormatError::io(path, e))?;
    read_sequence(&mut BufReader::new(file))
}
