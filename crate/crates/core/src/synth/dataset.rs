//! Binary dataset container for rendered patch samples.
//!
//! Layout (all little-endian):
//!   magic "CPDS", version u32, sample count u64, patch size u32,
//!   then per sample: patch f32 x (S*S*3, HWC row-major),
//!   keypoints f64 x 14 (patch frame), position f64 x 3, color u8,
//!   bbox f64 x 4 (x, y, w, h).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{BBox, PatchImage, PatchSample, SynthError, PATCH_SIZE};
use crate::cone::{ColorClass, KeypointFrame, KeypointSet};
use crate::geometry::Point3;

pub const DATASET_MAGIC: [u8; 4] = *b"CPDS";
pub const DATASET_VERSION: u32 = 1;

fn write_f64s<W: Write>(w: &mut W, vals: &[f64]) -> std::io::Result<()> {
    for v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, out: &mut [f64]) -> std::io::Result<()> {
    let mut b = [0u8; 8];
    for v in out {
        r.read_exact(&mut b)?;
        *v = f64::from_le_bytes(b);
    }
    Ok(())
}

pub fn write_dataset<P: AsRef<Path>>(path: P, samples: &[PatchSample]) -> Result<(), SynthError> {
    if samples.is_empty() {
        return Err(SynthError::EmptyDataset);
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(samples.len() as u64).to_le_bytes())?;
    w.write_all(&(PATCH_SIZE as u32).to_le_bytes())?;
    for s in samples {
        for v in s.patch.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
        write_f64s(&mut w, &s.keypoints.to_vec14())?;
        write_f64s(&mut w, &[s.position.x, s.position.y, s.position.z])?;
        w.write_all(&[s.color.id()])?;
        write_f64s(&mut w, &[s.bbox.x, s.bbox.y, s.bbox.w, s.bbox.h])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset written by [`write_dataset`]. The bbox truncation
/// flag is not stored and reads back as false.
pub fn read_dataset<P: AsRef<Path>>(path: P) -> Result<Vec<PatchSample>, SynthError> {
    let mut r = BufReader::new(File::open(path)?);
    let corrupt = |msg: &str| SynthError::CorruptFile(msg.to_string());
    let truncated = |e: std::io::Error, msg: &str| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            SynthError::CorruptFile(msg.to_string())
        } else {
            SynthError::Io(e)
        }
    };

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| truncated(e, "file shorter than header"))?;
    if magic != DATASET_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = read_u32(&mut r).map_err(|e| truncated(e, "file shorter than header"))?;
    if version != DATASET_VERSION {
        return Err(SynthError::VersionMismatch { found: version, expected: DATASET_VERSION });
    }
    let count = read_u64(&mut r).map_err(|e| truncated(e, "file shorter than header"))?;
    let patch_size = read_u32(&mut r).map_err(|e| truncated(e, "file shorter than header"))?;
    if patch_size as usize != PATCH_SIZE {
        return Err(corrupt("unsupported patch size"));
    }
    if count == 0 {
        return Err(SynthError::EmptyDataset);
    }

    let mut samples = Vec::with_capacity(count as usize);
    let mut f32buf = vec![0u8; PATCH_SIZE * PATCH_SIZE * 3 * 4];
    for _ in 0..count {
        r.read_exact(&mut f32buf)
            .map_err(|e| truncated(e, "truncated sample data"))?;
        let data: Vec<f32> = f32buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut kp = [0.0f64; 14];
        read_f64s(&mut r, &mut kp).map_err(|e| truncated(e, "truncated sample data"))?;
        let mut pos = [0.0f64; 3];
        read_f64s(&mut r, &mut pos).map_err(|e| truncated(e, "truncated sample data"))?;
        let mut color_byte = [0u8; 1];
        r.read_exact(&mut color_byte)
            .map_err(|e| truncated(e, "truncated sample data"))?;
        let color = ColorClass::from_id(color_byte[0]).ok_or_else(|| corrupt("invalid color id"))?;
        let mut bb = [0.0f64; 4];
        read_f64s(&mut r, &mut bb).map_err(|e| truncated(e, "truncated sample data"))?;
        samples.push(PatchSample {
            patch: PatchImage::from_data(data),
            keypoints: KeypointSet::from_vec14(&kp, KeypointFrame::Patch),
            bbox: BBox { x: bb[0], y: bb[1], w: bb[2], h: bb[3], truncated: false },
            position: Point3::new(pos[0], pos[1], pos[2]),
            color,
        });
    }
    // Trailing bytes indicate a count/content mismatch.
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(samples),
        _ => Err(corrupt("trailing bytes after last sample")),
    }
}
