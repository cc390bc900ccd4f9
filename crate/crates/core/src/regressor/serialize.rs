//! Binary model container.
//!
//! Layout (all little-endian): magic "KPRN", version u32, input size
//! u32, base width u32, batchnorm flag u8, tensor count u32, then per
//! tensor a u64 length followed by that many f64 values. Tensors appear
//! in the order defined by the net's parameter enumeration (stem,
//! blocks, head; normalization running statistics included). Optimizer
//! state is not stored.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::layers::Elem;
use super::{NetConfig, RegressorError, RegressorNetT};

pub const MODEL_MAGIC: [u8; 4] = *b"KPRN";
pub const MODEL_VERSION: u32 = 1;

pub fn save_model<E: Elem, P: AsRef<Path>>(
    path: P,
    net: &RegressorNetT<E>,
) -> Result<(), RegressorError> {
    let mut w = BufWriter::new(File::create(path)?);
    let cfg = net.config();
    w.write_all(&MODEL_MAGIC)?;
    w.write_all(&MODEL_VERSION.to_le_bytes())?;
    w.write_all(&(cfg.input_size as u32).to_le_bytes())?;
    w.write_all(&(cfg.base_width as u32).to_le_bytes())?;
    w.write_all(&[cfg.batchnorm as u8])?;
    let tensors = net.param_tensors();
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        w.write_all(&(t.len() as u64).to_le_bytes())?;
        for v in t {
            w.write_all(&v.to_f64().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_model<E: Elem, P: AsRef<Path>>(path: P) -> Result<RegressorNetT<E>, RegressorError> {
    let mut r = BufReader::new(File::open(path)?);
    let corrupt = |msg: &str| RegressorError::CorruptFile(msg.to_string());
    let eof_as_corrupt = |e: std::io::Error| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            RegressorError::CorruptFile("unexpected end of file".to_string())
        } else {
            RegressorError::Io(e)
        }
    };

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(eof_as_corrupt)?;
    if magic != MODEL_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(eof_as_corrupt)?;
    let version = u32::from_le_bytes(u32buf);
    if version != MODEL_VERSION {
        return Err(RegressorError::VersionMismatch { found: version, expected: MODEL_VERSION });
    }
    r.read_exact(&mut u32buf).map_err(eof_as_corrupt)?;
    let input_size = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf).map_err(eof_as_corrupt)?;
    let base_width = u32::from_le_bytes(u32buf) as usize;
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag).map_err(eof_as_corrupt)?;
    let batchnorm = match flag[0] {
        0 => false,
        1 => true,
        _ => return Err(corrupt("invalid batchnorm flag")),
    };
    r.read_exact(&mut u32buf).map_err(eof_as_corrupt)?;
    let tensor_count = u32::from_le_bytes(u32buf) as usize;

    let cfg = NetConfig { input_size, base_width, batchnorm };
    let mut net = RegressorNetT::<E>::new(&cfg, 0)
        .map_err(|_| corrupt("header describes an unconstructible net"))?;
    {
        let mut tensors = net.param_tensors_mut();
        if tensors.len() != tensor_count {
            return Err(corrupt("tensor count does not match architecture"));
        }
        let mut u64buf = [0u8; 8];
        for t in tensors.iter_mut() {
            r.read_exact(&mut u64buf).map_err(eof_as_corrupt)?;
            let len = u64::from_le_bytes(u64buf) as usize;
            if len != t.len() {
                return Err(corrupt("tensor length does not match architecture"));
            }
            let mut f64buf = [0u8; 8];
            for v in t.iter_mut() {
                r.read_exact(&mut f64buf).map_err(eof_as_corrupt)?;
                let x = f64::from_le_bytes(f64buf);
                if !x.is_finite() {
                    return Err(corrupt("non-finite parameter value"));
                }
                *v = E::from_f64(x);
            }
        }
    }
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(net),
        _ => Err(corrupt("trailing bytes after last tensor")),
    }
}
