//! Binary spectrogram container: `"MELS"`, version, band count and frame
//! count as little-endian `u32`, then row-major little-endian `f32` values.

use std::io::{Read, Write};
use std::path::Path;

use tvstyle_core::MelSpectrogram;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MELS";
pub const VERSION: u32 = 1;

pub fn encode(m: &MelSpectrogram) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * m.values().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(m.n_mels() as u32).to_le_bytes());
    out.extend_from_slice(&(m.n_frames() as u32).to_le_bytes());
    for v in m.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<MelSpectrogram> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing MELS header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported spectrogram version {version}")));
    }
    let (n_mels, n_frames) = (word(8) as usize, word(12) as usize);
    let body = &bytes[16..];
    if body.len() != 4 * n_mels * n_frames {
        return Err(Error::Format(format!(
            "expected {} payload bytes for {n_mels}x{n_frames}, found {}",
            4 * n_mels * n_frames,
            body.len()
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(MelSpectrogram::new(n_mels, n_frames, values)?)
}

pub fn write(path: &Path, m: &MelSpectrogram) -> Result<()> {
    std::fs::File::create(path)?.write_all(&encode(m))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<MelSpectrogram> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
