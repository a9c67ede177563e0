//! Versioned binary container for named f32 parameter blocks, shared by
//! checkpoints and inversion artifacts, plus the JSON sidecar written
//! beside each file.
//!
//! Layout (little endian):
//! `"TVCK"`, format version `u32`, metadata length `u32`, metadata JSON,
//! block count `u32`, then per block: name length `u16`, UTF-8 name, rank
//! `u8`, dims as `u64`, values as `f32`.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::Block;

pub const MAGIC: &[u8; 4] = b"TVCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub blocks: Vec<Block>,
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for b in &self.blocks {
            let expected: usize = b.shape.iter().product();
            if expected != b.data.len() || b.name.len() > u16::MAX as usize || b.shape.len() > u8::MAX as usize {
                return Err(Error::Format(format!("block {} is inconsistent", b.name)));
            }
            out.extend_from_slice(&(b.name.len() as u16).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            out.push(b.shape.len() as u8);
            for &d in &b.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in &b.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a TVCK container".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "container version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let meta_len = read_u32(&mut r)? as usize;
        let meta: serde_json::Value = serde_json::from_slice(take(&mut r, meta_len)?)?;
        let n = read_u32(&mut r)? as usize;
        let mut blocks = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let mut len = [0u8; 2];
            read_exact(&mut r, &mut len)?;
            let name = std::str::from_utf8(take(&mut r, u16::from_le_bytes(len) as usize)?)
                .map_err(|_| Error::Format("block name is not UTF-8".into()))?
                .to_string();
            let mut rank = [0u8; 1];
            read_exact(&mut r, &mut rank)?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                let mut d = [0u8; 8];
                read_exact(&mut r, &mut d)?;
                shape.push(u64::from_le_bytes(d) as usize);
            }
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|c| c.checked_mul(4).is_some_and(|b| b <= r.len()))
                .ok_or_else(|| Error::Format(format!("block {name} is truncated")))?;
            let raw = take(&mut r, count * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            blocks.push(Block { name, shape, data });
        }
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { meta, blocks })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

fn read_exact(r: &mut &[u8], out: &mut [u8]) -> Result<()> {
    let src = take(r, out.len())?;
    out.copy_from_slice(src);
    Ok(())
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::Format("unexpected end of container".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

/// Path of the JSON sidecar for a container file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

pub fn write_sidecar<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(sidecar_path(path), serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Hex SHA-256 of the canonical JSON form of `value`.
pub fn json_hash<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(&v)?)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Container {
        Container {
            meta: serde_json::json!({"kind": "test", "n": 3}),
            blocks: vec![
                Block {
                    name: "a.w".into(),
                    shape: vec![2, 3],
                    data: vec![1.0, -2.0, 3.5, 0.0, f32::MIN_POSITIVE, 7.0],
                },
                Block {
                    name: "b".into(),
                    shape: vec![],
                    data: vec![0.25],
                },
            ],
        }
    }

    #[test]
    fn round_trips_through_bytes() {
        let c = sample();
        assert_eq!(Container::from_bytes(&c.to_bytes().unwrap()).unwrap(), c);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Container::from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Container::from_bytes(&bad), Err(Error::Format(_))));
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(Container::from_bytes(&long).is_err());
    }

    #[test]
    fn sidecar_sits_next_to_the_file() {
        assert_eq!(
            sidecar_path(Path::new("run/model.tvck")),
            PathBuf::from("run/model.tvck.json")
        );
    }

    proptest! {
        #[test]
        fn arbitrary_blocks_round_trip(
            data in proptest::collection::vec(-1e6f32..1e6, 0..40),
            name in "[a-z.]{1,12}",
        ) {
            let c = Container {
                meta: serde_json::json!({}),
                blocks: vec![Block { name, shape: vec![data.len()], data }],
            };
            prop_assert_eq!(Container::from_bytes(&c.to_bytes().unwrap()).unwrap(), c);
        }

        #[test]
        fn truncation_never_panics(cut in 0usize..200) {
            let bytes = sample().to_bytes().unwrap();
            let cut = cut.min(bytes.len() - 1);
            prop_assert!(Container::from_bytes(&bytes[..cut]).is_err());
        }
    }
}
