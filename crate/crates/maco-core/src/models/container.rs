//! "MACOMDL1" tensor container: a length-prefixed list of named `f32`
//! tensors, little-endian, C-row-major. Used for trained classifier weights
//! and factorization bases.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::binio::Cursor;
use crate::error::{Error, Result};
use crate::models::net::ConvNet;

const MODEL_MAGIC: &[u8; 8] = b"MACOMDL1";
const MAX_RANK: u32 = 8;
const MAX_DIM: u32 = 1 << 24;

pub type NamedTensor = (String, Vec<usize>, Vec<f64>);

pub fn save_tensors(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, dims, data) in tensors {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::invalid_input(format!(
                "tensor '{name}' dims {dims:?} do not match {} values",
                data.len()
            )));
        }
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for &d in dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<Vec<NamedTensor>> {
    let mut data = Vec::new();
    fs::File::open(path)?.read_to_end(&mut data)?;
    let mut cur = Cursor::new(&data);
    let magic = cur.take(8, "magic")?;
    if magic != MODEL_MAGIC {
        return Err(Error::format(0, "bad magic bytes (expected MACOMDL1)"));
    }
    let count = cur.u32("tensor count")?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = cur.u32("name length")? as usize;
        let at = cur.offset as u64;
        let name = String::from_utf8(cur.take(name_len, "name")?.to_vec())
            .map_err(|_| Error::format(at, "tensor name is not UTF-8"))?;
        let rank = cur.u32("rank")?;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::format(cur.offset as u64 - 4, format!("bad rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        let mut total: u64 = 1;
        for _ in 0..rank {
            let d = cur.u32("dimension")?;
            if d == 0 || d > MAX_DIM {
                return Err(Error::format(
                    cur.offset as u64 - 4,
                    format!("dimension overflow: {d}"),
                ));
            }
            total *= d as u64;
            dims.push(d as usize);
        }
        if total > (MAX_DIM as u64) * 64 {
            return Err(Error::format(cur.offset as u64, "tensor payload too large"));
        }
        let payload = cur.take(total as usize * 4, "tensor payload")?;
        let values: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        out.push((name, dims, values));
    }
    if cur.offset != data.len() {
        return Err(Error::format(
            cur.offset as u64,
            format!("{} trailing bytes after last tensor", data.len() - cur.offset),
        ));
    }
    Ok(out)
}

/// Persist classifier weights (quantized to f32).
pub fn save_model(net: &ConvNet, path: &Path) -> Result<()> {
    save_tensors(path, &net.named_tensors())
}

pub fn load_model(path: &Path) -> Result<ConvNet> {
    let tensors = load_tensors(path)?;
    ConvNet::from_named_tensors(&tensors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip_preserves_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.mdl");
        let tensors = vec![
            ("a".to_string(), vec![2, 3], vec![1.0, 2.5, -3.0, 0.0, 0.125, 7.0]),
            ("b".to_string(), vec![4], vec![0.1f32 as f64, 0.2f32 as f64, 0.3f32 as f64, 0.4f32 as f64]),
        ];
        save_tensors(&path, &tensors).unwrap();
        let back = load_tensors(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "a");
        assert_eq!(back[0].1, vec![2, 3]);
        assert_eq!(back[1].2, tensors[1].2);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.mdl");
        fs::write(&path, b"WRONGMAG\x00\x00\x00\x00").unwrap();
        assert!(matches!(load_tensors(&path), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn truncation_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.mdl");
        save_tensors(&path, &[("x".to_string(), vec![8], vec![1.0; 8])]).unwrap();
        let data = fs::read(&path).unwrap();
        fs::write(&path, &data[..data.len() - 5]).unwrap();
        match load_tensors(&path) {
            Err(Error::Format { message, .. }) => assert!(message.contains("truncated")),
            other => panic!("expected truncation, got {other:?}"),
        }
    }
}
