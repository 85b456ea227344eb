//! Flat binary container of named tensors.
//!
//! Layout (all integers little-endian): magic `PCNT`, version u32 (= 1),
//! tensor count u64; then per tensor: name length u32 + UTF-8 name, rank u32,
//! extents as u64 each, dtype tag u8 (0 = f32, 1 = f64), raw element data.

use std::fs;
use std::path::Path;

use super::{DType, Element, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PCNT";
const VERSION: u32 = 1;

pub fn save<E: Element>(path: &Path, tensors: &[(&str, &Tensor<E>)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        buf.push(E::DTYPE.tag());
        for &v in t.data().iter() {
            v.write_le(&mut buf);
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {} at byte {} (need {}, have {})",
                what,
                self.pos,
                n,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Loads every tensor in the container, converting element type if the file
/// was written in the other precision.
pub fn load<E: Element>(path: &Path) -> Result<Vec<(String, Tensor<E>)>> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {:?}, expected \"PCNT\"", magic)));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", version)));
    }
    let count = cur.u64("tensor count")? as usize;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|e| Error::Checkpoint(format!("tensor {} name is not UTF-8: {}", i, e)))?
            .to_string();
        let rank = cur.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64("extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let tag = cur.take(1, "dtype tag")?[0];
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| Error::Checkpoint(format!("tensor '{}': unknown dtype tag {}", name, tag)))?;
        let raw = cur.take(numel * dtype.size_bytes(), "tensor data")?;
        let data: Vec<E> = match dtype {
            d if d == E::DTYPE => raw
                .chunks_exact(d.size_bytes())
                .map(|c| E::read_le(c))
                .collect(),
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| E::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| E::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        };
        out.push((name, Tensor::from_vec(shape, data)?));
    }
    Ok(out)
}

/// Convenience lookup for a loaded container.
pub fn find<E: Element>(tensors: &[(String, Tensor<E>)], name: &str) -> Result<Tensor<E>> {
    tensors
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t.clone())
        .ok_or_else(|| Error::Checkpoint(format!("tensor '{}' not present in checkpoint", name)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_names_shapes_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pcnt");
        let a = Tensor::<f64>::from_vec(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 9.0, -0.25]).unwrap();
        let b = Tensor::<f64>::scalar(42.0);
        save(&path, &[("alpha.normal", &a), ("beta.reduce", &b)]).unwrap();
        let loaded = load::<f64>(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].0, "alpha.normal");
        assert_eq!(loaded[0].1.shape(), &[2, 3]);
        assert_eq!(loaded[0].1.to_vec(), a.to_vec());
        assert_eq!(find(&loaded, "beta.reduce").unwrap().to_vec(), vec![42.0]);
        assert!(find::<f64>(&loaded, "missing").is_err());
    }

    #[test]
    fn cross_precision_load_converts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pcnt");
        let a = Tensor::<f32>::from_vec(vec![3], vec![1.5, -2.25, 0.125]).unwrap();
        save(&path, &[("w", &a)]).unwrap();
        let loaded = load::<f64>(&path).unwrap();
        assert_eq!(loaded[0].1.to_vec(), vec![1.5, -2.25, 0.125]);
    }

    #[test]
    fn header_layout_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pcnt");
        let a = Tensor::<f32>::scalar(1.0);
        save(&path, &[("x", &a)]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"PCNT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 1); // name len
        assert_eq!(bytes[20], b'x');
        assert_eq!(u32::from_le_bytes(bytes[21..25].try_into().unwrap()), 1); // rank
        assert_eq!(u64::from_le_bytes(bytes[25..33].try_into().unwrap()), 1); // extent
        assert_eq!(bytes[33], 0); // f32 tag
        assert_eq!(bytes.len(), 34 + 4);
    }

    #[test]
    fn corrupt_files_are_rejected_with_detail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pcnt");
        std::fs::write(&path, b"NOPE").unwrap();
        let err = load::<f64>(&path).unwrap_err();
        assert!(err.to_string().contains("bad magic"));

        let a = Tensor::<f64>::scalar(7.0);
        save(&path, &[("x", &a)]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, bytes).unwrap();
        let err = load::<f64>(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }
}
