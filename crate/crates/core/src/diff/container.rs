//! ERMF checkpoint container: `"ERMF"`, version (u32), then one record per
//! tensor until end of input. A record is name length (u32), UTF-8 name,
//! rank (u32), extents (u64 each) and the values as little-endian f64.

use super::tensor::{ParamStore, ParamTensor, MAX_RANK};
use super::DiffError;
use std::io::{self, Read, Write};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"ERMF";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not an ERMF container")]
    BadMagic,
    #[error("unsupported container version {0}")]
    Version(u32),
    #[error("truncated record for tensor #{0}")]
    Truncated(usize),
    #[error("tensor #{index}: {reason}")]
    BadRecord { index: usize, reason: String },
    #[error(transparent)]
    Tensor(#[from] DiffError),
}

pub fn write_store<W: Write>(store: &ParamStore, out: &mut W) -> io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    for (_, t) in store.iter() {
        let name = t.name().as_bytes();
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name)?;
        out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &e in t.shape() {
            out.write_all(&(e as u64).to_le_bytes())?;
        }
        for v in t.values() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn to_bytes(store: &ParamStore) -> Vec<u8> {
    let mut buf = Vec::new();
    write_store(store, &mut buf).expect("writing to memory cannot fail");
    buf
}

/// Reads a whole container. Every tensor comes back trainable.
pub fn read_store<R: Read>(input: &mut R) -> Result<ParamStore, ContainerError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ParamStore, ContainerError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4) != Some(MAGIC.as_slice()) {
        return Err(ContainerError::BadMagic);
    }
    let version = c.u32().ok_or(ContainerError::BadMagic)?;
    if version != VERSION {
        return Err(ContainerError::Version(version));
    }
    let mut store = ParamStore::new();
    let mut index = 0;
    while c.pos < bytes.len() {
        let name_len = c.u32().ok_or(ContainerError::Truncated(index))? as usize;
        let name = c.take(name_len).ok_or(ContainerError::Truncated(index))?;
        let name = std::str::from_utf8(name).map_err(|e| ContainerError::BadRecord {
            index,
            reason: e.to_string(),
        })?;
        let rank = c.u32().ok_or(ContainerError::Truncated(index))? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(ContainerError::BadRecord {
                index,
                reason: format!("rank {rank}"),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64().ok_or(ContainerError::Truncated(index))? as usize);
        }
        let n = shape.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e)).ok_or(ContainerError::BadRecord {
            index,
            reason: "extent overflow".into(),
        })?;
        let payload = c.take(n.checked_mul(8).ok_or(ContainerError::Truncated(index))?).ok_or(ContainerError::Truncated(index))?;
        let values = payload.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        store.add(ParamTensor::new(name, &shape, values)?);
        index += 1;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        s.add(ParamTensor::new("field.grid", &[2, 3], vec![1.0, -2.5, 3.0, 1e-300, 0.0, -0.0]).unwrap());
        s.add(ParamTensor::new("gauge.offset0", &[1], vec![std::f64::consts::PI]).unwrap());
        s
    }

    #[test]
    fn round_trip_is_exact() {
        let s = sample();
        let bytes = to_bytes(&s);
        assert_eq!(&bytes[..8], b"ERMF\x01\0\0\0");
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        for ((_, a), (_, b)) in s.iter().zip(back.iter()) {
            assert_eq!(a.name(), b.name());
            assert_eq!(a.shape(), b.shape());
            let (va, vb): (Vec<u64>, Vec<u64>) = (
                a.values().iter().map(|v| v.to_bits()).collect(),
                b.values().iter().map(|v| v.to_bits()).collect(),
            );
            assert_eq!(va, vb);
        }
    }

    #[test]
    fn damaged_input_is_rejected() {
        let bytes = to_bytes(&sample());
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 3]), Err(ContainerError::Truncated(1))));
        assert!(matches!(from_bytes(b"ERMX\x01\0\0\0"), Err(ContainerError::BadMagic)));
        assert!(matches!(from_bytes(b"ERMF\x07\0\0\0"), Err(ContainerError::Version(7))));
        assert_eq!(from_bytes(b"ERMF\x01\0\0\0").unwrap().len(), 0);
    }
}
