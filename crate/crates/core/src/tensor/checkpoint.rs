//! Binary checkpoint format.
//!
//! ```text
//! magic   "S2TPV01"                      7 bytes
//! count   u32
//! entry*  name_len u32 | name utf-8 | dtype u8 | rank u32 | extents u64*rank
//! data*   raw little-endian buffers, in header order
//! ```

use std::io::{Read, Write};

use super::{DType, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"S2TPV01";

/// One named tensor as stored on disk, widened to `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub dtype: DType,
    pub tensor: Tensor<f64>,
}

pub fn write_checkpoint<T: Real, W: Write>(store: &ParamStore<T>, mut w: W) -> std::io::Result<()> {
    let mut header = Vec::new();
    header.extend_from_slice(CHECKPOINT_MAGIC);
    header.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        let name = p.name.as_bytes();
        header.extend_from_slice(&(name.len() as u32).to_le_bytes());
        header.extend_from_slice(name);
        header.push(T::DTYPE.code());
        header.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &e in p.value.shape() {
            header.extend_from_slice(&(e as u64).to_le_bytes());
        }
    }
    w.write_all(&header)?;
    for (_, p) in store.iter() {
        let mut buf = Vec::with_capacity(p.value.numel() * T::DTYPE.size());
        for &x in p.value.data() {
            buf.extend_from_slice(&x.to_le_bytes_vec());
        }
        w.write_all(&buf)?;
    }
    w.flush()
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<CheckpointEntry>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::Format(format!("checkpoint read failed: {e}")))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let count = cur.u32()? as usize;
    let mut headers = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Format("checkpoint name is not utf-8".into()))?
            .to_string();
        let code = cur.take(1)?[0];
        let dtype = DType::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))?;
        let rank = cur.u32()? as usize;
        let shape = (0..rank).map(|_| cur.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        headers.push((name, dtype, shape));
    }
    let mut out = Vec::with_capacity(headers.len());
    for (name, dtype, shape) in headers {
        let n: usize = shape.iter().product();
        let raw = cur.take(n * dtype.size())?;
        let data: Vec<f64> = match dtype {
            DType::F64 => raw.chunks_exact(8).map(f64::from_le_slice).collect(),
            DType::F32 => raw.chunks_exact(4).map(|c| f32::from_le_slice(c) as f64).collect(),
        };
        out.push(CheckpointEntry { name, dtype, tensor: Tensor::new(&shape, data)? });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint data".into()));
    }
    Ok(out)
}

impl<T: Real> ParamStore<T> {
    /// Overwrites parameters from checkpoint entries. Every parameter must be
    /// present with a matching shape; unknown entries are an error.
    pub fn load_entries(&mut self, entries: &[CheckpointEntry]) -> Result<()> {
        if entries.len() != self.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                entries.len(),
                self.len()
            )));
        }
        for e in entries {
            self.assign(&e.name, e.tensor.cast())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.register("a.weight", Tensor::from_f64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.5]).unwrap()).unwrap();
        s.register("b", Tensor::scalar(-0.25)).unwrap();
        s
    }

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        write_checkpoint(&store(), &mut buf).unwrap();
        assert_eq!(&buf[..7], b"S2TPV01");
        assert_eq!(u32::from_le_bytes(buf[7..11].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(buf[11..15].try_into().unwrap()), 8);
        assert_eq!(&buf[15..23], b"a.weight");
        assert_eq!(buf[23], 0);
        assert_eq!(u32::from_le_bytes(buf[24..28].try_into().unwrap()), 2);
        // header: magic + count + 2 entries, then 7 f64 values
        let header = 7 + 4 + (4 + 8 + 1 + 4 + 16) + (4 + 1 + 1 + 4);
        assert_eq!(buf.len(), header + 7 * 8);
    }

    #[test]
    fn round_trip_and_f32() {
        let s = store();
        let mut buf = Vec::new();
        write_checkpoint(&s, &mut buf).unwrap();
        let entries = read_checkpoint(&buf[..]).unwrap();
        let mut s2 = store();
        s2.iter_mut().for_each(|p| p.value = Tensor::zeros(p.value.shape()));
        s2.load_entries(&entries).unwrap();
        for ((_, a), (_, b)) in s.iter().zip(s2.iter()) {
            assert_eq!(a.value, b.value);
        }

        let s32: ParamStore<f32> = s.cast();
        let mut buf = Vec::new();
        write_checkpoint(&s32, &mut buf).unwrap();
        let entries = read_checkpoint(&buf[..]).unwrap();
        assert!(entries.iter().all(|e| e.dtype == DType::F32));
        assert_eq!(entries[0].tensor.data()[5], 6.5);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let mut buf = Vec::new();
        write_checkpoint(&store(), &mut buf).unwrap();
        assert!(read_checkpoint(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&bad[..]).is_err());
        let mut extra = buf;
        extra.push(0);
        assert!(read_checkpoint(&extra[..]).is_err());
    }
}
