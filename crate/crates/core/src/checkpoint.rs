//! Binary checkpoint files.
//!
//! Layout, all integers little-endian, no padding:
//!
//! ```text
//! magic "LAWA" | version u32 = 1 | epoch u64 | step u64 | tensor_count u32
//! per tensor: name_len u32 | name utf-8 | dtype u8 (0 = f32, 1 = f64)
//!             | rank u32 | dims rank x u64 | row-major element bytes
//! ```
//!
//! Trailing bytes after the last tensor are rejected.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::param::{Checkpoint, DType, ParameterSet, Tensor, TensorData};

pub const MAGIC: [u8; 4] = *b"LAWA";
pub const VERSION: u32 = 1;

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut buf = Vec::with_capacity(32 + ckpt.params.num_elements() * 8);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&ckpt.epoch.to_le_bytes());
    buf.extend_from_slice(&ckpt.step.to_le_bytes());
    buf.extend_from_slice(&(ckpt.params.len() as u32).to_le_bytes());
    for (name, tensor) in ckpt.params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(tensor.dtype().code());
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match tensor.data() {
            TensorData::F32(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::Format {
            offset: offset as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(self.pos, format!("truncated while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(r.err(0, "bad magic"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.err(4, format!("unsupported version {version}")));
    }
    let epoch = r.u64("epoch")?;
    let step = r.u64("step")?;
    let count = r.u32("tensor count")?;

    let mut entries = Vec::new();
    let mut set_dtype = None;
    for _ in 0..count {
        let name_at = r.pos;
        let name_len = r.u32("name length")? as usize;
        let name_bytes = r.take(name_len, "name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| r.err(name_at + 4, "name is not utf-8"))?
            .to_owned();
        if name.is_empty() || entries.iter().any(|(n, _): &(String, Tensor)| *n == name) {
            return Err(r.err(name_at, format!("empty or duplicate name `{name}`")));
        }
        let dtype_at = r.pos;
        let code = r.take(1, "dtype")?[0];
        let dtype = DType::from_code(code).ok_or_else(|| r.err(dtype_at, format!("unknown dtype code {code}")))?;
        if *set_dtype.get_or_insert(dtype) != dtype {
            return Err(r.err(dtype_at, "mixed element types"));
        }
        let rank = r.u32("rank")? as usize;
        let dims_at = r.pos;
        let mut shape = Vec::with_capacity(rank.min(64));
        for _ in 0..rank {
            let d = r.u64("dimension")?;
            shape.push(usize::try_from(d).map_err(|_| r.err(dims_at, "dimension too large"))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.size()).map(|b| (n, b)))
            .ok_or_else(|| r.err(dims_at, "tensor size overflows"))?;
        let bytes = r.take(n.1, "tensor data")?;
        let data = match dtype {
            DType::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        entries.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(r.err(r.pos, format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(Checkpoint::new(ParameterSet::new(entries)?, epoch, step))
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf)
}

/// Reads only the fixed header, returning `(epoch, step)`.
pub fn read_header(path: impl AsRef<Path>) -> Result<(u64, u64)> {
    use std::io::Read;
    let path = path.as_ref();
    let mut head = [0u8; 24];
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut got = 0;
    while got < head.len() {
        match f.read(&mut head[got..]).map_err(|e| Error::io(path, e))? {
            0 => break,
            n => got += n,
        }
    }
    let mut r = Reader {
        buf: &head[..got],
        pos: 0,
    };
    if r.take(4, "magic")? != MAGIC {
        return Err(r.err(0, "bad magic"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.err(4, format!("unsupported version {version}")));
    }
    Ok((r.u64("epoch")?, r.u64("step")?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_entry_f32() -> Checkpoint {
        let params = ParameterSet::new(vec![
            (
                "l0.weight".into(),
                Tensor::from_f32(vec![2, 2], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE]).unwrap(),
            ),
            ("l0.bias".into(), Tensor::from_f32(vec![2], vec![0.0, -0.0]).unwrap()),
        ])
        .unwrap();
        Checkpoint::new(params, 3, 120)
    }

    #[test]
    fn roundtrip_f32_pair() {
        let c = two_entry_f32();
        let back = decode(&encode(&c)).unwrap();
        assert!(back.params.bits_eq(&c.params));
        assert_eq!((back.epoch, back.step), (3, 120));
    }

    #[test]
    fn roundtrip_f64_with_empty_tensor() {
        let params = ParameterSet::new(vec![
            ("empty".into(), Tensor::from_f64(vec![0], vec![]).unwrap()),
            (
                "x".into(),
                Tensor::from_f64(vec![1, 3], vec![1e-300, 2.0, -7.0]).unwrap(),
            ),
        ])
        .unwrap();
        let c = Checkpoint::new(params, 0, 0);
        let back = decode(&encode(&c)).unwrap();
        assert!(back.params.bits_eq(&c.params));
        assert_eq!(back.params.tensor(0).shape(), &[0]);
    }

    #[test]
    fn exact_byte_layout() {
        let params = ParameterSet::new(vec![("a".into(), Tensor::from_f64(vec![1], vec![1.0]).unwrap())]).unwrap();
        let bytes = encode(&Checkpoint::new(params, 2, 5));
        let mut want = b"LAWA".to_vec();
        want.extend([1, 0, 0, 0]);
        want.extend(2u64.to_le_bytes());
        want.extend(5u64.to_le_bytes());
        want.extend([1, 0, 0, 0]);
        want.extend([1, 0, 0, 0, b'a', 1, 1, 0, 0, 0]);
        want.extend(1u64.to_le_bytes());
        want.extend(1.0f64.to_le_bytes());
        assert_eq!(bytes, want);
    }

    fn format_offset(r: Result<Checkpoint>) -> u64 {
        match r {
            Err(Error::Format { offset, .. }) => offset,
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let mut bytes = encode(&two_entry_f32());
        bytes[0] = b'X';
        assert_eq!(format_offset(decode(&bytes)), 0);
    }

    #[test]
    fn bad_version_truncation_and_trailing_bytes() {
        let good = encode(&two_entry_f32());
        let mut v = good.clone();
        v[4] = 2;
        assert_eq!(format_offset(decode(&v)), 4);
        let cut = &good[..good.len() - 3];
        assert!(format_offset(decode(cut)) > 28);
        let mut long = good.clone();
        long.push(0);
        assert_eq!(format_offset(decode(&long)), good.len() as u64);
        assert_eq!(format_offset(decode(&good[..2])), 0);
    }

    #[test]
    fn bad_dtype_code() {
        let mut bytes = encode(&two_entry_f32());
        // header 28 bytes, name_len 4, "l0.weight" 9
        let at = 28 + 4 + 9;
        bytes[at] = 7;
        assert_eq!(format_offset(decode(&bytes)), at as u64);
    }

    #[test]
    fn file_io_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.lawa");
        let c = two_entry_f32();
        write_checkpoint(&c, &path).unwrap();
        assert!(read_checkpoint(&path).unwrap().params.bits_eq(&c.params));
        assert_eq!(read_header(&path).unwrap(), (3, 120));
        assert!(matches!(
            read_checkpoint(dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }

    fn arb_set() -> impl Strategy<Value = ParameterSet> {
        let tensor = (prop::collection::vec(0usize..4, 0..3), any::<u64>());
        (prop::collection::vec(tensor, 0..5), any::<bool>()).prop_map(|(specs, f32s)| {
            let entries = specs
                .into_iter()
                .enumerate()
                .map(|(i, (shape, seed))| {
                    let n: usize = shape.iter().product();
                    let bits = (0..n as u64).map(|j| seed.wrapping_mul(j + 1).rotate_left(17));
                    let t = if f32s {
                        Tensor::from_f32(shape, bits.map(|b| f32::from_bits(b as u32)).collect())
                    } else {
                        Tensor::from_f64(shape, bits.map(f64::from_bits).collect())
                    };
                    (format!("t{i}.\u{3b8}"), t.unwrap())
                })
                .collect();
            ParameterSet::new(entries).unwrap()
        })
    }

    proptest! {
        #[test]
        fn roundtrip_is_bitwise(set in arb_set(), epoch in any::<u64>(), step in any::<u64>()) {
            let c = Checkpoint::new(set, epoch, step);
            let bytes = encode(&c);
            let back = decode(&bytes).unwrap();
            prop_assert!(back.params.bits_eq(&c.params));
            prop_assert_eq!((back.epoch, back.step), (epoch, step));
            prop_assert_eq!(encode(&back), bytes);
        }
    }
}
