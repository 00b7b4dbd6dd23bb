//! Flat binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "GLNC1"
//! repeated until EOF:
//!     u32 name length, name bytes (UTF-8)
//!     u32 rank, rank × u64 dims
//!     product(dims) × f64 values
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"GLNC1";

pub fn write_tensors<W: Write>(mut out: W, tensors: &[(String, &Tensor)]) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    for (name, t) in tensors {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()
}

pub fn save(path: &Path, tensors: &[(String, &Tensor)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_tensors(BufWriter::new(file), tensors).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file).read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    parse(&bytes)
}

pub fn parse(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Format { offset: 0, detail: "missing GLNC1 magic".into() });
    }
    let mut out = Vec::new();
    while cur.pos < bytes.len() {
        let name_len = cur.u32("name length")? as usize;
        let start = cur.pos;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| Error::Format { offset: start as u64, detail: "tensor name is not UTF-8".into() })?
            .to_string();
        let rank = cur.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64("dimension")? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| Error::Format {
                offset: cur.pos as u64,
                detail: format!("implausible shape {shape:?} for {name}"),
            })?;
        let raw = cur.take(count * 8, "values")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        let t = Tensor::new(shape, data)
            .map_err(|e| Error::Format { offset: cur.pos as u64, detail: format!("{name}: {e}") })?;
        out.push((name, t));
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format { offset: self.pos as u64, detail: format!("truncated while reading {what}") });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn encode(tensors: &[(String, Tensor)]) -> Vec<u8> {
        let refs: Vec<(String, &Tensor)> = tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
        let mut buf = Vec::new();
        write_tensors(&mut buf, &refs).unwrap();
        buf
    }

    #[test]
    fn layout_is_fixed() {
        let t = Tensor::vector(vec![1.5]).unwrap();
        let buf = encode(&[("w".into(), t)]);
        let mut expected = b"GLNC1".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.push(b'w');
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u64.to_le_bytes());
        expected.extend(1.5f64.to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(parse(b"GLNC2"), Err(Error::Format { offset: 0, .. })));
        let t = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let buf = encode(&[("x".into(), t)]);
        match parse(&buf[..buf.len() - 3]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 5 + 4 + 1 + 4 + 8),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            records in prop::collection::vec(
                ("[a-z.0-9]{1,12}", prop::collection::vec(1usize..4, 0..3), any::<u64>()),
                0..5,
            )
        ) {
            let tensors: Vec<(String, Tensor)> = records
                .into_iter()
                .map(|(name, shape, bits)| {
                    let n: usize = shape.iter().product();
                    let data = (0..n as u64).map(|i| f64::from_bits(bits.wrapping_add(i.wrapping_mul(0x9e37_79b9)))).collect();
                    (name, Tensor::new(shape, data).unwrap())
                })
                .collect();
            let back = parse(&encode(&tensors)).unwrap();
            prop_assert_eq!(back.len(), tensors.len());
            for ((n1, t1), (n2, t2)) in tensors.iter().zip(&back) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(t1.shape(), t2.shape());
                let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
                let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(b1, b2);
            }
        }
    }
}
