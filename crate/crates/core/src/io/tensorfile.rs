//! Named-array container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic   "F2DT"
//! version u16
//! count   u32
//! count x { name_len u32, name utf-8, rank u32, dims rank x u32, payload f64 x prod(dims) }
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"F2DT";
pub const VERSION: u16 = 1;

pub fn encode_tensors(arrays: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let payload: usize = arrays.iter().map(|(n, t)| 12 + n.len() + 4 * t.shape().len() + 8 * t.len()).sum();
    let mut out = Vec::with_capacity(10 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32_of(arrays.len(), "array count")?.to_le_bytes());
    for (name, t) in arrays {
        out.extend_from_slice(&u32_of(name.len(), "name length")?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&u32_of(t.shape().len(), "rank")?.to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&u32_of(d, "dimension")?.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, ctx: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated {ctx}: need {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, ctx: &str) -> Result<u32> {
        let b = self.take(4, ctx)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "header")?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected \"F2DT\"")));
    }
    let vb = r.take(2, "header")?;
    let version = u16::from_le_bytes([vb[0], vb[1]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = r.u32("header")? as usize;
    let mut out: Vec<(String, Tensor)> = Vec::with_capacity(count.min(1024));
    for idx in 0..count {
        let ctx = format!("array #{idx}");
        let name_len = r.u32(&ctx)? as usize;
        let name = std::str::from_utf8(r.take(name_len, &ctx)?)
            .map_err(|_| Error::Format(format!("{ctx}: name is not UTF-8")))?
            .to_string();
        let ctx = format!("array `{name}`");
        if out.iter().any(|(n, _)| *n == name) {
            return Err(Error::Format(format!("duplicate {ctx}")));
        }
        let rank = r.u32(&ctx)? as usize;
        let mut dims = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            dims.push(r.u32(&ctx)? as usize);
        }
        let len = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8).map(|_| n))
            .ok_or_else(|| Error::Format(format!("{ctx}: dims {dims:?} overflow")))?;
        let raw = r.take(len * 8, &format!("payload of {ctx}"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::new(dims, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn write_tensor_file(path: impl AsRef<Path>, arrays: &[(String, Tensor)]) -> Result<()> {
    let bytes = encode_tensors(arrays)?;
    std::fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path.as_ref(), e))
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    decode_tensors(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.as_ref().display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Vec<(String, Tensor)> {
        vec![
            ("a".to_string(), Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE, 0.0, -0.0]).unwrap()),
            ("scalar".to_string(), Tensor::scalar(7.0)),
        ]
    }

    #[test]
    fn header_layout() {
        let b = encode_tensors(&sample()).unwrap();
        assert_eq!(&b[0..4], b"F2DT");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(&b[6..10], &[2, 0, 0, 0]);
        assert_eq!(&b[10..14], &[1, 0, 0, 0]);
        assert_eq!(b[14], b'a');
    }

    #[test]
    fn bad_magic() {
        let mut b = encode_tensors(&sample()).unwrap();
        b[0] = b'X';
        assert!(decode_tensors(&b).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn truncation_names_the_array() {
        let b = encode_tensors(&sample()).unwrap();
        let err = decode_tensors(&b[..b.len() - 3]).unwrap_err().to_string();
        assert!(err.contains("scalar"), "{err}");
        let err = decode_tensors(&b[..40]).unwrap_err().to_string();
        assert!(err.contains("`a`"), "{err}");
    }

    #[test]
    fn dim_overflow() {
        let mut b = Vec::new();
        b.extend_from_slice(b"F2DT");
        b.extend_from_slice(&1u16.to_le_bytes());
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&1u32.to_le_bytes());
        b.push(b'x');
        b.extend_from_slice(&4u32.to_le_bytes());
        for _ in 0..4 {
            b.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        let err = decode_tensors(&b).unwrap_err().to_string();
        assert!(err.contains("overflow") || err.contains("truncated"), "{err}");
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            arrays in proptest::collection::vec(
                (proptest::collection::vec(1usize..4, 0..4), any::<u64>()), 0..5)
        ) {
            let named: Vec<(String, Tensor)> = arrays
                .iter()
                .enumerate()
                .map(|(i, (dims, seed))| {
                    let n: usize = dims.iter().product();
                    let data = (0..n).map(|k| f64::from_bits(seed.wrapping_mul(k as u64 + 1) ^ 0x3ff0_0000_0000_0000)).collect();
                    (format!("t{i}"), Tensor::new(dims.clone(), data).unwrap())
                })
                .collect();
            let bytes = encode_tensors(&named).unwrap();
            let back = decode_tensors(&bytes).unwrap();
            prop_assert_eq!(back.len(), named.len());
            for ((na, ta), (nb, tb)) in named.iter().zip(&back) {
                prop_assert_eq!(na, nb);
                prop_assert_eq!(ta.shape(), tb.shape());
                let bits_a: Vec<u64> = ta.data().iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u64> = tb.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
            prop_assert_eq!(encode_tensors(&back).unwrap(), bytes);
        }
    }
}
