//! Binary parameter checkpoints.
//!
//! Layout: magic `LWND`, `u32` format version, then one record per parameter
//! until end of file: `u32` name length, UTF-8 name, `u32` rank, `u64` per
//! dimension, little-endian `f64` payload. All integers are little-endian.

use std::fs;
use std::path::Path;

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LWND";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + params.numel() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                detail: format!("unexpected end of file reading {what} at byte {}", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<ParamSet> {
    let mut r = Reader { buf: bytes, pos: 0, path };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: "bad magic bytes".into(),
        });
    }
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let mut params = ParamSet::new();
    while r.pos < bytes.len() {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|e| Error::Truncated {
                path: path.to_path_buf(),
                detail: format!("parameter name is not UTF-8: {e}"),
            })?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dimension")? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = r.take(n.checked_mul(8).unwrap_or(usize::MAX), "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if params.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::InvariantViolation(format!("duplicate parameter {name}")));
        }
    }
    Ok(params)
}

pub fn save_params(path: impl AsRef<Path>, params: &ParamSet) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ParamSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("a.l0.weight", Tensor::new(vec![2, 3], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5, 1e300, -7.25]).unwrap());
        p.insert("a.l0.bias", Tensor::new(vec![2], vec![0.1, 0.2]).unwrap());
        p.insert("scalar", Tensor::new(vec![], vec![42.0]).unwrap());
        p
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let p = sample();
        let back = decode(&encode(&p), Path::new("mem")).unwrap();
        for ((ka, ta), (kb, tb)) in p.iter().zip(back.iter()) {
            assert_eq!(ka, kb);
            assert_eq!(ta.shape(), tb.shape());
            let bits_a: Vec<u64> = ta.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = tb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&ParamSet::new());
        assert_eq!(&bytes[..4], b"LWND");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(bytes.len(), 8);
    }

    #[test]
    fn truncated_and_version_errors_are_distinct() {
        let bytes = encode(&sample());
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(decode(cut, Path::new("x")), Err(Error::Truncated { .. })));
        let mut bumped = bytes.clone();
        bumped[4] = 9;
        assert!(matches!(
            decode(&bumped, Path::new("x")),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
    }
}
