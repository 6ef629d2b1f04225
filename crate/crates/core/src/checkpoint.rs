//! Binary parameter container used for backbone checkpoints and run-state
//! snapshots.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "CLPROMPT"
//! version   u32      currently 1
//! meta_len  u32      followed by meta_len bytes of UTF-8 (TOML metadata)
//! count     u32      number of parameter records, each:
//!     name_len u32, name bytes (UTF-8)
//!     rank     u32, rank × u32 dims
//!     data     numel × f64 (row-major, little-endian)
//! checksum  32 bytes SHA-256 of everything above
//! ```

use crate::error::{Error, Result};
use crate::Tensor;
use sha2::{Digest, Sha256};
use std::io::Read;
use std::path::Path;

const MAGIC: &[u8; 8] = b"CLPROMPT";
const VERSION: u32 = 1;

pub fn encode(meta: &str, params: &[(String, Tensor)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(meta.as_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data().iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

/// SHA-256 over the encoded container body (the trailing checksum itself),
/// as a lowercase hex string. Stable under identical parameter bytes.
pub fn digest_hex(meta: &str, params: &[(String, Tensor)]) -> String {
    let buf = encode(meta, params);
    let sum = &buf[buf.len() - 32..];
    sum.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write(path: &Path, meta: &str, params: &[(String, Tensor)]) -> Result<String> {
    let buf = encode(meta, params);
    let sum = buf[buf.len() - 32..]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, &buf)?;
    Ok(sum)
}

pub fn read(path: &Path) -> Result<(String, Vec<(String, Tensor)>)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn decode(buf: &[u8]) -> Result<(String, Vec<(String, Tensor)>)> {
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    if buf.len() < MAGIC.len() + 4 + 32 {
        return Err(bad("truncated container"));
    }
    let (body, checksum) = buf.split_at(buf.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != checksum {
        return Err(bad("checksum mismatch"));
    }
    let mut cur = Cursor { buf: body, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let meta_len = cur.u32()? as usize;
    let meta = String::from_utf8(cur.take(meta_len)?.to_vec())
        .map_err(|_| bad("meta is not UTF-8"))?;
    let count = cur.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| bad("name is not UTF-8"))?;
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push((name, Tensor::from_vec(shape, data)?));
    }
    if cur.pos != body.len() {
        return Err(bad("trailing bytes after parameter records"));
    }
    Ok((meta, params))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated container".to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_params() -> Vec<(String, Tensor)> {
        vec![
            (
                "w".to_string(),
                Tensor::from_vec(vec![2, 2], vec![1.0, -0.0, 3.5e-10, f64::MIN_POSITIVE]).unwrap(),
            ),
            ("b".to_string(), Tensor::from_vec(vec![2], vec![0.25, -7.0]).unwrap()),
        ]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let params = sample_params();
        let buf = encode("kind = \"test\"", &params);
        let (meta, decoded) = decode(&buf).unwrap();
        assert_eq!(meta, "kind = \"test\"");
        for ((n1, t1), (n2, t2)) in params.iter().zip(&decoded) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            assert_eq!(t1.data_bits(), t2.data_bits());
        }
    }

    #[test]
    fn corruption_is_detected() {
        let mut buf = encode("", &sample_params());
        let mid = buf.len() / 2;
        buf[mid] ^= 0xff;
        assert!(matches!(decode(&buf), Err(Error::Checkpoint(_))));
        // Truncation too.
        let buf = encode("", &sample_params());
        assert!(decode(&buf[..buf.len() - 5]).is_err());
    }

    #[test]
    fn digest_depends_only_on_content() {
        let params = sample_params();
        assert_eq!(digest_hex("m", &params), digest_hex("m", &params));
        assert_ne!(digest_hex("m", &params), digest_hex("other", &params));
    }
}
