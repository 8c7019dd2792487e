//! `TFM1` checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     b"TFM1"
//! kind      u8 length, ASCII model-kind tag ("TFM" or "FM")
//! count     u32 number of arrays
//! manifest  per array: u32 name length, UTF-8 name, u8 dtype (1 = f64),
//!           u32 rank, rank x u64 dims
//! data      per array, in manifest order: f64 values
//! config    u32 length, UTF-8 JSON record
//! digest    32-byte SHA-256 of everything above
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Result, TfmError};
use crate::params::Params;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TFM1";
const DTYPE_F64: u8 = 1;
const MAX_RANK: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Tfm,
    Fm,
}

impl ModelKind {
    pub fn tag(self) -> &'static str {
        match self {
            ModelKind::Tfm => "TFM",
            ModelKind::Fm => "FM",
        }
    }

    fn from_tag(tag: &[u8]) -> Option<Self> {
        match tag {
            b"TFM" => Some(ModelKind::Tfm),
            b"FM" => Some(ModelKind::Fm),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub params: Params,
    /// Opaque JSON describing how to rebuild the model.
    pub config: String,
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let tag = ckpt.kind.tag().as_bytes();
    out.push(tag.len() as u8);
    out.extend_from_slice(tag);
    out.extend_from_slice(&len_u32(ckpt.params.len(), "array count")?.to_le_bytes());
    for (name, t) in ckpt.params.iter() {
        out.extend_from_slice(&len_u32(name.len(), "name length")?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&len_u32(t.rank(), "rank")?.to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for (_, t) in ckpt.params.iter() {
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&len_u32(ckpt.config.len(), "config length")?.to_le_bytes());
    out.extend_from_slice(ckpt.config.as_bytes());
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| TfmError::Contract(format!("{what} {n} does not fit the checkpoint format")))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, message: impl Into<String>) -> TfmError {
        TfmError::Checkpoint { offset: self.pos as u64, message: message.into() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<String> {
        let start = self.pos;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| TfmError::Checkpoint { offset: start as u64, message: format!("{what} is not UTF-8") })
    }
}

pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(TfmError::Checkpoint { offset: 0, message: "not a TFM1 checkpoint".into() });
    }
    if buf.len() < 4 + 32 {
        return Err(r.fail("truncated before digest"));
    }
    let body = buf.len() - 32;
    if Sha256::digest(&buf[..body]).as_slice() != &buf[body..] {
        return Err(TfmError::Checkpoint { offset: body as u64, message: "digest mismatch".into() });
    }
    r.buf = &buf[..body];

    let tag_len = r.u8("kind length")? as usize;
    let tag_at = r.pos;
    let tag = r.take(tag_len, "kind tag")?;
    let kind = ModelKind::from_tag(tag)
        .ok_or_else(|| TfmError::Checkpoint { offset: tag_at as u64, message: "unknown model kind".into() })?;
    let count = r.u32("array count")? as usize;
    let mut manifest = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = r.utf8(name_len, "array name")?;
        if r.u8("dtype")? != DTYPE_F64 {
            r.pos -= 1;
            return Err(r.fail(format!("unsupported dtype for `{name}`")));
        }
        let rank = r.u32("rank")?;
        if rank > MAX_RANK {
            r.pos -= 4;
            return Err(r.fail(format!("rank {rank} of `{name}` is implausible")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            let d = r.u64("dimension")?;
            shape.push(usize::try_from(d).map_err(|_| r.fail("dimension overflows"))?);
        }
        manifest.push((name, shape));
    }
    let mut entries = Vec::with_capacity(manifest.len());
    for (name, shape) in manifest {
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| r.fail(format!("size of `{name}` overflows")))?;
        let start = r.pos;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| r.fail("size overflows"))?, "array data")?;
        let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| TfmError::Checkpoint { offset: start as u64, message: format!("array `{name}`: {e}") })?;
        entries.push((name, tensor));
    }
    let config_len = r.u32("config length")? as usize;
    let config = r.utf8(config_len, "config record")?;
    if r.pos != r.buf.len() {
        return Err(r.fail("trailing bytes before digest"));
    }
    let params =
        Params::from_entries(entries).map_err(|e| TfmError::Checkpoint { offset: 0, message: e.to_string() })?;
    Ok(Checkpoint { kind, params, config })
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode(ckpt)?;
    std::fs::write(path, bytes).map_err(|e| TfmError::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| TfmError::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let params = Params::from_entries(vec![
            ("layers.0.weight".into(), Tensor::matrix(2, 3, vec![1.0, -2.5, 3.25, 0.0, 1e-300, -7.0]).unwrap()),
            ("layers.0.bias".into(), Tensor::vector(vec![0.5, 0.25, -0.125])),
            ("s".into(), Tensor::scalar(4.0)),
        ])
        .unwrap();
        Checkpoint { kind: ModelKind::Tfm, params, config: "{\"a\":1}".into() }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        assert_eq!(decode(&encode(&c).unwrap()).unwrap(), c);
        let fm = Checkpoint { kind: ModelKind::Fm, ..sample() };
        assert_eq!(decode(&encode(&fm).unwrap()).unwrap().kind, ModelKind::Fm);
    }

    #[test]
    fn encoding_is_deterministic() {
        assert_eq!(encode(&sample()).unwrap(), encode(&sample()).unwrap());
    }

    #[test]
    fn corruption_is_located() {
        let bytes = encode(&sample()).unwrap();
        let mut flipped = bytes.clone();
        flipped[20] ^= 0xff;
        match decode(&flipped) {
            Err(TfmError::Checkpoint { offset, .. }) => assert_eq!(offset as usize, bytes.len() - 32),
            other => panic!("{other:?}"),
        }
        match decode(&bytes[..bytes.len() / 2]) {
            Err(TfmError::Checkpoint { .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode(b"NOPE"), Err(TfmError::Checkpoint { offset: 0, .. })));
    }

    #[test]
    fn truncated_body_reports_offset() {
        // rebuild a valid digest over a body that ends mid-manifest
        let bytes = encode(&sample()).unwrap();
        let mut body = bytes[..12].to_vec();
        let digest = Sha256::digest(&body);
        body.extend_from_slice(&digest);
        match decode(&body) {
            Err(TfmError::Checkpoint { offset, message }) => {
                assert_eq!(offset, 12);
                assert!(message.contains("truncated"));
            }
            other => panic!("{other:?}"),
        }
    }
}
