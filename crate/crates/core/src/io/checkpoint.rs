//! Single-file model container.
//!
//! ```text
//! "MNKY" | version u16 | total length u64
//! config length u32 | config (key = value text)
//! vocab length u32  | vocab (one word per line, id order)
//! entry count u32
//! per entry: name length u16 | name | dtype u8 | rank u8 | dims u32 x rank | offset u64 | byte length u64
//! payload (little-endian f32, offsets relative to payload start)
//! CRC32 of every preceding byte, u32
//! ```
//! All integers are little-endian.

use std::path::Path;

use super::atomic_write;
use super::kv::KvMap;
use crate::encoders::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::weights::ModelWeights;

pub const MAGIC: [u8; 4] = *b"MNKY";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;
const HEADER_LEN: usize = 4 + 2 + 8;

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let config = model.config.to_kv().render();
    let vocab = model.vocab.words().join("\n");
    let mut table = Vec::new();
    let mut payload = Vec::new();
    for (name, t) in model.weights.iter() {
        let bytes = t.to_le_bytes();
        table.extend_from_slice(&(name.len() as u16).to_le_bytes());
        table.extend_from_slice(name.as_bytes());
        table.push(DTYPE_F32);
        table.push(t.rank() as u8);
        for &d in t.shape() {
            table.extend_from_slice(&(d as u32).to_le_bytes());
        }
        table.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        table.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
        payload.extend_from_slice(&bytes);
    }
    let mut body = Vec::new();
    body.extend_from_slice(&(config.len() as u32).to_le_bytes());
    body.extend_from_slice(config.as_bytes());
    body.extend_from_slice(&(vocab.len() as u32).to_le_bytes());
    body.extend_from_slice(vocab.as_bytes());
    body.extend_from_slice(&(model.weights.len() as u32).to_le_bytes());
    body.extend_from_slice(&table);
    body.extend_from_slice(&payload);

    let total = (HEADER_LEN + body.len() + 4) as u64;
    let mut out = Vec::with_capacity(total as usize);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&total.to_le_bytes());
    out.extend_from_slice(&body);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Malformed(format!("field at byte {} runs past the end", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?).map_err(|e| Error::Malformed(format!("invalid UTF-8: {e}")))
    }
}

/// Parse a container. Checks run in order: minimum length, magic, version,
/// declared length, CRC, then structure.
pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < HEADER_LEN + 4 {
        return Err(Error::Truncated {
            expected: (HEADER_LEN + 4) as u64,
            found: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let total = r.u64()?;
    if (bytes.len() as u64) < total {
        return Err(Error::Truncated {
            expected: total,
            found: bytes.len() as u64,
        });
    }
    if bytes.len() as u64 != total {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after declared length {total}",
            bytes.len() as u64 - total
        )));
    }
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::Crc { stored, computed });
    }
    let mut r = Reader {
        buf: &bytes[..body_end],
        pos: HEADER_LEN,
    };
    let config_len = r.u32()? as usize;
    let config = ModelConfig::from_kv(&KvMap::parse_text(r.str(config_len)?)?)?;
    let vocab_len = r.u32()? as usize;
    let vocab_text = r.str(vocab_len)?;
    let vocab = Vocabulary::new(vocab_text.split('\n'));
    if vocab.words().join("\n") != vocab_text {
        return Err(Error::Malformed("vocabulary has duplicate or reordered words".into()));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = r.str(name_len)?.to_string();
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Malformed(format!("`{name}` has unknown dtype {dtype}")));
        }
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let offset = r.u64()? as usize;
        let len = r.u64()? as usize;
        entries.push((name, shape, offset, len));
    }
    let payload = &bytes[r.pos..body_end];
    let mut weights = ModelWeights::new();
    let mut expected_offset = 0usize;
    for (name, shape, offset, len) in entries {
        if weights.contains(&name) {
            return Err(Error::Malformed(format!("duplicate entry `{name}`")));
        }
        let numel: usize = shape.iter().product();
        if offset != expected_offset || len != numel * 4 || offset + len > payload.len() {
            return Err(Error::Malformed(format!("entry `{name}` has inconsistent offset or length")));
        }
        expected_offset += len;
        let data = payload[offset..offset + len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        weights.insert(name, Tensor::new(&shape, data)?);
    }
    if expected_offset != payload.len() {
        return Err(Error::Malformed("payload has unreferenced bytes".into()));
    }
    Ok(Model { config, vocab, weights })
}

pub fn save(path: &Path, model: &Model) -> Result<()> {
    atomic_write(path, &to_bytes(model))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model {
        Model::random(ModelConfig::default(), 17).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = model();
        let bytes = to_bytes(&m);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.config.to_kv().render(), m.config.to_kv().render());
        assert_eq!(back.vocab, m.vocab);
        assert_eq!(back.weights.len(), m.weights.len());
        for (name, t) in m.weights.iter() {
            assert!(back.weights.get(name).unwrap().bit_eq(t), "{name}");
        }
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn distinct_errors() {
        let bytes = to_bytes(&model());

        let mut flipped = bytes.clone();
        let i = bytes.len() - 100;
        flipped[i] ^= 0x01;
        assert!(matches!(from_bytes(&flipped), Err(Error::Crc { .. })));

        let mut v99 = bytes.clone();
        v99[4..6].copy_from_slice(&99u16.to_le_bytes());
        match from_bytes(&v99) {
            Err(e @ Error::Version { found: 99, expected: 1 }) => {
                let msg = e.to_string();
                assert!(msg.contains("99") && msg.contains('1'));
            }
            other => panic!("expected version error, got {other:?}"),
        }

        assert!(matches!(from_bytes(&bytes[..bytes.len() - 10]), Err(Error::Truncated { .. })));
        assert!(matches!(from_bytes(&bytes[..8]), Err(Error::Truncated { .. })));

        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(from_bytes(&magic), Err(Error::BadMagic(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.mnky");
        let m = model();
        save(&p, &m).unwrap();
        assert_eq!(load(&p).unwrap(), m);
    }
}
