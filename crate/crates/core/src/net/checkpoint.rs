//! Checkpoint container.
//!
//! Layout (little-endian): magic `LDGCKPT1`, `u64` length + UTF-8 JSON of the
//! [`ModelConfig`], `u64` entry count, then per entry: `u64` name length, name,
//! `u64` rank, `rank × u64` dims, `f64` data. Entries are trainable parameters
//! followed by buffers (names ending in `running_mean`/`running_var`), each
//! group in name order.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{ModelConfig, ModelParams, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LDGCKPT1";

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let cfg = serde_json::to_vec(&params.config).expect("config serializes");
    put_u64(&mut out, cfg.len() as u64);
    out.extend_from_slice(&cfg);
    put_u64(&mut out, (params.params.len() + params.buffers.len()) as u64);
    for (name, t) in params.params.iter().chain(&params.buffers) {
        put_u64(&mut out, name.len() as u64);
        out.extend_from_slice(name.as_bytes());
        put_u64(&mut out, t.shape.len() as u64);
        for &d in &t.shape {
            put_u64(&mut out, d as u64);
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::Format {
                offset: self.at as u64,
                reason: format!("checkpoint truncated, wanted {n} more bytes"),
            });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let at = self.at;
        let v = self.u64()?;
        if v > self.bytes.len() as u64 {
            return Err(Error::Format {
                offset: at as u64,
                reason: format!("implausible length {v}"),
            });
        }
        Ok(v as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: "bad magic, expected LDGCKPT1".into(),
        });
    }
    let n = r.len()?;
    let config: ModelConfig = serde_json::from_slice(r.take(n)?).map_err(|e| Error::Format {
        offset: 16,
        reason: format!("config block: {e}"),
    })?;
    let entries = r.len()?;
    let mut params = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    for _ in 0..entries {
        let n = r.len()?;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Format {
            offset: r.at as u64,
            reason: "entry name is not UTF-8".into(),
        })?;
        let rank = r.len()?;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Format {
            offset: r.at as u64,
            reason: "tensor too large".into(),
        })?)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = Tensor { shape, data };
        if name.ends_with(".running_mean") || name.ends_with(".running_var") {
            buffers.insert(name, t);
        } else {
            params.insert(name, t);
        }
    }
    if r.at != bytes.len() {
        return Err(Error::Format {
            offset: r.at as u64,
            reason: "trailing bytes after last entry".into(),
        });
    }
    let p = ModelParams {
        config,
        params,
        buffers,
    };
    p.config.validate()?;
    p.check_shapes()?;
    Ok(p)
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    decode_checkpoint(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut p = ModelParams::init(&ModelConfig::default(), 11).unwrap();
        p.buffers.get_mut("enc0.bn.running_mean").unwrap().data[0] = 0.25;
        let bytes = encode_checkpoint(&p);
        assert!(bytes.starts_with(CHECKPOINT_MAGIC));
        assert_eq!(decode_checkpoint(&bytes).unwrap(), p);
    }

    #[test]
    fn rejects_damage() {
        let p = ModelParams::init(&ModelConfig::default(), 11).unwrap();
        let bytes = encode_checkpoint(&p);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format { offset: 0, .. })));
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
    }
}
