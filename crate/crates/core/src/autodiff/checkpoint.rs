//! Binary checkpoint format.
//!
//! ```text
//! magic      8 bytes  "RGATCKPT"
//! version    u8       1
//! config     u64      hash of the run configuration
//! epoch      u64
//! metric     f64      best validation metric
//! count      u32      number of records
//! record*    name_len u32, name (utf-8), ndim u32, dims u64 x ndim, data f64 x prod(dims)
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use super::array::Array;
use super::params::ParamStore;
use crate::error::{Result, RgatError};

pub const MAGIC: &[u8; 8] = b"RGATCKPT";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub epoch: u64,
    pub best_metric: f64,
    pub params: Vec<(String, Array)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, config_hash: u64, epoch: u64, best_metric: f64) -> Self {
        Checkpoint {
            config_hash,
            epoch,
            best_metric,
            params: store.snapshot(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.best_metric.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, value) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(value.shape().len() as u32).to_le_bytes());
            for &d in value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in value.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(RgatError::Checkpoint("bad magic header".into()));
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(RgatError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let config_hash = r.u64()?;
        let epoch = r.u64()?;
        let best_metric = f64::from_bits(r.u64()?);
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| RgatError::Checkpoint("parameter name is not utf-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| r.u64().map(f64::from_bits))
                .collect::<Result<Vec<_>>>()?;
            params.push((name, Array::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(RgatError::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint {
            config_hash,
            epoch,
            best_metric,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| RgatError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| RgatError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(RgatError::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            config_hash: 0xdead_beef,
            epoch: 12,
            best_metric: 0.25,
            params: vec![
                ("w".into(), Array::matrix(2, 1, vec![1.5, -0.0]).unwrap()),
                ("b".into(), Array::scalar(f64::MIN_POSITIVE)),
            ],
        }
    }

    #[test]
    fn layout_is_fixed() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..8], b"RGATCKPT");
        assert_eq!(bytes[8], 1);
        assert_eq!(&bytes[9..17], &0xdead_beefu64.to_le_bytes());
        // first record: name "w"
        let first = 8 + 1 + 8 + 8 + 8 + 4;
        assert_eq!(&bytes[first..first + 4], &1u32.to_le_bytes());
        assert_eq!(bytes[first + 4], b'w');
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), sample());
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let mut bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes[8] = 2;
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT").is_err());
    }
}
