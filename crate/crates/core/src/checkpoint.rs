//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "BGL1"            4-byte magic
//! version           u8 (currently 1)
//! config_len        u32, then config_len bytes of UTF-8 "key=value\n" lines
//! tensor_count      u32
//! per tensor:
//!   name_len u32, name bytes
//!   rank u32, dims u32 x rank
//!   data f32 x prod(dims)
//! ```

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"BGL1";
pub const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes {found:?} (expected \"BGL1\")")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    Version { found: u8 },
    #[error("checkpoint truncated while reading {what}")]
    Truncated { what: String },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    /// Ordered key=value pairs.
    pub config: Vec<(String, String)>,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        let mut cfg = String::new();
        for (k, v) in &self.config {
            cfg.push_str(k);
            cfg.push('=');
            cfg.push_str(v);
            cfg.push('\n');
        }
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for &d in &t.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic {
                found: magic.to_vec(),
            });
        }
        let version = r.take(1, "version")?[0];
        if version != VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let cfg_len = r.u32("config length")? as usize;
        let cfg = std::str::from_utf8(r.take(cfg_len, "config block")?)
            .map_err(|_| CheckpointError::Malformed("config block is not UTF-8".into()))?;
        let mut config = Vec::new();
        for line in cfg.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CheckpointError::Malformed(format!("config line {line:?}")))?;
            config.push((k.to_string(), v.to_string()));
        }
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count);
        for i in 0..count {
            let what = |field: &str| format!("tensor #{i} {field}");
            let name_len = r.u32(&what("name length"))? as usize;
            let name = std::str::from_utf8(r.take(name_len, &what("name"))?)
                .map_err(|_| CheckpointError::Malformed(what("name is not UTF-8")))?
                .to_string();
            let rank = r.u32(&format!("tensor {name} rank"))? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32(&format!("tensor {name} dims"))? as usize);
            }
            let numel: usize = dims.iter().product();
            let raw = r.take(numel * 4, &format!("tensor {name} data"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(TensorRecord { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { config, tensors })
    }

    /// Writes via a temporary file and rename so readers never see a partial file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        let io = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        f.sync_all().map_err(io)?;
        drop(f);
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated {
                what: what.to_string(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            config: vec![("d_model".into(), "8".into()), ("note".into(), "a=b".into())],
            tensors: vec![
                TensorRecord {
                    name: "w".into(),
                    dims: vec![2, 3],
                    data: vec![1.0, -0.5, f32::MIN_POSITIVE, 3.25, 0.0, -0.0],
                },
                TensorRecord {
                    name: "b".into(),
                    dims: vec![3],
                    data: vec![0.1, 0.2, 0.3],
                },
            ],
        }
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.get("note"), Some("a=b"));
        let bits = |c: &Checkpoint| -> Vec<u32> {
            c.tensors.iter().flat_map(|t| t.data.iter().map(|v| v.to_bits())).collect()
        };
        assert_eq!(bits(&back), bits(&c));
        assert_eq!(back.config, c.config);
    }

    #[test]
    fn distinct_errors() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::BadMagic { .. })
        ));

        let mut bytes = sample().to_bytes();
        bytes[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::Version { found: 9 })
        ));

        let bytes = sample().to_bytes();
        let cut = &bytes[..bytes.len() - 6];
        match Checkpoint::from_bytes(cut) {
            Err(CheckpointError::Truncated { what }) => assert!(what.contains("tensor b"), "{what}"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..2]),
            Err(CheckpointError::Truncated { .. })
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        sample().save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), sample());
        assert!(!p.with_extension("tmp").exists());
    }
}
