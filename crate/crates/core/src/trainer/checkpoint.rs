//! Checkpoint files (`.udac`), little-endian:
//!
//! ```text
//! "UDAC1\n" | u32 count | count × ( u16 name_len | name | u32 rank | rank × u32 dim | f64 data )
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use crate::nets::{DiscriminatorParams, GeneratorParams, NetError};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"UDAC1\n";
pub const CHECKPOINT_EXTENSION: &str = "udac";
pub const GENERATOR_PREFIX: &str = "g.";
pub const DISCRIMINATOR_PREFIX: &str = "d.";
pub const STEP_KEY: &str = "meta.step";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: bad magic, expected {expected:?}, found {found:?}")]
    BadMagic {
        path: String,
        expected: String,
        found: String,
    },
    #[error("{path}: truncated at byte {offset}, needs {needed} more")]
    Truncated { path: String, offset: usize, needed: usize },
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("checkpoint does not match the network: {0}")]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn from_networks(
        generator: &GeneratorParams,
        discriminator: Option<&DiscriminatorParams>,
        step: usize,
    ) -> Self {
        let mut tensors: Vec<(String, Tensor)> = generator
            .params()
            .named()
            .into_iter()
            .map(|(n, t)| (format!("{GENERATOR_PREFIX}{n}"), t.clone()))
            .collect();
        if let Some(d) = discriminator {
            tensors.extend(
                d.params()
                    .named()
                    .into_iter()
                    .map(|(n, t)| (format!("{DISCRIMINATOR_PREFIX}{n}"), t.clone())),
            );
        }
        tensors.push((STEP_KEY.to_string(), Tensor::scalar(step as f64)));
        Checkpoint { tensors }
    }

    /// Number of classes implied by the generator's classifier bias.
    pub fn num_classes(&self) -> Option<usize> {
        self.get(&format!("{GENERATOR_PREFIX}cls.bias"))
            .and_then(|t| t.shape().first().copied())
    }

    pub fn step(&self) -> Option<usize> {
        self.get(STEP_KEY).map(|t| t.item() as usize)
    }

    pub fn generator(&self, num_classes: usize) -> Result<GeneratorParams, CheckpointError> {
        Ok(GeneratorParams::from_lookup(num_classes, |n| {
            self.get(&format!("{GENERATOR_PREFIX}{n}")).cloned()
        })?)
    }

    pub fn discriminator(&self, num_classes: usize) -> Result<DiscriminatorParams, CheckpointError> {
        Ok(DiscriminatorParams::from_lookup(num_classes, |n| {
            self.get(&format!("{DISCRIMINATOR_PREFIX}{n}")).cloned()
        })?)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn decode(path: &Path, bytes: &[u8]) -> Result<Self, CheckpointError> {
        let name = path.display().to_string();
        let mut r = Reader {
            path: &name,
            bytes,
            offset: 0,
        };
        let magic = r.take(CHECKPOINT_MAGIC.len())?;
        if magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic {
                path: name.clone(),
                expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
                found: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let tensor_name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.format("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank > Tensor::MAX_RANK {
                return Err(r.format(&format!("tensor `{tensor_name}` has rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| r.format("tensor too large"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((tensor_name, Tensor::new(shape, data).expect("consistent shape")));
        }
        if r.offset != bytes.len() {
            return Err(r.format(&format!("{} trailing bytes", bytes.len() - r.offset)));
        }
        Ok(Checkpoint { tensors })
    }

    pub fn write(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut file = fs::File::create(path).map_err(io)?;
        file.write_all(&self.encode()).map_err(io)?;
        file.sync_all().map_err(io)
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::decode(path, &bytes)
    }
}

struct Reader<'a> {
    path: &'a str,
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.offset < n {
            return Err(CheckpointError::Truncated {
                path: self.path.to_string(),
                offset: self.offset,
                needed: n - (self.bytes.len() - self.offset),
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn format(&self, reason: &str) -> CheckpointError {
        CheckpointError::Format {
            path: self.path.to_string(),
            reason: reason.to_string(),
        }
    }
}
