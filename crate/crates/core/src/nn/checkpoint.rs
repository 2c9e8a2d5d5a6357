//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MSCW" | version u8 | tensor count u32 |
//!   per tensor: name len u16 | name utf-8 | ndim u8 | dims u32 × ndim | data f32 × Π dims
//! | crc32 u32 of everything before it
//! ```
//!
//! ADAM state, when present, is stored as extra tensors `adam.t`,
//! `adam.m.<param>` and `adam.v.<param>`.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{param_shapes, Adam, AdamConfig, Params};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MSCW";
const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u8),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint crc32 mismatch: stored {stored:08x}, computed {computed:08x}")]
    Crc { stored: u32, computed: u32 },
    #[error("tensor name is not utf-8")]
    Name,
    #[error("checkpoint has no tensor {0}")]
    Missing(String),
    #[error("tensor {name} has shape {found:?}, model expects {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_params(params: &dyn Params, adam: Option<&Adam>) -> Self {
        let mut tensors = Vec::new();
        params.visit(&mut |name, shape, data| {
            tensors.push(NamedTensor {
                name: name.to_string(),
                shape: shape.to_vec(),
                data: data.iter().map(|v| *v as f32).collect(),
            })
        });
        if let Some(adam) = adam {
            tensors.push(NamedTensor {
                name: "adam.t".into(),
                shape: vec![1],
                data: vec![adam.t as f32],
            });
            let params: Vec<NamedTensor> = tensors[..tensors.len() - 1].to_vec();
            for (p, (m, v)) in params.iter().zip(adam.m.iter().zip(&adam.v)) {
                for (tag, moment) in [("m", m), ("v", v)] {
                    tensors.push(NamedTensor {
                        name: format!("adam.{tag}.{}", p.name),
                        shape: p.shape.clone(),
                        data: moment.iter().map(|x| *x as f32).collect(),
                    });
                }
            }
        }
        Checkpoint { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn lookup(&self, name: &str, shape: &[usize]) -> Result<&NamedTensor, CheckpointError> {
        let t = self
            .get(name)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))?;
        if t.shape != shape {
            return Err(CheckpointError::Shape {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: t.shape.clone(),
            });
        }
        Ok(t)
    }

    /// Copies stored values into `params`, checking names and shapes.
    pub fn restore(&self, params: &mut dyn Params) -> Result<(), CheckpointError> {
        let shapes = param_shapes(params);
        for (name, shape) in &shapes {
            self.lookup(name, shape)?;
        }
        params.visit_mut(&mut |name, data| {
            let t = self.get(name).expect("checked above");
            for (d, v) in data.iter_mut().zip(&t.data) {
                *d = f64::from(*v);
            }
        });
        Ok(())
    }

    /// Rebuilds the ADAM state saved alongside `params`, if any.
    pub fn restore_adam(
        &self,
        params: &dyn Params,
        config: AdamConfig,
    ) -> Result<Option<Adam>, CheckpointError> {
        let Some(t) = self.get("adam.t") else {
            return Ok(None);
        };
        let mut adam = Adam::new(params, config);
        adam.t = t.data.first().copied().unwrap_or(0.0) as u64;
        for (i, (name, shape)) in param_shapes(params).iter().enumerate() {
            let m = self.lookup(&format!("adam.m.{name}"), shape)?;
            let v = self.lookup(&format!("adam.v.{name}"), shape)?;
            adam.m[i] = m.data.iter().map(|x| f64::from(*x)).collect();
            adam.v[i] = v.data.iter().map(|x| f64::from(*x)).collect();
        }
        Ok(Some(adam))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.shape.len() as u8);
            for d in &t.shape {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < 13 {
            return Err(CheckpointError::Truncated);
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::Crc { stored, computed });
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| CheckpointError::Name)?
                .to_string();
            let ndim = r.take(1)?[0] as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Truncated);
        }
        Ok(Checkpoint { tensors })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or(CheckpointError::Truncated)?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

/// Writes a checkpoint atomically (temp file, then rename).
pub fn save_checkpoint(
    path: &Path,
    params: &dyn Params,
    adam: Option<&Adam>,
) -> Result<(), CheckpointError> {
    let io_err = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let tmp = path.with_extension("partial");
    fs::write(&tmp, Checkpoint::from_params(params, adam).to_bytes()).map_err(io_err)?;
    fs::rename(&tmp, path).map_err(io_err)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{flatten, Gru, Linear};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn header_bytes() {
        let l = Linear::zeros(2, 1);
        let bytes = Checkpoint::from_params(&l, None).to_bytes();
        assert_eq!(&bytes[..5], b"MSCW\x01");
        assert_eq!(&bytes[5..9], &2u32.to_le_bytes());
        // "w": len 1, 'w', ndim 2, dims [1, 2], two floats
        assert_eq!(&bytes[9..12], &[1, 0, b'w']);
        assert_eq!(bytes[12], 2);
        assert_eq!(bytes.len(), 9 + (3 + 1 + 8 + 8) + (3 + 1 + 4 + 4) + 4);
    }

    #[test]
    fn round_trip_with_adam() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = Gru::new(3, 2, &mut rng);
        let mut adam = Adam::new(&g, AdamConfig::default());
        adam.step(&mut g.clone(), &g);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.mscw");
        save_checkpoint(&path, &g, Some(&adam)).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        let mut back = g.zeros_like();
        ck.restore(&mut back).unwrap();
        for (a, b) in flatten(&g).iter().zip(flatten(&back)) {
            assert_eq!(*a as f32, b as f32);
        }
        let a2 = ck
            .restore_adam(&back, AdamConfig::default())
            .unwrap()
            .unwrap();
        assert_eq!(a2.t, 1);
        assert_eq!(a2.m[0].len(), adam.m[0].len());
    }

    #[test]
    fn corruption_and_shape_errors() {
        let l = Linear::zeros(2, 1);
        let mut bytes = Checkpoint::from_params(&l, None).to_bytes();
        let n = bytes.len();
        bytes[n - 6] ^= 0xff;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::Crc { .. })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(b"NOPE...."),
            Err(CheckpointError::BadMagic)
        ));
        let ck = Checkpoint::from_params(&l, None);
        let mut other = Linear::zeros(3, 1);
        assert!(matches!(
            ck.restore(&mut other),
            Err(CheckpointError::Shape { .. })
        ));
    }
}
