//! Versioned binary checkpoint container.
//!
//! Layout: magic, format version, JSON metadata block, raw little-endian
//! parameter and momentum arrays, trailing SHA-256 over everything before
//! it. Captures enough state (architecture, parameters, optimizer
//! momentum, epoch counter, seed base) for bit-exact resume: all other
//! randomness is derived statelessly from the seed and epoch counters.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::convnet::ArchSpec;
use super::Scalar;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SNCKPT01";
const FORMAT_VERSION: u32 = 1;

/// JSON metadata block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub dtype: String,
    pub arch: ArchSpec,
    /// Completed epochs at save time.
    pub epoch: usize,
    /// Optimizer steps taken (drives schedules and momentum seeding).
    pub opt_steps: u64,
    /// Master seed; together with `epoch` it reconstructs every derived
    /// random stream.
    pub seed: u64,
    /// Producing stage, e.g. "generator" or "robust".
    pub stage: String,
}

/// In-memory checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint<F: Scalar> {
    pub meta: CheckpointMeta,
    pub params: Vec<F>,
    pub velocity: Vec<F>,
}

impl<F: Scalar> Checkpoint<F> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = Vec::new();
        body.extend_from_slice(MAGIC);
        body.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&CheckpointMeta {
            dtype: F::DTYPE.to_string(),
            ..self.meta.clone()
        })?;
        body.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        body.extend_from_slice(&meta);
        write_array(&mut body, &self.params);
        write_array(&mut body, &self.velocity);
        let digest = Sha256::digest(&body);
        let mut file = std::fs::File::create(path)?;
        file.write_all(&body)?;
        file.write_all(&digest)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 32 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: "file truncated".into(),
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::ArtifactCorrupt {
                path: path.to_path_buf(),
                detail: "checksum mismatch".into(),
            });
        }
        let mut cur = body;
        let magic = take(&mut cur, 8, path)?;
        if magic != MAGIC {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: "bad magic".into(),
            });
        }
        let version = u32::from_le_bytes(take(&mut cur, 4, path)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("unsupported version {version}"),
            });
        }
        let meta_len = u64::from_le_bytes(take(&mut cur, 8, path)?.try_into().unwrap()) as usize;
        let meta: CheckpointMeta = serde_json::from_slice(take(&mut cur, meta_len, path)?)?;
        if meta.dtype != F::DTYPE {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("dtype {} does not match requested {}", meta.dtype, F::DTYPE),
            });
        }
        let params = read_array::<F>(&mut cur, path)?;
        let velocity = read_array::<F>(&mut cur, path)?;
        Ok(Checkpoint {
            meta,
            params,
            velocity,
        })
    }
}

fn write_array<F: Scalar>(out: &mut Vec<u8>, values: &[F]) {
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    out.reserve(values.len() * F::BYTE_WIDTH);
    for v in values {
        v.write_le(out);
    }
}

fn read_array<F: Scalar>(cur: &mut &[u8], path: &Path) -> Result<Vec<F>> {
    let len = u64::from_le_bytes(take(cur, 8, path)?.try_into().unwrap()) as usize;
    let bytes = take(cur, len * F::BYTE_WIDTH, path)?;
    Ok(bytes
        .chunks_exact(F::BYTE_WIDTH)
        .map(F::read_le)
        .collect())
}

fn take<'a>(cur: &mut &'a [u8], n: usize, path: &Path) -> Result<&'a [u8]> {
    if cur.len() < n {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: "unexpected end of file".into(),
        });
    }
    let (head, tail) = cur.split_at(n);
    *cur = tail;
    Ok(head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::convnet::ArchSpec;

    fn sample_meta() -> CheckpointMeta {
        CheckpointMeta {
            dtype: "f32".into(),
            arch: ArchSpec::conv_blocks([1, 8, 8], &[4], 3),
            epoch: 7,
            opt_steps: 211,
            seed: 42,
            stage: "generator".into(),
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let ck = Checkpoint::<f32> {
            meta: sample_meta(),
            params: vec![0.1, -2.5e-8, 3.0, f32::MIN_POSITIVE],
            velocity: vec![0.0, 1.0, -1.0, 0.25],
        };
        ck.save(&path).unwrap();
        let back = Checkpoint::<f32>::load(&path).unwrap();
        assert_eq!(ck.params, back.params);
        assert_eq!(ck.velocity, back.velocity);
        assert_eq!(back.meta.epoch, 7);
        assert_eq!(back.meta.opt_steps, 211);
    }

    #[test]
    fn corruption_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let ck = Checkpoint::<f32> {
            meta: sample_meta(),
            params: vec![1.0; 16],
            velocity: vec![0.0; 16],
        };
        ck.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            Checkpoint::<f32>::load(&path),
            Err(Error::ArtifactCorrupt { .. })
        ));
    }

    #[test]
    fn dtype_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let ck = Checkpoint::<f32> {
            meta: sample_meta(),
            params: vec![1.0],
            velocity: vec![],
        };
        ck.save(&path).unwrap();
        assert!(Checkpoint::<f64>::load(&path).is_err());
    }
}
