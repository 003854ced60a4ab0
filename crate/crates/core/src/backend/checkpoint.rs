//! Binary checkpoint format.
//!
//! Layout: magic `SFCK`, little-endian `u32` version, length-prefixed JSON
//! header (architecture + training metadata), `u32` tensor count, then per
//! tensor: `u16` name length, name bytes, dtype tag, `u8` rank, `u32` dims,
//! raw little-endian payload. Round trips are bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::{Architecture, BackendParams, DType, Scalar};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"SFCK";
pub const VERSION: u32 = 1;

/// Training provenance stored alongside the weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub round: u32,
    pub epoch: u32,
    pub val_loss: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    architecture: Architecture,
    metadata: CheckpointMeta,
}

fn chk<T>(r: std::io::Result<T>, path: &Path) -> Result<T> {
    r.map_err(|e| Error::io(path, e))
}

/// Serializes parameters and metadata. The file is written to a sibling
/// temp path and renamed into place so partially written checkpoints never
/// appear under the final name.
pub fn save_checkpoint<F: Scalar>(
    params: &BackendParams<F>,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<()> {
    params.arch.validate()?;
    let header = Header {
        architecture: params.arch.clone(),
        metadata: *meta,
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;

    let tensors = params.named_tensors();
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_json);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, data) in &tensors {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(F::DTYPE.tag());
        buf.push(shape.len() as u8);
        for &d in shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        F::write_le(data, &mut buf);
    }

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            chk(std::fs::create_dir_all(parent), parent)?;
        }
    }
    let tmp = path.with_extension("sfck.tmp");
    chk(std::fs::write(&tmp, &buf), &tmp)?;
    chk(std::fs::rename(&tmp, path), path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{}: truncated file (wanted {n} bytes at offset {})",
                self.path.display(),
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

fn read_header<'a>(reader: &mut Reader<'a>) -> Result<Header> {
    let path = reader.path;
    let magic = reader.take(4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic {magic:02x?}",
            path.display()
        )));
    }
    let version = reader.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {version} (expected {VERSION})",
            path.display()
        )));
    }
    let header_len = reader.u32()? as usize;
    let header_bytes = reader.take(header_len)?;
    let header: Header = serde_json::from_slice(header_bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: header: {e}", path.display())))?;
    header.architecture.validate()?;
    Ok(header)
}

/// Reads only the header: architecture and metadata, no tensor payloads.
pub fn read_checkpoint_meta(path: &Path) -> Result<(Architecture, CheckpointMeta)> {
    let mut file = chk(std::fs::File::open(path), path)?;
    // Magic + version + header length bound the prefix we need.
    let mut prefix = [0u8; 12];
    chk(file.read_exact(&mut prefix), path)?;
    let header_len = u32::from_le_bytes([prefix[8], prefix[9], prefix[10], prefix[11]]) as usize;
    let mut rest = vec![0u8; header_len];
    chk(file.read_exact(&mut rest), path)?;
    let mut bytes = prefix.to_vec();
    bytes.extend_from_slice(&rest);
    let mut reader = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    let header = read_header(&mut reader)?;
    Ok((header.architecture, header.metadata))
}

/// Loads a full checkpoint, validating names, dtype, and shapes against the
/// declared architecture.
pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<(BackendParams<F>, CheckpointMeta)> {
    let bytes = chk(std::fs::read(path), path)?;
    let mut reader = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    let header = read_header(&mut reader)?;
    let arch = header.architecture;

    // Template gives the expected tensor names and shapes.
    let template: BackendParams<F> = BackendParams::init(&arch, 0)?;
    let expected: Vec<(String, Vec<usize>)> = template
        .named_tensors()
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect();

    let count = reader.u32()? as usize;
    if count != expected.len() {
        return Err(Error::Checkpoint(format!(
            "{}: tensor count {count} does not match architecture ({} expected)",
            path.display(),
            expected.len()
        )));
    }

    let mut loaded: Vec<Vec<F>> = Vec::with_capacity(count);
    for (name, shape) in &expected {
        let name_len = reader.u16()? as usize;
        let got_name = String::from_utf8(reader.take(name_len)?.to_vec())
            .map_err(|e| Error::Checkpoint(format!("{}: tensor name: {e}", path.display())))?;
        if got_name != *name {
            return Err(Error::Checkpoint(format!(
                "{}: unexpected tensor '{got_name}' (expected '{name}')",
                path.display()
            )));
        }
        let tag = reader.u8()?;
        let dtype = DType::from_tag(tag).ok_or_else(|| {
            Error::Checkpoint(format!("{}: unknown dtype tag {tag}", path.display()))
        })?;
        if dtype != F::DTYPE {
            return Err(Error::Checkpoint(format!(
                "{}: tensor '{name}' has dtype {dtype:?}, expected {:?}",
                path.display(),
                F::DTYPE
            )));
        }
        let rank = reader.u8()? as usize;
        if rank != shape.len() {
            return Err(Error::Checkpoint(format!(
                "{}: tensor '{name}' rank {rank} disagrees with architecture rank {}",
                path.display(),
                shape.len()
            )));
        }
        let mut got_shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            got_shape.push(reader.u32()? as usize);
        }
        if got_shape != *shape {
            return Err(Error::Checkpoint(format!(
                "{}: tensor '{name}' shape {got_shape:?} disagrees with architecture {shape:?}",
                path.display()
            )));
        }
        let n_elems: usize = shape.iter().product();
        let payload = reader.take(n_elems * F::DTYPE.size())?;
        loaded.push(F::read_le(payload));
    }
    if reader.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{}: {} trailing bytes after tensors",
            path.display(),
            bytes.len() - reader.pos
        )));
    }

    let mut params = template;
    let n_conv = params.conv_weights.len();
    for (t, data) in loaded.into_iter().enumerate() {
        if t < 2 * n_conv {
            let l = t / 2;
            if t % 2 == 0 {
                params.conv_weights[l]
                    .as_slice_mut()
                    .unwrap()
                    .copy_from_slice(&data);
            } else {
                params.conv_biases[l]
                    .as_slice_mut()
                    .unwrap()
                    .copy_from_slice(&data);
            }
        } else if t == 2 * n_conv {
            params
                .head_weight
                .as_slice_mut()
                .unwrap()
                .copy_from_slice(&data);
        } else {
            params
                .head_bias
                .as_slice_mut()
                .unwrap()
                .copy_from_slice(&data);
        }
    }
    Ok((params, header.metadata))
}

// Re-exported writer used by tests that need raw bytes.
pub(crate) fn _write_raw(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = chk(std::fs::File::create(path), path)?;
    chk(f.write_all(bytes), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ConvBlockSpec;

    fn arch() -> Architecture {
        Architecture {
            input_size: 8,
            input_channels: 3,
            blocks: vec![
                ConvBlockSpec { out_channels: 2, pool: true },
                ConvBlockSpec { out_channels: 3, pool: false },
            ],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.sfck");
        let params: BackendParams<f32> = BackendParams::init(&arch(), 42).unwrap();
        let meta = CheckpointMeta {
            round: 2,
            epoch: 17,
            val_loss: 0.12345,
        };
        save_checkpoint(&params, &meta, &path).unwrap();
        let (loaded, got_meta) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(loaded, params);
        assert_eq!(got_meta, meta);
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.sfck");
        let params: BackendParams<f32> = BackendParams::init(&arch(), 1).unwrap();
        let meta = CheckpointMeta {
            round: 0,
            epoch: 1,
            val_loss: 1.0,
        };
        save_checkpoint(&params, &meta, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        _write_raw(&path, &bytes).unwrap();
        let err = load_checkpoint::<f32>(&path).unwrap_err().to_string();
        assert!(err.contains("bad magic"), "{err}");
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.sfck");
        let params: BackendParams<f32> = BackendParams::init(&arch(), 1).unwrap();
        let meta = CheckpointMeta {
            round: 0,
            epoch: 1,
            val_loss: 1.0,
        };
        save_checkpoint(&params, &meta, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        _write_raw(&path, &bytes[..bytes.len() - 7]).unwrap();
        let err = load_checkpoint::<f32>(&path).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.sfck");
        let params: BackendParams<f64> = BackendParams::init(&arch(), 1).unwrap();
        let meta = CheckpointMeta {
            round: 0,
            epoch: 1,
            val_loss: 1.0,
        };
        save_checkpoint(&params, &meta, &path).unwrap();
        let err = load_checkpoint::<f32>(&path).unwrap_err().to_string();
        assert!(err.contains("dtype"), "{err}");
    }

    #[test]
    fn header_only_read_reports_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.sfck");
        let params: BackendParams<f32> = BackendParams::init(&arch(), 5).unwrap();
        let meta = CheckpointMeta {
            round: 3,
            epoch: 40,
            val_loss: 0.5,
        };
        save_checkpoint(&params, &meta, &path).unwrap();
        let (got_arch, got_meta) = read_checkpoint_meta(&path).unwrap();
        assert_eq!(got_arch, arch());
        assert_eq!(got_meta.round, 3);
        assert_eq!(got_meta.epoch, 40);
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.sfck");
        let params: BackendParams<f32> = BackendParams::init(&arch(), 1).unwrap();
        let meta = CheckpointMeta {
            round: 0,
            epoch: 1,
            val_loss: 1.0,
        };
        save_checkpoint(&params, &meta, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 0xFF;
        _write_raw(&path, &bytes).unwrap();
        let err = load_checkpoint::<f32>(&path).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }
}
