//! Single-file weight archive: a text manifest (name, dtype, shape,
//! byte offset into the data section) followed by raw little-endian
//! element bytes for each named tensor.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::tensor::{Dtype, Scalar, Tensor};

pub const FORMAT_TAG: &str = "uieforge-ckpt-v1";
const MANIFEST_END: &str = "end";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint manifest: {0}")]
    Manifest(String),
}

pub type Result<V> = std::result::Result<V, CheckpointError>;

pub fn save<T: Scalar>(
    path: &Path,
    entries: &BTreeMap<String, Tensor<T>>,
) -> Result<()> {
    let mut manifest = String::new();
    manifest.push_str(FORMAT_TAG);
    manifest.push('\n');
    manifest.push_str(&entries.len().to_string());
    manifest.push('\n');
    let mut offset = 0usize;
    for (name, t) in entries {
        if name.contains(char::is_whitespace) {
            return Err(CheckpointError::Manifest(format!(
                "tensor name {name:?} contains whitespace"
            )));
        }
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!(
            "{} {} {} {}\n",
            name,
            T::DTYPE.name(),
            dims.join("x"),
            offset
        ));
        offset += t.numel() * T::DTYPE.size();
    }
    manifest.push_str(MANIFEST_END);
    manifest.push('\n');

    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(manifest.as_bytes())?;
    for t in entries.values() {
        for &v in t.data() {
            file.write_all(&v.to_le_bytes_vec())?;
        }
    }
    file.flush()?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<BTreeMap<String, Tensor<T>>> {
    let file = std::fs::File::open(path)?;
    let mut reader = BufReader::new(file);

    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.trim_end() != FORMAT_TAG {
        return Err(CheckpointError::Manifest(format!(
            "bad version tag {:?}, expected {:?}",
            line.trim_end(),
            FORMAT_TAG
        )));
    }
    line.clear();
    reader.read_line(&mut line)?;
    let count: usize = line
        .trim()
        .parse()
        .map_err(|_| CheckpointError::Manifest(format!("bad entry count {:?}", line.trim())))?;

    struct Entry {
        name: String,
        dtype: Dtype,
        shape: Vec<usize>,
        offset: usize,
    }
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(CheckpointError::Manifest("truncated manifest".into()));
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 4 {
            return Err(CheckpointError::Manifest(format!(
                "malformed manifest line {:?}",
                line.trim_end()
            )));
        }
        let dtype = match parts[1] {
            "f32" => Dtype::F32,
            "f64" => Dtype::F64,
            other => {
                return Err(CheckpointError::Manifest(format!("unknown dtype {other:?}")))
            }
        };
        let shape: Vec<usize> = parts[2]
            .split('x')
            .map(|d| {
                d.parse()
                    .map_err(|_| CheckpointError::Manifest(format!("bad dim {d:?}")))
            })
            .collect::<Result<_>>()?;
        let offset: usize = parts[3]
            .parse()
            .map_err(|_| CheckpointError::Manifest(format!("bad offset {:?}", parts[3])))?;
        entries.push(Entry {
            name: parts[0].to_string(),
            dtype,
            shape,
            offset,
        });
    }
    line.clear();
    reader.read_line(&mut line)?;
    if line.trim_end() != MANIFEST_END {
        return Err(CheckpointError::Manifest(format!(
            "missing manifest terminator, got {:?}",
            line.trim_end()
        )));
    }

    let mut data = Vec::new();
    reader.read_to_end(&mut data)?;

    let mut out = BTreeMap::new();
    for e in entries {
        let numel: usize = e.shape.iter().product();
        let width = e.dtype.size();
        let end = e.offset + numel * width;
        if end > data.len() {
            return Err(CheckpointError::Manifest(format!(
                "tensor {} runs past end of data ({} > {})",
                e.name,
                end,
                data.len()
            )));
        }
        let bytes = &data[e.offset..end];
        let tensor: Tensor<T> = match e.dtype {
            Dtype::F32 => {
                let vals: Vec<f32> = bytes.chunks_exact(4).map(f32::from_le_slice).collect();
                Tensor::<f32>::from_vec(e.shape.clone(), vals)
                    .map_err(|err| CheckpointError::Manifest(err.to_string()))?
                    .cast()
            }
            Dtype::F64 => {
                let vals: Vec<f64> = bytes.chunks_exact(8).map(f64::from_le_slice).collect();
                Tensor::<f64>::from_vec(e.shape.clone(), vals)
                    .map_err(|err| CheckpointError::Manifest(err.to_string()))?
                    .cast()
            }
        };
        out.insert(e.name, tensor);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.ckpt");
        let mut entries = BTreeMap::new();
        entries.insert(
            "generator/enc1/w".to_string(),
            Tensor::<f32>::from_fn(vec![2, 3, 3, 3], |i| (i as f32) * 0.013 - 0.3),
        );
        entries.insert(
            "discriminator/head/b".to_string(),
            Tensor::<f32>::from_vec(vec![1], vec![f32::MIN_POSITIVE]).unwrap(),
        );
        save(&path, &entries).unwrap();
        let loaded = load::<f32>(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        for (name, t) in &entries {
            assert_eq!(loaded[name].shape(), t.shape());
            assert_eq!(loaded[name].data(), t.data());
        }
    }

    #[test]
    fn version_tag_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, "some-other-format\n0\nend\n").unwrap();
        let err = load::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("version tag"));
    }

    #[test]
    fn truncated_data_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.ckpt");
        let mut entries = BTreeMap::new();
        entries.insert("w".to_string(), Tensor::<f32>::ones(vec![8]));
        save(&path, &entries).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(load::<f32>(&path).is_err());
    }
}
