//! File helpers: atomic writes and typed tensor files.

use std::io::Write;
use std::path::{Path, PathBuf};

use talkhead_core::tensor::Tensor;

use crate::etg::{self, Dtype, FormatError, RawTensor};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error("{path}: {reason}")]
    Invalid { path: PathBuf, reason: String },
}

impl IoError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, source: FormatError) -> Self {
        IoError::Format {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn invalid(path: &Path, reason: impl Into<String>) -> Self {
        IoError::Invalid {
            path: path.to_path_buf(),
            reason: reason.into(),
        }
    }
}

/// Write `bytes` to a temporary file next to `path`, then rename it over
/// `path`, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| IoError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| IoError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| IoError::io(path, e))?;
    tmp.persist(path).map_err(|e| IoError::io(path, e.error))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Vec<u8>, IoError> {
    std::fs::read(path).map_err(|e| IoError::io(path, e))
}

pub fn save_tensor(path: &Path, t: &Tensor, dtype: Dtype) -> Result<(), IoError> {
    write_atomic(path, &etg::tensor_bytes(t, dtype))
}

pub fn save_raw(path: &Path, dims: &[usize], data: &[f64], dtype: Dtype) -> Result<(), IoError> {
    write_atomic(path, &etg::encode_tensor(dims, data, dtype))
}

pub fn load_raw(path: &Path) -> Result<RawTensor, IoError> {
    etg::decode_tensor(&read(path)?).map_err(|e| IoError::format(path, e))
}

/// Load a finite tensor.
pub fn load_tensor(path: &Path) -> Result<Tensor, IoError> {
    load_raw(path)?.into_tensor().map_err(|r| IoError::invalid(path, r))
}

/// Load a tensor and require `dims` (`None` entries match anything).
pub fn load_shaped(path: &Path, dims: &[Option<usize>]) -> Result<Tensor, IoError> {
    let t = load_tensor(path)?;
    let ok = t.dims().len() == dims.len() && t.dims().iter().zip(dims).all(|(&d, want)| want.is_none_or(|w| w == d));
    if !ok {
        let want: Vec<String> = dims.iter().map(|d| d.map_or("_".into(), |v| v.to_string())).collect();
        return Err(IoError::invalid(
            path,
            format!("expected dims [{}], found {:?}", want.join(", "), t.dims()),
        ));
    }
    Ok(t)
}
