//! Model persistence: a JSON manifest plus one `MAT1` blob per array,
//! written next to the manifest as `<stem>.<name>.bin`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::datamodel::{decode_bin, encode_bin, Matrix};
use crate::error::{invalid, Error, Result};

/// Blob files belonging to one manifest.
pub(crate) struct BlobStore {
    dir: PathBuf,
    stem: String,
}

impl BlobStore {
    pub fn for_manifest(manifest: &Path) -> Result<Self> {
        let stem = manifest
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| invalid!("manifest path {} has no file name", manifest.display()))?
            .to_owned();
        let dir = match manifest.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_owned(),
            _ => PathBuf::from("."),
        };
        Ok(Self { dir, stem })
    }

    /// Writes `m` and returns the file name to record in the manifest.
    pub fn put(&self, name: &str, m: &Matrix) -> Result<String> {
        let file = format!("{}.{name}.bin", self.stem);
        let path = self.dir.join(&file);
        fs::write(&path, encode_bin(m)?).map_err(|e| Error::io(&path, e))?;
        Ok(file)
    }

    pub fn put_vector(&self, name: &str, v: &Array1<f64>) -> Result<String> {
        self.put(name, &row_matrix(v))
    }

    pub fn get(&self, file: &str) -> Result<Matrix> {
        let path = self.dir.join(file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        decode_bin(&bytes).map_err(|(offset, message)| Error::Parse {
            path,
            location: format!("byte {offset}"),
            message,
        })
    }

    pub fn get_vector(&self, file: &str) -> Result<Array1<f64>> {
        let m = self.get(file)?;
        if m.nrows() != 1 {
            return Err(invalid!("blob {file} should hold a single row, has {}", m.nrows()));
        }
        Ok(m.row(0).to_owned())
    }
}

pub(crate) fn row_matrix(v: &Array1<f64>) -> Matrix {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("1 x len")
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
