//! Tensor file format: raw little-endian values plus a JSON sidecar.
//!
//! A tensor at `x.bin` is stored as the raw element bytes in row-major order
//! (width fastest) with a sidecar `x.bin.json` containing
//! `{"shape":[b,c,w],"dtype":"f32"}`. Integer tensors use `"i8"` / `"i32"`
//! with matching element widths.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Element type storable in the raw tensor format.
pub trait TensorElem: Copy {
    const DTYPE: &'static str;
    const WIDTH: usize;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl TensorElem for f32 {
    const DTYPE: &'static str = "f32";
    const WIDTH: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl TensorElem for i32 {
    const DTYPE: &'static str = "i32";
    const WIDTH: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        i32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl TensorElem for i8 {
    const DTYPE: &'static str = "i8";
    const WIDTH: usize = 1;

    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self as u8);
    }

    fn read_le(bytes: &[u8]) -> Self {
        bytes[0] as i8
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    shape: [usize; 3],
    dtype: String,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

/// Write the raw element bytes to `path` and the shape/dtype sidecar to
/// `path.json`.
pub fn save_tensor<T: TensorElem>(path: &Path, tensor: &Tensor<T>) -> Result<()> {
    let mut bytes = Vec::with_capacity(tensor.data().len() * T::WIDTH);
    for &v in tensor.data() {
        v.write_le(&mut bytes);
    }
    fs::write(path, bytes)?;
    let shape = tensor.shape();
    let sidecar = Sidecar {
        shape: [shape.batch, shape.channels, shape.width],
        dtype: T::DTYPE.to_string(),
    };
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

/// Read a tensor written by [`save_tensor`], checking the sidecar dtype.
pub fn load_tensor<T: TensorElem>(path: &Path) -> Result<Tensor<T>> {
    let sidecar: Sidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    if sidecar.dtype != T::DTYPE {
        return Err(Error::InvalidShape(format!(
            "dtype mismatch for {}: file holds {}, requested {}",
            path.display(),
            sidecar.dtype,
            T::DTYPE
        )));
    }
    let shape = Shape::new(sidecar.shape[0], sidecar.shape[1], sidecar.shape[2]);
    let bytes = fs::read(path)?;
    if bytes.len() != shape.len() * T::WIDTH {
        return Err(Error::InvalidShape(format!(
            "{}: raw size {} does not match shape {:?}",
            path.display(),
            bytes.len(),
            sidecar.shape
        )));
    }
    let data = bytes.chunks_exact(T::WIDTH).map(T::read_le).collect();
    Tensor::from_vec(shape, data)
}
