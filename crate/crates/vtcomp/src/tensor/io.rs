//! Tensor wire formats.
//!
//! Binary layout, all integers little-endian:
//!
//! ```text
//! magic "TNSR" | rank: u64 | dims: rank x u64 | values: f64 x product(dims)
//! ```
//!
//! The JSON debug form mirrors the same fields (`shape`, `data`) and is meant
//! for eyeballing small tensors, not for bulk storage. Both forms round-trip
//! bit-exactly for finite values.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"TNSR";

fn bad_data(detail: String) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, detail)
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> io::Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(t.rank() as u64).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> io::Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(bad_data(format!("bad tensor magic {:?}", magic)));
    }
    let rank = read_u64(r)? as usize;
    if rank > 8 {
        return Err(bad_data(format!("implausible tensor rank {}", rank)));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u64(r)? as usize);
    }
    let len: usize = shape.iter().product();
    let mut data = Vec::with_capacity(len);
    let mut buf = [0u8; 8];
    for _ in 0..len {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    Tensor::from_vec(&shape, data).map_err(|e| bad_data(e.to_string()))
}

pub fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_tensor(&mut w, t).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let t = read_tensor(&mut r).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    Ok(t)
}

#[derive(Serialize, Deserialize)]
struct TensorJson {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub fn tensor_to_json(t: &Tensor) -> String {
    serde_json::to_string(&TensorJson {
        shape: t.shape().to_vec(),
        data: t.data().to_vec(),
    })
    .expect("tensor JSON serialization cannot fail")
}

pub fn tensor_from_json(s: &str) -> Result<Tensor> {
    let j: TensorJson =
        serde_json::from_str(s).map_err(|e| Error::invalid("tensor json", e.to_string()))?;
    Tensor::from_vec(&j.shape, j.data)
}
