//! Binary tensor files.
//!
//! Layout (little-endian): 8-byte magic `OODNOTEN`, `u32` rank, `rank × u64`
//! extents, then the `f64` payload in row-major order. A JSON sidecar named
//! `<file>.json` records name, dtype and role.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tensor::{ComplexTensor, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"OODNOTEN";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    Float64,
    /// Stored as `f64` pairs with a trailing axis of extent 2.
    Complex128,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub dtype: Dtype,
    pub role: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + 8 * t.rank() + 8 * t.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        buf.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("missing tensor magic"));
    }
    let rank = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header = 12 + 8 * rank;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> = bytes[12..header]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let n: usize = shape.iter().product();
    if bytes.len() != header + 8 * n {
        return Err(bad("payload length does not match extents"));
    }
    let data = bytes[header..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_tensor(path: &Path, t: &Tensor, meta: &TensorMeta) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(&encode(t))?;
    f.flush()?;
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(meta)?)?;
    Ok(())
}

pub fn write_complex(path: &Path, t: &ComplexTensor, name: &str, role: &str) -> Result<()> {
    write_tensor(
        path,
        &t.to_real_pairs(),
        &TensorMeta {
            name: name.into(),
            dtype: Dtype::Complex128,
            role: role.into(),
        },
    )
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    decode(&fs::read(path)?, path)
}

pub fn read_meta(path: &Path) -> Result<TensorMeta> {
    let side = sidecar_path(path);
    if !side.exists() {
        return Err(Error::MissingArtifact(side));
    }
    Ok(serde_json::from_slice(&fs::read(side)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.5, -2.0]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..8], b"OODNOTEN");
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[12..20].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[20..28].try_into().unwrap()), 1);
        assert_eq!(f64::from_le_bytes(b[28..36].try_into().unwrap()), 1.5);
        assert_eq!(b.len(), 44);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let p = Path::new("x.bin");
        assert!(decode(b"NOTATENSOR000000", p).is_err());
        let mut b = encode(&Tensor::zeros(&[3]));
        b.pop();
        assert!(decode(&b, p).is_err());
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let meta = TensorMeta {
            name: "lift.weight".into(),
            dtype: Dtype::Float64,
            role: "parameter".into(),
        };
        let t = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.25);
        write_tensor(&path, &t, &meta).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), t);
        assert_eq!(read_meta(&path).unwrap(), meta);
    }

    proptest! {
        #[test]
        fn encode_decode_is_identity(
            shape in proptest::collection::vec(0usize..4, 0..4),
            seed in any::<u64>(),
        ) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| f64::from_bits(seed ^ (i as u64 * 0x9e37_79b9))).collect();
            let t = Tensor::new(shape, data).unwrap();
            let back = decode(&encode(&t), Path::new("p")).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
