//! `CLDT` binary container: one tensor per file.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic  "CLDT"      4 bytes
//! version u16        = 1
//! dtype   u8         0 = f32, 1 = u8
//! rank    u8
//! dims    u32 × rank
//! payload            product(dims) elements
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CLDT";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Blob {
    F32(Tensor<f32>),
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl Blob {
    pub fn shape(&self) -> &[usize] {
        match self {
            Blob::F32(t) => t.shape(),
            Blob::U8 { shape, .. } => shape,
        }
    }

    pub fn into_f32(self, path: &Path) -> Result<Tensor<f32>> {
        match self {
            Blob::F32(t) => Ok(t),
            Blob::U8 { .. } => Err(Error::CorruptFormat { path: path.into(), detail: "expected f32 payload".into() }),
        }
    }

    pub fn into_u8(self, path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
        match self {
            Blob::U8 { shape, data } => Ok((shape, data)),
            Blob::F32(_) => Err(Error::CorruptFormat { path: path.into(), detail: "expected u8 payload".into() }),
        }
    }
}

pub fn encode(blob: &Blob) -> Vec<u8> {
    let shape = blob.shape();
    let mut out = Vec::with_capacity(8 + 4 * shape.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(match blob {
        Blob::F32(_) => 0,
        Blob::U8 { .. } => 1,
    });
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match blob {
        Blob::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Blob::U8 { data, .. } => out.extend_from_slice(data),
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Blob> {
    let truncated = |detail: String| Error::Truncated { path: path.into(), detail };
    if bytes.len() < 4 {
        return Err(truncated(format!("{} bytes, header needs 8", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::CorruptFormat { path: path.into(), detail: "bad magic bytes".into() });
    }
    if bytes.len() < 8 {
        return Err(truncated(format!("{} bytes, header needs 8", bytes.len())));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::VersionMismatch { path: path.into(), found: version, expected: VERSION });
    }
    let dtype = bytes[6];
    let rank = bytes[7] as usize;
    let header = 8 + 4 * rank;
    if bytes.len() < header {
        return Err(truncated(format!("{} bytes, header with rank {rank} needs {header}", bytes.len())));
    }
    let shape: Vec<usize> =
        bytes[8..header].chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize).collect();
    let n: usize = shape.iter().product();
    let elem = match dtype {
        0 => 4,
        1 => 1,
        other => return Err(Error::CorruptFormat { path: path.into(), detail: format!("unknown dtype code {other}") }),
    };
    let payload = &bytes[header..];
    if payload.len() < n * elem {
        return Err(truncated(format!("payload has {} bytes, shape {shape:?} needs {}", payload.len(), n * elem)));
    }
    if payload.len() > n * elem {
        return Err(Error::CorruptFormat {
            path: path.into(),
            detail: format!("{} trailing bytes", payload.len() - n * elem),
        });
    }
    Ok(match dtype {
        0 => {
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            Blob::F32(Tensor::new(shape, data)?)
        }
        _ => Blob::U8 { shape, data: payload.to_vec() },
    })
}

pub fn write_blob(path: &Path, blob: &Blob) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode(blob)).map_err(|e| Error::io(path, e))
}

pub fn read_blob(path: &Path) -> Result<Blob> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> &'static Path {
        Path::new("x.cldt")
    }

    #[test]
    fn header_layout() {
        let b = Blob::U8 { shape: vec![2, 3], data: vec![1, 2, 3, 4, 5, 6] };
        let bytes = encode(&b);
        assert_eq!(&bytes[..4], b"CLDT");
        assert_eq!(&bytes[4..8], &[1, 0, 1, 2]);
        assert_eq!(&bytes[8..16], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(bytes.len(), 16 + 6);
    }

    #[test]
    fn distinct_error_kinds() {
        let good = encode(&Blob::F32(Tensor::ones(&[2, 2])));
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode(&bad_magic, p()), Err(Error::CorruptFormat { .. })));
        let mut bad_version = good.clone();
        bad_version[4] = 9;
        assert!(matches!(decode(&bad_version, p()), Err(Error::VersionMismatch { found: 9, .. })));
        let err = decode(&good[..good.len() - 3], p()).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }));
        assert!(err.to_string().contains("x.cldt"));
        assert!(matches!(decode(&good[..6], p()), Err(Error::Truncated { .. })));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(dims in proptest::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| f32::from_bits((seed as u32).wrapping_mul(2654435761).wrapping_add(i as u32) & 0x7f7f_ffff)).collect();
            let t = Tensor::new(dims.clone(), data).unwrap();
            let b = Blob::F32(t);
            prop_assert_eq!(decode(&encode(&b), p()).unwrap(), b);
            let lb = Blob::U8 { shape: dims, data: (0..n).map(|i| (i as u64 ^ seed) as u8).collect() };
            prop_assert_eq!(decode(&encode(&lb), p()).unwrap(), lb);
        }
    }
}
