//! MMTF tensor container.
//!
//! ```text
//! offset  size        field
//! 0       4           magic  b"MMTF"
//! 4       2           version u16 = 1
//! 6       1           dtype  u8 (0 = f32, 1 = f64)
//! 7       1           rank   u8
//! 8       8 * rank    dims   u64 each
//! 8+8r    elem*N      payload, row-major
//! ```
//!
//! All integers and floats are little-endian. The payload length must match
//! the dims exactly; trailing bytes are rejected.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"MMTF";
pub const VERSION: u16 = 1;
pub const MAX_RANK: usize = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

pub fn encode(t: &Tensor, dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * t.rank() + dtype.size() * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype as u8);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match dtype {
        Dtype::F64 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Dtype::F32 => t.data().iter().for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |field: &'static str, offset: u64, detail: String| Error::Format {
        path: path.to_path_buf(),
        field,
        offset,
        detail,
    };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        let found = &bytes[..bytes.len().min(4)];
        return Err(bad("magic", 0, format!("expected \"MMTF\", found {:?}", String::from_utf8_lossy(found))));
    }
    if bytes.len() < 8 {
        return Err(bad("header", bytes.len() as u64, format!("header needs 8 bytes, file has {}", bytes.len())));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(bad("version", 4, format!("unsupported version {version}, expected {VERSION}")));
    }
    let dtype = match bytes[6] {
        0 => Dtype::F32,
        1 => Dtype::F64,
        other => return Err(bad("dtype", 6, format!("unknown dtype code {other}"))),
    };
    let rank = bytes[7] as usize;
    let dims_end = 8 + 8 * rank;
    if bytes.len() < dims_end {
        return Err(bad(
            "dims",
            bytes.len() as u64,
            format!("rank {rank} needs {} header bytes, file has {}", dims_end, bytes.len()),
        ));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 8 + 8 * i;
        let d = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        if d == 0 || d > usize::MAX as u64 {
            return Err(bad("dims", off as u64, format!("dimension {i} has invalid extent {d}")));
        }
        shape.push(d as usize);
    }
    let expected = numel(&shape);
    let payload = &bytes[dims_end..];
    if payload.len() != expected * dtype.size() {
        return Err(bad(
            "payload",
            dims_end as u64,
            format!(
                "dims {shape:?} need {expected} values ({} bytes), found {} bytes ({} values)",
                expected * dtype.size(),
                payload.len(),
                payload.len() / dtype.size()
            ),
        ));
    }
    let data: Vec<f64> = match dtype {
        Dtype::F64 => payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        Dtype::F32 => payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
    };
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(bad(
            "payload",
            (dims_end + i * dtype.size()) as u64,
            format!("non-finite value {} at element {i}", data[i]),
        ));
    }
    Tensor::new(shape, data)
}

pub fn write_tensor_as(path: impl AsRef<Path>, t: &Tensor, dtype: Dtype) -> Result<()> {
    let path = path.as_ref();
    if t.rank() > MAX_RANK {
        return Err(Error::Dimension(format!("rank {} exceeds {MAX_RANK}", t.rank())));
    }
    fs::write(path, encode(t, dtype)).map_err(|e| Error::io(path, e))
}

/// Writes `t` with an f64 payload.
pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    write_tensor_as(path, t, Dtype::F64)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new([2, 1], vec![1.0, -2.0]).unwrap();
        let b = encode(&t, Dtype::F64);
        assert_eq!(&b[..8], &[b'M', b'M', b'T', b'F', 1, 0, 1, 2]);
        assert_eq!(&b[8..16], &2u64.to_le_bytes());
        assert_eq!(&b[16..24], &1u64.to_le_bytes());
        assert_eq!(&b[24..32], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 40);
    }

    #[test]
    fn bad_magic() {
        let mut b = encode(&Tensor::zeros([2]), Dtype::F64);
        b[..4].copy_from_slice(b"XXXX");
        match decode(&b, p()) {
            Err(Error::Format { field: "magic", offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_payload_cites_expected_count() {
        let mut b = encode(&Tensor::zeros([2, 2]), Dtype::F64);
        b.truncate(b.len() - 8);
        let err = decode(&b, p()).unwrap_err();
        assert!(matches!(err, Error::Format { field: "payload", offset: 24, .. }));
        assert!(err.to_string().contains("need 4 values"), "{err}");
    }

    #[test]
    fn version_dtype_and_dims_errors() {
        let good = encode(&Tensor::zeros([3]), Dtype::F64);
        let mut b = good.clone();
        b[4] = 2;
        assert!(matches!(decode(&b, p()), Err(Error::Format { field: "version", offset: 4, .. })));
        let mut b = good.clone();
        b[6] = 9;
        assert!(matches!(decode(&b, p()), Err(Error::Format { field: "dtype", offset: 6, .. })));
        let mut b = good.clone();
        b[8..16].copy_from_slice(&0u64.to_le_bytes());
        assert!(matches!(decode(&b, p()), Err(Error::Format { field: "dims", offset: 8, .. })));
        assert!(matches!(decode(&good[..12], p()), Err(Error::Format { field: "dims", .. })));
        assert!(matches!(decode(b"MM", p()), Err(Error::Format { field: "magic", .. })));
    }

    #[test]
    fn non_finite_payload_rejected() {
        let mut b = encode(&Tensor::zeros([2]), Dtype::F64);
        let n = b.len();
        b[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(decode(&b, p()), Err(Error::Format { field: "payload", offset: 24, .. })));
    }

    #[test]
    fn f32_payload_widens() {
        let t = Tensor::new([3], vec![0.5, -1.25, 3.0]).unwrap();
        let back = decode(&encode(&t, Dtype::F32), p()).unwrap();
        assert_eq!(back.data(), t.data());
    }
}
