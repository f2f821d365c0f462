//! The `.vten` binary tensor format used for all CLI fixture I/O.
//!
//! Layout: magic "VTEN", u8 version (=1), u8 dtype (0=f32, 1=f64), u8 ndim,
//! then ndim little-endian u32 dims, then the payload as little-endian
//! row-major scalars. Malformed files produce a format error carrying the
//! byte offset of the problem.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};

pub const MAGIC: &[u8; 4] = b"VTEN";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum VtenData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vten {
    pub dims: Vec<usize>,
    pub data: VtenData,
}

fn fmt_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        msg: msg.into(),
    }
}

impl Vten {
    pub fn from_slice<T: Scalar>(dims: Vec<usize>, values: &[T]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != values.len() {
            return Err(Error::dim(format!(
                "dims {:?} imply {} elements, got {}",
                dims,
                n,
                values.len()
            )));
        }
        let data = match T::DTYPE {
            Dtype::F32 => VtenData::F32(values.iter().map(|v| Scalar::to_f64(*v) as f32).collect()),
            Dtype::F64 => VtenData::F64(values.iter().map(|v| Scalar::to_f64(*v)).collect()),
        };
        Ok(Vten { dims, data })
    }

    pub fn dtype(&self) -> Dtype {
        match self.data {
            VtenData::F32(_) => Dtype::F32,
            VtenData::F64(_) => Dtype::F64,
        }
    }

    pub fn elements(&self) -> usize {
        match &self.data {
            VtenData::F32(v) => v.len(),
            VtenData::F64(v) => v.len(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            VtenData::F32(v) => v.iter().map(|x| *x as f64).collect(),
            VtenData::F64(v) => v.clone(),
        }
    }

    /// Precision conversion (values pass through f64, so f32→f64 is exact
    /// and f64→f32 rounds to nearest).
    pub fn convert(&self, dtype: Dtype) -> Vten {
        let vals = self.to_f64_vec();
        let data = match dtype {
            Dtype::F32 => VtenData::F32(vals.iter().map(|v| *v as f32).collect()),
            Dtype::F64 => VtenData::F64(vals),
        };
        Vten {
            dims: self.dims.clone(),
            data,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(7 + 4 * self.dims.len() + self.elements() * self.dtype().byte_size());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.dtype() as u8);
        out.push(self.dims.len() as u8);
        for d in &self.dims {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        match &self.data {
            VtenData::F32(v) => {
                for x in v {
                    x.write_le_bytes(&mut out);
                }
            }
            VtenData::F64(v) => {
                for x in v {
                    x.write_le_bytes(&mut out);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(fmt_err(bytes.len(), format!("truncated magic: missing {} bytes", 4 - bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(fmt_err(0, "bad magic, expected \"VTEN\""));
        }
        if bytes.len() < 7 {
            return Err(fmt_err(bytes.len(), format!("truncated header: missing {} bytes", 7 - bytes.len())));
        }
        if bytes[4] != VERSION {
            return Err(fmt_err(4, format!("unsupported version {}", bytes[4])));
        }
        let dtype = match bytes[5] {
            0 => Dtype::F32,
            1 => Dtype::F64,
            d => return Err(fmt_err(5, format!("unknown dtype code {d}"))),
        };
        let ndim = bytes[6] as usize;
        let dims_end = 7 + 4 * ndim;
        if bytes.len() < dims_end {
            return Err(fmt_err(bytes.len(), format!("truncated dims: missing {} bytes", dims_end - bytes.len())));
        }
        let dims: Vec<usize> = (0..ndim)
            .map(|i| {
                let o = 7 + 4 * i;
                u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize
            })
            .collect();
        let n: usize = dims.iter().product();
        let payload_end = dims_end + n * dtype.byte_size();
        if bytes.len() < payload_end {
            return Err(fmt_err(bytes.len(), format!("truncated payload: missing {} bytes", payload_end - bytes.len())));
        }
        if bytes.len() > payload_end {
            return Err(fmt_err(payload_end, format!("{} trailing bytes after payload", bytes.len() - payload_end)));
        }
        let payload = &bytes[dims_end..payload_end];
        let data = match dtype {
            Dtype::F32 => VtenData::F32(payload.chunks_exact(4).map(f32::from_le_bytes2).collect()),
            Dtype::F64 => VtenData::F64(payload.chunks_exact(8).map(f64::from_le_bytes2).collect()),
        };
        Ok(Vten { dims, data })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    /// Human-readable summary: dtype, dims, min/max/mean.
    pub fn summary(&self) -> String {
        let vals = self.to_f64_vec();
        let (mut min, mut max, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
        for v in &vals {
            min = min.min(*v);
            max = max.max(*v);
            sum += *v;
        }
        let mean = if vals.is_empty() { 0.0 } else { sum / vals.len() as f64 };
        let dims: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        format!(
            "dtype={:?} dims=[{}] elements={} min={:.6e} max={:.6e} mean={:.6e}",
            self.dtype(),
            dims.join(","),
            vals.len(),
            min,
            max,
            mean
        )
    }
}

// chunks_exact yields &[u8] slices; adapt the array-based stdlib parsers
trait FromLeSlice {
    fn from_le_bytes2(b: &[u8]) -> Self;
}
impl FromLeSlice for f32 {
    fn from_le_bytes2(b: &[u8]) -> f32 {
        f32::from_le_bytes(b.try_into().unwrap())
    }
}
impl FromLeSlice for f64 {
    fn from_le_bytes2(b: &[u8]) -> f64 {
        f64::from_le_bytes(b.try_into().unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn roundtrip_is_bitwise_exact() {
        let mut r = rng::seeded(1);
        let vals: Vec<f64> = (0..24).map(|_| rng::normal(&mut r, 0.0, 3.0)).collect();
        let t = Vten::from_slice(vec![2, 3, 4], &vals).unwrap();
        let back = Vten::from_bytes(&t.to_bytes()).unwrap();
        assert_eq!(t, back);
        match back.data {
            VtenData::F64(v) => {
                for (a, b) in vals.iter().zip(&v) {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
            _ => panic!("dtype changed"),
        }
    }

    #[test]
    fn roundtrip_f32_via_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.vten");
        let vals: Vec<f32> = vec![1.5, -2.25, 0.1, f32::MIN_POSITIVE];
        let t = Vten::from_slice(vec![4], &vals).unwrap();
        t.write(&p).unwrap();
        let back = Vten::read(&p).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn convert_f64_f32_f64_within_f32_ulp() {
        let vals = vec![1.0 / 3.0, 2.0 / 7.0, -5.5];
        let t = Vten::from_slice(vec![3], &vals).unwrap();
        let round = t.convert(Dtype::F32).convert(Dtype::F64);
        for (a, b) in vals.iter().zip(round.to_f64_vec()) {
            assert!((a - b).abs() <= (*a as f32).abs() as f64 * f32::EPSILON as f64);
        }
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let mut b = Vten::from_slice(vec![1], &[1.0f64]).unwrap().to_bytes();
        b[0] = b'X';
        match Vten::from_bytes(&b) {
            Err(crate::Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncation_names_missing_byte_count() {
        let b = Vten::from_slice(vec![2, 2], &[1.0f64, 2.0, 3.0, 4.0])
            .unwrap()
            .to_bytes();
        let cut = &b[..b.len() - 5];
        match Vten::from_bytes(cut) {
            Err(crate::Error::Format { offset, msg }) => {
                assert_eq!(offset as usize, cut.len());
                assert!(msg.contains("missing 5 bytes"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut b = Vten::from_slice(vec![1], &[1.0f32]).unwrap().to_bytes();
        b.push(0);
        assert!(Vten::from_bytes(&b).is_err());
    }

    #[test]
    fn dims_product_must_match() {
        assert!(Vten::from_slice(vec![2, 3], &[0.0f64; 5]).is_err());
    }
}
