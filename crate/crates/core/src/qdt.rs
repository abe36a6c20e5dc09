//! QDT1 binary tensor files.
//!
//! Layout (little-endian):
//!
//! ```text
//! "QDT1" | u8 dtype | u8 rank | 6 reserved zero bytes | rank x u64 extents | payload
//! ```
//!
//! Dense dtypes: 0 = f32, 1 = f64, 2 = f16, 3 = bf16 (f16/bf16 widen to f32 on
//! load). Quantized dtypes carry a scale section before the codes:
//!
//! * 16 int8_sym:  u64 block_len, u64 n, n x f64 scale, numel x i8 codes
//! * 17 int8_asym: u64 block_len, u64 n, n x (f64 scale, i64 zero point), numel x u8 codes
//! * 18 nvfp4:     f32 normalizer, u64 n, n x u8 E4M3 scale, n x 8 bytes of codes
//!   packed two per byte, low nibble first
//!
//! A file must end exactly where its payload ends.

use std::fs;
use std::io::Write;
use std::path::Path;

use half::{bf16, f16};

use crate::error::{Error, Result};
use crate::quant::{Payload, QuantFormat, QuantizedTensor, NVFP4_BLOCK};
use crate::tensor::{checked_numel, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"QDT1";
const HEADER_LEN: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StorageDtype {
    F32,
    F64,
    F16,
    Bf16,
}

impl StorageDtype {
    pub fn code(self) -> u8 {
        match self {
            StorageDtype::F32 => 0,
            StorageDtype::F64 => 1,
            StorageDtype::F16 => 2,
            StorageDtype::Bf16 => 3,
        }
    }

    fn width(self) -> usize {
        match self {
            StorageDtype::F32 => 4,
            StorageDtype::F64 => 8,
            StorageDtype::F16 | StorageDtype::Bf16 => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(StorageDtype::F32),
            1 => Some(StorageDtype::F64),
            2 => Some(StorageDtype::F16),
            3 => Some(StorageDtype::Bf16),
            _ => None,
        }
    }
}

/// A dense tensor as loaded from disk.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dims(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.dims(),
            AnyTensor::F64(t) => t.dims(),
        }
    }

    pub fn to_f32(&self) -> Result<Tensor<f32>> {
        match self {
            AnyTensor::F32(t) => Ok(t.clone()),
            AnyTensor::F64(t) => t.cast(),
        }
    }

    pub fn to_f64(&self) -> Result<Tensor<f64>> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => Ok(t.clone()),
        }
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn header(out: &mut Vec<u8>, dtype: u8, dims: &[usize]) {
    out.extend_from_slice(MAGIC);
    out.push(dtype);
    out.push(dims.len() as u8);
    out.extend_from_slice(&[0u8; 6]);
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
}

pub fn encode_tensor<E: Element>(t: &Tensor<E>) -> Vec<u8> {
    let dtype = if E::DTYPE_CODE == 0 {
        StorageDtype::F32
    } else {
        StorageDtype::F64
    };
    encode_tensor_as(t, dtype)
}

/// Encodes with an explicit storage dtype; f16/bf16 round to nearest even.
pub fn encode_tensor_as<E: Element>(t: &Tensor<E>, dtype: StorageDtype) -> Vec<u8> {
    assert!(t.rank() <= u8::MAX as usize, "rank exceeds QDT1 limit");
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * t.rank() + dtype.width() * t.numel());
    header(&mut out, dtype.code(), t.dims());
    for v in t.data() {
        let v = v.as_f64();
        match dtype {
            StorageDtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            StorageDtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
            StorageDtype::F16 => out.extend_from_slice(&f16::from_f64(v).to_le_bytes()),
            StorageDtype::Bf16 => out.extend_from_slice(&bf16::from_f64(v).to_le_bytes()),
        }
    }
    out
}

pub fn encode_quantized(q: &QuantizedTensor) -> Vec<u8> {
    let mut out = Vec::new();
    header(&mut out, q.format().dtype_code(), q.dims());
    match q.payload() {
        Payload::Int8Sym {
            block_len,
            scales,
            codes,
        } => {
            out.extend_from_slice(&(*block_len as u64).to_le_bytes());
            out.extend_from_slice(&(scales.len() as u64).to_le_bytes());
            for s in scales {
                out.extend_from_slice(&s.to_le_bytes());
            }
            out.extend(codes.iter().map(|&c| c as u8));
        }
        Payload::Int8Asym {
            block_len,
            scales,
            zero_points,
            codes,
        } => {
            out.extend_from_slice(&(*block_len as u64).to_le_bytes());
            out.extend_from_slice(&(scales.len() as u64).to_le_bytes());
            for (s, z) in scales.iter().zip(zero_points) {
                out.extend_from_slice(&s.to_le_bytes());
                out.extend_from_slice(&z.to_le_bytes());
            }
            out.extend_from_slice(codes);
        }
        Payload::Nvfp4 {
            global_scale,
            block_scales,
            codes,
        } => {
            out.extend_from_slice(&global_scale.to_le_bytes());
            out.extend_from_slice(&(block_scales.len() as u64).to_le_bytes());
            out.extend_from_slice(block_scales);
            out.extend(codes.chunks(2).map(|p| (p[0] & 0x0F) | ((p[1] & 0x0F) << 4)));
        }
        Payload::Fp16 { bits } => {
            for b in bits {
                out.extend_from_slice(&b.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        if end > self.bytes.len() {
            return Err(Error::Truncated);
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::ExtentOverflow)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::TrailingBytes);
        }
        Ok(())
    }
}

struct Header {
    dtype: u8,
    dims: Vec<usize>,
    numel: usize,
}

fn read_header(r: &mut Reader<'_>) -> Result<Header> {
    let head = r.take(HEADER_LEN).map_err(|_| {
        if r.bytes.len() >= 4 && &r.bytes[..4] != MAGIC {
            Error::BadMagic
        } else {
            Error::Truncated
        }
    })?;
    if &head[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if head[6..12].iter().any(|&b| b != 0) {
        return Err(Error::ReservedBytes);
    }
    let dtype = head[4];
    let rank = head[5] as usize;
    let dims = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
    let numel = checked_numel(&dims)?;
    if dims.contains(&0) {
        return Err(Error::InvalidDims { dims, len: 0 });
    }
    Ok(Header { dtype, dims, numel })
}

fn decode_dense(r: &mut Reader<'_>, h: Header, dtype: StorageDtype) -> Result<AnyTensor> {
    let len = h
        .numel
        .checked_mul(dtype.width())
        .ok_or(Error::ExtentOverflow)?;
    let raw = r.take(len)?;
    r.finish()?;
    Ok(match dtype {
        StorageDtype::F32 => AnyTensor::F32(Tensor::new(
            h.dims,
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )?),
        StorageDtype::F64 => AnyTensor::F64(Tensor::new(
            h.dims,
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )?),
        StorageDtype::F16 => AnyTensor::F32(Tensor::new(
            h.dims,
            raw.chunks_exact(2)
                .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
        )?),
        StorageDtype::Bf16 => AnyTensor::F32(Tensor::new(
            h.dims,
            raw.chunks_exact(2)
                .map(|c| bf16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
        )?),
    })
}

pub fn decode_tensor(bytes: &[u8]) -> Result<AnyTensor> {
    let mut r = Reader { bytes, pos: 0 };
    let h = read_header(&mut r)?;
    let dtype = StorageDtype::from_code(h.dtype).ok_or(Error::UnsupportedDtype(h.dtype))?;
    decode_dense(&mut r, h, dtype)
}

pub fn decode_quantized(bytes: &[u8]) -> Result<QuantizedTensor> {
    let mut r = Reader { bytes, pos: 0 };
    let h = read_header(&mut r)?;
    let numel = h.numel;
    let payload = match h.dtype {
        16 => {
            let block_len = r.usize()?;
            let n = r.usize()?;
            let scales = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let codes = r.take(numel)?.iter().map(|&b| b as i8).collect();
            Payload::Int8Sym {
                block_len,
                scales,
                codes,
            }
        }
        17 => {
            let block_len = r.usize()?;
            let n = r.usize()?;
            let mut scales = Vec::new();
            let mut zero_points = Vec::new();
            for _ in 0..n {
                scales.push(r.f64()?);
                zero_points.push(r.u64()? as i64);
            }
            let codes = r.take(numel)?.to_vec();
            Payload::Int8Asym {
                block_len,
                scales,
                zero_points,
                codes,
            }
        }
        18 => {
            let global_scale = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
            let n = r.usize()?;
            let block_scales = r.take(n)?.to_vec();
            let packed_len = n.checked_mul(NVFP4_BLOCK / 2).ok_or(Error::ExtentOverflow)?;
            let codes = r
                .take(packed_len)?
                .iter()
                .flat_map(|&b| [b & 0x0F, b >> 4])
                .collect();
            Payload::Nvfp4 {
                global_scale,
                block_scales,
                codes,
            }
        }
        2 => {
            let len = numel.checked_mul(2).ok_or(Error::ExtentOverflow)?;
            let bits = r
                .take(len)?
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect();
            Payload::Fp16 { bits }
        }
        other => return Err(Error::UnsupportedDtype(other)),
    };
    r.finish()?;
    let q = QuantizedTensor::from_parts(h.dims, payload)?;
    if q.format() == QuantFormat::Nvfp4 || q.format() == QuantFormat::Fp16Passthrough {
        // surfaces out-of-range codes and non-finite scales at load time
        q.dequantize::<f64>()?;
    }
    Ok(q)
}

pub fn write_tensor<E: Element>(path: impl AsRef<Path>, t: &Tensor<E>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_tensor(t))
}

pub fn write_tensor_as<E: Element>(
    path: impl AsRef<Path>,
    t: &Tensor<E>,
    dtype: StorageDtype,
) -> Result<()> {
    write_atomic(path.as_ref(), &encode_tensor_as(t, dtype))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<AnyTensor> {
    decode_tensor(&fs::read(path)?)
}

pub fn write_quantized(path: impl AsRef<Path>, q: &QuantizedTensor) -> Result<()> {
    write_atomic(path.as_ref(), &encode_quantized(q))
}

pub fn read_quantized(path: impl AsRef<Path>) -> Result<QuantizedTensor> {
    decode_quantized(&fs::read(path)?)
}
