//! Checkpoint container format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "CORLCKPT"
//! version u32      1
//! count   u32      number of tensors
//! per tensor:
//!   name_len u16, name bytes (UTF-8),
//!   rank u8, dims rank x u32,
//!   values row-major f32
//! crc     u64      CRC-64/ECMA-182 of every preceding byte
//! ```
//!
//! Values are stored in 32-bit precision; loading widens them back to the
//! in-memory 64-bit representation, so save -> load -> save is
//! byte-identical.

use std::path::Path;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"CORLCKPT";
pub const VERSION: u32 = 1;

/// Named tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, tensor) in &self.tensors {
            let name_bytes = name.as_bytes();
            assert!(name_bytes.len() <= u16::MAX as usize, "tensor name too long");
            out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
            out.extend_from_slice(name_bytes);
            let shape = tensor.shape();
            assert!(shape.len() <= u8::MAX as usize, "tensor rank too large");
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in tensor.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let crc = crc64(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                detail: format!("bad checkpoint magic {magic:?}"),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format {
                offset: 8,
                detail: format!("unsupported checkpoint version {version}"),
            });
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name_off = r.offset;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| Error::Format {
                    offset: name_off as u64,
                    detail: format!("tensor name is not UTF-8: {e}"),
                })?
                .to_string();
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(r.f32()? as f64);
            }
            tensors.push((name, Tensor::new(&shape, data)));
        }
        let body_end = r.offset;
        let stored = r.u64()?;
        let computed = crc64(&bytes[..body_end]);
        if stored != computed {
            return Err(Error::Format {
                offset: body_end as u64,
                detail: format!("CRC mismatch: stored {stored:#018x}, computed {computed:#018x}"),
            });
        }
        if r.offset != bytes.len() {
            return Err(Error::Format {
                offset: r.offset as u64,
                detail: format!("{} trailing bytes after CRC", bytes.len() - r.offset),
            });
        }
        Ok(Checkpoint { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }
}

/// Byte reader that reports the offset of truncations.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pub(crate) offset: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, offset: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.offset as u64,
                detail: format!(
                    "truncated: need {n} bytes, {} remain",
                    self.bytes.len() - self.offset
                ),
            });
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

const CRC64_POLY: u64 = 0x42F0_E1EB_A9EA_3693;

fn crc64_table() -> &'static [u64; 256] {
    static TABLE: OnceLock<[u64; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = [0u64; 256];
        for (i, entry) in table.iter_mut().enumerate() {
            let mut crc = (i as u64) << 56;
            for _ in 0..8 {
                crc = if crc & (1 << 63) != 0 {
                    (crc << 1) ^ CRC64_POLY
                } else {
                    crc << 1
                };
            }
            *entry = crc;
        }
        table
    })
}

/// CRC-64/ECMA-182 (no reflection, zero init and xorout).
pub fn crc64(bytes: &[u8]) -> u64 {
    let table = crc64_table();
    let mut crc = 0u64;
    for &b in bytes {
        crc = table[(((crc >> 56) as u8) ^ b) as usize] ^ (crc << 8);
    }
    crc
}
