//! The `SOQ1` packed artifact container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic      "SOQ1"
//! version    u16
//! count      u32
//! directory  count x { name_len u16, name utf8, format u8 (0 nvfp4, 1 mxfp4),
//!                      block_size u16, ndim u8, dims u64 x ndim,
//!                      payload_offset u64, payload_len u64 }
//! payloads   in directory order: [global scale f32 (nvfp4 only)]
//!            block scales (one raw E4M3/E8M0 byte per block)
//!            codes, two per byte: even index in the low nibble
//! crc32      u32 over every preceding byte
//! ```
//!
//! The payload of an NVFP4 tensor with `n` padded elements is
//! `n/2 + n/16 + 4` bytes, identical to a max-scaled NVFP4 tensor.

use std::path::Path;

use crate::block::{Format, QuantizedTensor};
use crate::codec::Fp4Code;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SOQ1";
pub const VERSION: u16 = 1;

fn format_tag(format: Format) -> u8 {
    match format {
        Format::Nvfp4 => 0,
        Format::Mxfp4 => 1,
    }
}

/// Packs codes two per byte, low nibble first.
pub fn pack_codes(codes: &[Fp4Code]) -> Vec<u8> {
    codes
        .chunks(2)
        .map(|pair| {
            let lo = pair[0].to_bits();
            let hi = pair.get(1).map_or(0, |c| c.to_bits());
            lo | (hi << 4)
        })
        .collect()
}

pub fn unpack_codes(bytes: &[u8], count: usize) -> Vec<Fp4Code> {
    bytes
        .iter()
        .flat_map(|b| [Fp4Code::from_bits(b & 0x0f), Fp4Code::from_bits(b >> 4)])
        .take(count)
        .collect()
}

fn payload(qt: &QuantizedTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(qt.payload_bytes());
    if let Some(alpha) = qt.global_scale {
        out.extend_from_slice(&alpha.to_le_bytes());
    }
    out.extend(qt.block_scales.iter().map(|s| s.to_bits()));
    out.extend(pack_codes(&qt.codes));
    out
}

pub fn encode_packed(tensors: &[QuantizedTensor]) -> Result<Vec<u8>> {
    for qt in tensors {
        qt.validate()?;
    }
    let mut dir = Vec::new();
    dir.extend_from_slice(MAGIC);
    dir.extend_from_slice(&VERSION.to_le_bytes());
    dir.extend_from_slice(&(tensors.len() as u32).to_le_bytes());

    let payloads: Vec<Vec<u8>> = tensors.iter().map(payload).collect();
    let dir_len: usize = 10
        + tensors
            .iter()
            .map(|qt| 2 + qt.name.len() + 1 + 2 + 1 + 8 * qt.shape.len() + 16)
            .sum::<usize>();
    let mut offset = dir_len as u64;
    for (qt, p) in tensors.iter().zip(&payloads) {
        let name_len = u16::try_from(qt.name.len())
            .map_err(|_| Error::Config(format!("tensor name of {} bytes is too long", qt.name.len())))?;
        let block_size = u16::try_from(qt.block_size)
            .map_err(|_| Error::Config(format!("block size {} is too large", qt.block_size)))?;
        let ndim = u8::try_from(qt.shape.len())
            .map_err(|_| Error::Config(format!("{} dimensions is too many", qt.shape.len())))?;
        dir.extend_from_slice(&name_len.to_le_bytes());
        dir.extend_from_slice(qt.name.as_bytes());
        dir.push(format_tag(qt.format));
        dir.extend_from_slice(&block_size.to_le_bytes());
        dir.push(ndim);
        for &d in &qt.shape {
            dir.extend_from_slice(&(d as u64).to_le_bytes());
        }
        dir.extend_from_slice(&offset.to_le_bytes());
        dir.extend_from_slice(&(p.len() as u64).to_le_bytes());
        offset += p.len() as u64;
    }
    debug_assert_eq!(dir.len(), dir_len);
    let mut out = dir;
    for p in payloads {
        out.extend(p);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, msg: impl Into<String>) -> Error {
        Error::Corrupt {
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| self.corrupt(format!("need {n} bytes, {} left", self.bytes.len() - self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_packed(bytes: &[u8]) -> Result<Vec<QuantizedTensor>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Corrupt {
            offset: 0,
            msg: "bad magic".into(),
        });
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Version(version));
    }
    if bytes.len() < 14 {
        return Err(Error::Corrupt {
            offset: bytes.len() as u64,
            msg: "missing checksum".into(),
        });
    }
    let body_len = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_len..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..body_len]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let body = &bytes[..body_len];
    let mut r = Reader { bytes: body, pos: 6 };

    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Corrupt {
                offset: at as u64,
                msg: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let format = match r.u8()? {
            0 => Format::Nvfp4,
            1 => Format::Mxfp4,
            t => return Err(Error::Corrupt { offset: r.pos as u64 - 1, msg: format!("unknown format tag {t}") }),
        };
        let block_size = r.u16()? as usize;
        let ndim = r.u8()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let offset = r.u64()? as usize;
        let len = r.u64()? as usize;
        entries.push((name, format, block_size, shape, offset, len, r.pos));
    }

    let mut out = Vec::with_capacity(entries.len());
    let mut expected_offset = r.pos;
    for (name, format, block_size, shape, offset, len, dir_pos) in entries {
        let bad = |msg: String| Error::Corrupt { offset: dir_pos as u64, msg: format!("tensor `{name}`: {msg}") };
        if block_size < 2 || block_size % 2 != 0 {
            return Err(bad(format!("invalid block size {block_size}")));
        }
        if offset != expected_offset {
            return Err(bad(format!("payload at {offset}, expected {expected_offset}")));
        }
        let layout = crate::block::Layout::new(&shape, block_size);
        let global = if format.has_global_scale() { 4 } else { 0 };
        let want = global + layout.num_blocks() + layout.padded_len().div_ceil(2);
        if len != want {
            return Err(bad(format!("payload of {len} bytes, layout needs {want}")));
        }
        let mut p = Reader { bytes: body, pos: offset };
        let global_scale = if format.has_global_scale() {
            Some(f32::from_le_bytes(p.take(4)?.try_into().expect("4 bytes")))
        } else {
            None
        };
        let scale_at = p.pos;
        let block_scales = p
            .take(layout.num_blocks())?
            .iter()
            .enumerate()
            .map(|(i, &b)| {
                format.scale_from_bits(b).map_err(|e| Error::Corrupt {
                    offset: (scale_at + i) as u64,
                    msg: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let codes = unpack_codes(p.take(layout.padded_len().div_ceil(2))?, layout.padded_len());
        let qt = QuantizedTensor {
            name,
            shape,
            format,
            block_size,
            global_scale,
            block_scales,
            codes,
        };
        qt.validate().map_err(|e| match e {
            Error::Corrupt { msg, .. } => Error::Corrupt { offset: offset as u64, msg },
            other => other,
        })?;
        out.push(qt);
        expected_offset = offset + len;
    }
    if expected_offset != body_len {
        return Err(Error::Corrupt {
            offset: expected_offset as u64,
            msg: format!("{} trailing bytes", body_len - expected_offset),
        });
    }
    Ok(out)
}

pub fn write_packed(path: impl AsRef<Path>, tensors: &[QuantizedTensor]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_packed(tensors)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_packed(path: impl AsRef<Path>) -> Result<Vec<QuantizedTensor>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_packed(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::{quantize_tensor_baseline, Method, QuantConfig};
    use crate::tensor::Tensor;

    fn nvfp4_tensor(n: usize) -> QuantizedTensor {
        let t = Tensor::from_vec("w", (0..n).map(|i| (i as f64 * 0.9).cos()).collect());
        quantize_tensor_baseline(&t, &QuantConfig::new(Format::Nvfp4, Method::Baseline)).unwrap()
    }

    #[test]
    fn nibble_order_is_low_first() {
        let codes: Vec<Fp4Code> = [0x1, 0xf, 0x7].iter().map(|&b| Fp4Code::from_bits(b)).collect();
        assert_eq!(pack_codes(&codes), vec![0xf1, 0x07]);
        assert_eq!(unpack_codes(&[0xf1, 0x07], 3), codes);
    }

    #[test]
    fn single_block_payload_is_13_bytes() {
        let qt = nvfp4_tensor(16);
        let bytes = encode_packed(std::slice::from_ref(&qt)).unwrap();
        let dir = 10 + 2 + 1 + 1 + 2 + 1 + 8 + 16;
        assert_eq!(bytes.len(), dir + 13 + 4);
        assert_eq!(decode_packed(&bytes).unwrap(), vec![qt]);
    }

    #[test]
    fn empty_container() {
        let bytes = encode_packed(&[]).unwrap();
        assert_eq!(bytes.len(), 14);
        assert!(decode_packed(&bytes).unwrap().is_empty());
    }

    #[test]
    fn version_and_checksum_are_checked() {
        let qt = nvfp4_tensor(40);
        let mut bytes = encode_packed(&[qt]).unwrap();
        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        assert!(matches!(decode_packed(&wrong_version), Err(Error::Version(9))));
        let last = bytes.len() - 10;
        bytes[last] ^= 0x10;
        assert!(matches!(decode_packed(&bytes), Err(Error::Checksum { .. })));
        assert!(matches!(decode_packed(b"SOQX\x01\x00"), Err(Error::Corrupt { offset: 0, .. })));
    }

    #[test]
    fn invalid_scale_byte_reports_offset() {
        let qt = nvfp4_tensor(16);
        let mut bytes = encode_packed(&[qt]).unwrap();
        let scale_at = bytes.len() - 4 - 8 - 1;
        bytes[scale_at] = 0x7f;
        let body = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..body]);
        bytes[body..].copy_from_slice(&crc.to_le_bytes());
        match decode_packed(&bytes) {
            Err(Error::Corrupt { offset, .. }) => assert_eq!(offset, scale_at as u64),
            other => panic!("unexpected {other:?}"),
        }
    }
}
