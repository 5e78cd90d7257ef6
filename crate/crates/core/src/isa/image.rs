//! Firmware images, the MiniMCU memory map and the `.mmcu` container format.
//!
//! Container layout (all integers little-endian):
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0 | 4 | magic `MMCU` |
//! | 4 | 1 | version (1) |
//! | 5 | 3 | reserved, zero |
//! | 8 | 4 | initial SP |
//! | 12 | 64 | IVT, 16 words |
//! | 76 | 4 | RAM size |
//! | 80 | 4 | code length `n` |
//! | 84 | 4 | symbol count `s` |
//! | 88 | 4 | stateless-model count `m` |
//! | 92 | n | code bytes, loaded at address 0 |
//! | .. | .. | `s` symbols: address u32, name length u16, UTF-8 name |
//! | .. | .. | `m` models: register u32, kind u8, a u32, b u8, c u8 |
//!
//! Model kinds: 0 passthrough, 1 constant (`a` = value), 2 bit-extract
//! (`a` = mask, `b` = left shift, `c` = size in bytes).
//! The header words duplicate the first 68 code bytes and must agree.

use std::collections::BTreeMap;

use crate::fuzz::BaselineModel;

pub const CODE_BASE: u32 = 0x0000_0000;
pub const RAM_BASE: u32 = 0x2000_0000;
pub const MMIO_BASE: u32 = 0x4000_0000;
pub const MMIO_END: u32 = 0x4000_ffff;
pub const IVT_LEN: usize = 16;
/// Initial SP word plus the IVT.
pub const HEADER_BYTES: u32 = 4 * (1 + IVT_LEN as u32);
/// Execution starts at the first word after the header.
pub const ENTRY: u32 = HEADER_BYTES;
pub const DEFAULT_RAM_SIZE: u32 = 0x1000;

const MAGIC: &[u8; 4] = b"MMCU";
const VERSION: u8 = 1;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ImageError {
    #[error("bad magic")]
    Magic,
    #[error("unsupported container version {0}")]
    Version(u8),
    #[error("container truncated at offset {0}")]
    Truncated(usize),
    #[error("header disagrees with code bytes")]
    HeaderMismatch,
    #[error("symbol name is not UTF-8")]
    SymbolName,
    #[error("unknown model kind {0}")]
    ModelKind(u8),
    #[error("IVT[{0}] = {1:#x} is not a code address")]
    BadVector(usize, u32),
    #[error("image too small to hold the header")]
    NoHeader,
    #[error("RAM size {0:#x} out of range")]
    RamSize(u32),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FirmwareImage {
    pub code: Vec<u8>,
    pub ram_size: u32,
    pub symbols: BTreeMap<String, u32>,
    pub stateless_models: BTreeMap<u32, BaselineModel>,
}

impl FirmwareImage {
    pub fn word(&self, addr: u32) -> Option<u32> {
        let a = addr as usize;
        let b = self.code.get(a..a + 4)?;
        Some(u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn initial_sp(&self) -> u32 {
        self.word(0).unwrap_or(0)
    }

    pub fn ivt(&self, irq: usize) -> u32 {
        self.word(4 + 4 * irq as u32).unwrap_or(0)
    }

    pub fn ram_end(&self) -> u32 {
        RAM_BASE + self.ram_size
    }

    pub fn is_code(&self, addr: u32) -> bool {
        (addr as usize) < self.code.len()
    }

    pub fn is_ram(&self, addr: u32) -> bool {
        (RAM_BASE..self.ram_end()).contains(&addr)
    }

    pub fn symbol(&self, name: &str) -> Option<u32> {
        self.symbols.get(name).copied()
    }

    /// Symbol whose address is the greatest one not above `addr`.
    pub fn symbolize(&self, addr: u32) -> Option<(&str, u32)> {
        self.symbols
            .iter()
            .filter(|(_, &a)| a <= addr)
            .max_by_key(|(_, &a)| a)
            .map(|(n, &a)| (n.as_str(), addr - a))
    }

    pub fn validate(&self) -> Result<(), ImageError> {
        if self.code.len() < HEADER_BYTES as usize {
            return Err(ImageError::NoHeader);
        }
        if self.ram_size == 0 || self.ram_size > MMIO_BASE - RAM_BASE {
            return Err(ImageError::RamSize(self.ram_size));
        }
        for i in 0..IVT_LEN {
            let v = self.ivt(i);
            if v != 0 && (!v.is_multiple_of(4) || v < ENTRY || !self.is_code(v)) {
                return Err(ImageError::BadVector(i, v));
            }
        }
        Ok(())
    }

    pub fn to_container(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(96 + self.code.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&[0; 3]);
        out.extend_from_slice(&self.initial_sp().to_le_bytes());
        for i in 0..IVT_LEN {
            out.extend_from_slice(&self.ivt(i).to_le_bytes());
        }
        out.extend_from_slice(&self.ram_size.to_le_bytes());
        out.extend_from_slice(&(self.code.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.symbols.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.stateless_models.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.code);
        for (name, addr) in &self.symbols {
            out.extend_from_slice(&addr.to_le_bytes());
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
        }
        for (reg, m) in &self.stateless_models {
            out.extend_from_slice(&reg.to_le_bytes());
            let (kind, a, b, c) = match *m {
                BaselineModel::Passthrough => (0u8, 0u32, 0u8, 0u8),
                BaselineModel::Constant(v) => (1, v, 0, 0),
                BaselineModel::BitExtract { mask, left_shift, size } => (2, mask, left_shift, size),
            };
            out.push(kind);
            out.extend_from_slice(&a.to_le_bytes());
            out.push(b);
            out.push(c);
        }
        out
    }

    pub fn from_container(data: &[u8]) -> Result<FirmwareImage, ImageError> {
        let mut r = Reader { data, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(ImageError::Magic);
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(ImageError::Version(version));
        }
        r.take(3)?;
        let sp = r.u32()?;
        let mut ivt = [0u32; IVT_LEN];
        for v in ivt.iter_mut() {
            *v = r.u32()?;
        }
        let ram_size = r.u32()?;
        let code_len = r.u32()? as usize;
        let nsyms = r.u32()?;
        let nmodels = r.u32()?;
        let code = r.take(code_len)?.to_vec();
        let mut symbols = BTreeMap::new();
        for _ in 0..nsyms {
            let addr = r.u32()?;
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| ImageError::SymbolName)?;
            symbols.insert(name.to_string(), addr);
        }
        let mut stateless_models = BTreeMap::new();
        for _ in 0..nmodels {
            let reg = r.u32()?;
            let kind = r.u8()?;
            let a = r.u32()?;
            let b = r.u8()?;
            let c = r.u8()?;
            let m = match kind {
                0 => BaselineModel::Passthrough,
                1 => BaselineModel::Constant(a),
                2 => BaselineModel::BitExtract { mask: a, left_shift: b, size: c },
                k => return Err(ImageError::ModelKind(k)),
            };
            stateless_models.insert(reg, m);
        }
        let img = FirmwareImage { code, ram_size, symbols, stateless_models };
        if img.initial_sp() != sp || (0..IVT_LEN).any(|i| img.ivt(i) != ivt[i]) {
            return Err(ImageError::HeaderMismatch);
        }
        Ok(img)
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ImageError> {
        let s = self
            .data
            .get(self.pos..self.pos + n)
            .ok_or(ImageError::Truncated(self.pos))?;
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, ImageError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, ImageError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, ImageError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::assemble;

    fn sample() -> FirmwareImage {
        let mut img = assemble(
            ".stack 0x20000800\n.vector 3, isr\nstart: NOP\nHALT\nisr: IRET\nmsg: .ascii \"hi\"\n",
        )
        .unwrap();
        img.stateless_models.insert(0x4000_0818, BaselineModel::BitExtract { mask: 0xff, left_shift: 0, size: 1 });
        img.stateless_models.insert(0x4000_0814, BaselineModel::Constant(1));
        img.stateless_models.insert(0x4000_0800, BaselineModel::Passthrough);
        img
    }

    #[test]
    fn container_round_trip() {
        let img = sample();
        let bytes = img.to_container();
        assert_eq!(&bytes[..4], b"MMCU");
        assert_eq!(bytes[4], 1);
        assert_eq!(FirmwareImage::from_container(&bytes).unwrap(), img);
    }

    #[test]
    fn container_errors() {
        let bytes = sample().to_container();
        assert_eq!(FirmwareImage::from_container(b"XXXX"), Err(ImageError::Magic));
        assert!(matches!(
            FirmwareImage::from_container(&bytes[..bytes.len() - 1]),
            Err(ImageError::Truncated(_))
        ));
        let mut bad = bytes.clone();
        bad[8] ^= 1;
        assert_eq!(FirmwareImage::from_container(&bad), Err(ImageError::HeaderMismatch));
    }

    #[test]
    fn header_accessors() {
        let img = sample();
        assert_eq!(img.initial_sp(), 0x2000_0800);
        assert_eq!(img.ivt(3), img.symbol("isr").unwrap());
        assert_eq!(img.ivt(0), 0);
        assert_eq!(img.symbol("start"), Some(ENTRY));
        img.validate().unwrap();
    }

    #[test]
    fn bad_vector_rejected() {
        let mut img = sample();
        img.code[4..8].copy_from_slice(&0x9999_0000u32.to_le_bytes());
        assert!(matches!(img.validate(), Err(ImageError::BadVector(0, _))));
    }
}
