//! Stateless baseline models for MMIO registers.

use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BaselineModel {
    /// Returns the last value written to the register.
    Passthrough,
    Constant(u32),
    /// Consumes `size` input bytes `B` and returns `(B & mask) << left_shift`.
    BitExtract { mask: u32, left_shift: u8, size: u8 },
}

impl BaselineModel {
    /// Model applied to registers the target config does not mention.
    pub fn default_for(size: u32) -> BaselineModel {
        let mask = if size >= 4 { u32::MAX } else { (1u32 << (8 * size)) - 1 };
        BaselineModel::BitExtract { mask, left_shift: 0, size: size as u8 }
    }

    /// Input bytes consumed per read.
    pub fn input_bytes(&self) -> usize {
        match *self {
            BaselineModel::BitExtract { size, .. } => size as usize,
            _ => 0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if let BaselineModel::BitExtract { mask, left_shift, size } = *self {
            if ![1, 2, 4].contains(&size) {
                return Err(format!("bitextract size {size} not in {{1,2,4}}"));
            }
            if size < 4 && mask >> (8 * size as u32) != 0 {
                return Err(format!("mask {mask:#x} wider than {size} bytes"));
            }
            if left_shift >= 32 {
                return Err(format!("shift {left_shift} too large"));
            }
        }
        Ok(())
    }
}

impl fmt::Display for BaselineModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            BaselineModel::Passthrough => write!(f, "passthrough"),
            BaselineModel::Constant(v) => write!(f, "constant:{v:#x}"),
            BaselineModel::BitExtract { mask, left_shift, size } => {
                write!(f, "bitextract:{mask:#x},{left_shift},{size}")
            }
        }
    }
}

pub(crate) fn parse_u32(s: &str) -> Result<u32, String> {
    let s = s.trim();
    let r = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(h) => u32::from_str_radix(h, 16),
        None => s.parse(),
    };
    r.map_err(|_| format!("bad number `{s}`"))
}

impl FromStr for BaselineModel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        let m = if s == "passthrough" {
            BaselineModel::Passthrough
        } else if let Some(v) = s.strip_prefix("constant:") {
            BaselineModel::Constant(parse_u32(v)?)
        } else if let Some(v) = s.strip_prefix("bitextract:") {
            let parts: Vec<&str> = v.split(',').collect();
            let [mask, shift, size] = parts.as_slice() else {
                return Err(format!("bitextract needs mask,shift,size: `{s}`"));
            };
            BaselineModel::BitExtract {
                mask: parse_u32(mask)?,
                left_shift: parse_u32(shift)? as u8,
                size: parse_u32(size)? as u8,
            }
        } else {
            return Err(format!("unknown model `{s}`"));
        };
        m.validate()?;
        Ok(m)
    }
}
