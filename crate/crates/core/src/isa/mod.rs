//! MiniMCU-32: a fixed-width 32-bit little-endian instruction set.
//!
//! Word layout (bit ranges inclusive):
//!
//! ```text
//!  31      26 25   22 21   18 17   14 13                0
//! +----------+-------+-------+-------+------------------+
//! |  opcode  |  rd   |  rs1  |  rs2  |   must be zero   |   register forms
//! +----------+-------+-------+-------+------------------+
//! |  opcode  |  rd   |  rs1  |     imm18 (signed)       |   immediate forms
//! +----------+-------+-------+--------------------------+
//! ```
//!
//! Stores carry the value register in the `rd` field. `Bcc` carries its
//! condition in the `rd` field and a byte offset relative to the branch
//! itself in `imm18`. `JAL` uses the same relative offset and writes `r14`.
//! ALU operations and `CMP` exist in a register and an immediate form that
//! share a mnemonic and differ in opcode number.
//!
//! Register conventions: `r13` is the stack pointer, `r14` the link register
//! and `r15` reads as the address of the executing instruction. `r15` can't
//! be written.

pub mod asm;
pub mod cfg;
pub mod image;

pub use asm::{assemble, disassemble, AsmError};
pub use cfg::{build_cfg, EdgeKind, StaticCfg};
pub use image::{FirmwareImage, ImageError};

use std::fmt;

pub const SP: u8 = 13;
pub const LR: u8 = 14;
pub const PC: u8 = 15;

pub const IMM_MIN: i32 = -(1 << 17);
pub const IMM_MAX: i32 = (1 << 17) - 1;

/// Register-to-register ALU operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AluOp {
    Add,
    Sub,
    And,
    Or,
    Xor,
    Shl,
    Shr,
}

impl AluOp {
    pub const ALL: [AluOp; 7] = [
        AluOp::Add,
        AluOp::Sub,
        AluOp::And,
        AluOp::Or,
        AluOp::Xor,
        AluOp::Shl,
        AluOp::Shr,
    ];

    pub fn mnemonic(self) -> &'static str {
        match self {
            AluOp::Add => "ADD",
            AluOp::Sub => "SUB",
            AluOp::And => "AND",
            AluOp::Or => "OR",
            AluOp::Xor => "XOR",
            AluOp::Shl => "SHL",
            AluOp::Shr => "SHR",
        }
    }

    /// Concrete semantics. Shift amounts use the low five bits.
    #[inline]
    pub fn apply(self, a: u32, b: u32) -> u32 {
        match self {
            AluOp::Add => a.wrapping_add(b),
            AluOp::Sub => a.wrapping_sub(b),
            AluOp::And => a & b,
            AluOp::Or => a | b,
            AluOp::Xor => a ^ b,
            AluOp::Shl => a << (b & 31),
            AluOp::Shr => a >> (b & 31),
        }
    }

    fn index(self) -> u32 {
        AluOp::ALL.iter().position(|&o| o == self).unwrap() as u32
    }
}

/// Branch conditions evaluated against the flags written by `CMP`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cond {
    Eq,
    Ne,
    Lt,
    Ge,
    Ltu,
    Geu,
    Al,
}

impl Cond {
    pub const ALL: [Cond; 7] = [
        Cond::Eq,
        Cond::Ne,
        Cond::Lt,
        Cond::Ge,
        Cond::Ltu,
        Cond::Geu,
        Cond::Al,
    ];

    pub fn suffix(self) -> &'static str {
        match self {
            Cond::Eq => "EQ",
            Cond::Ne => "NE",
            Cond::Lt => "LT",
            Cond::Ge => "GE",
            Cond::Ltu => "LTU",
            Cond::Geu => "GEU",
            Cond::Al => "AL",
        }
    }

    #[inline]
    pub fn holds(self, f: Flags) -> bool {
        match self {
            Cond::Eq => f.z,
            Cond::Ne => !f.z,
            Cond::Lt => f.n != f.v,
            Cond::Ge => f.n == f.v,
            Cond::Ltu => f.c,
            Cond::Geu => !f.c,
            Cond::Al => true,
        }
    }

    /// Evaluates the condition directly on the compared operands.
    #[inline]
    pub fn compare(self, a: u32, b: u32) -> bool {
        match self {
            Cond::Eq => a == b,
            Cond::Ne => a != b,
            Cond::Lt => (a as i32) < (b as i32),
            Cond::Ge => (a as i32) >= (b as i32),
            Cond::Ltu => a < b,
            Cond::Geu => a >= b,
            Cond::Al => true,
        }
    }

    pub fn negate(self) -> Option<Cond> {
        Some(match self {
            Cond::Eq => Cond::Ne,
            Cond::Ne => Cond::Eq,
            Cond::Lt => Cond::Ge,
            Cond::Ge => Cond::Lt,
            Cond::Ltu => Cond::Geu,
            Cond::Geu => Cond::Ltu,
            Cond::Al => return None,
        })
    }
}

/// Z, N, C, V. `C` is set when the subtraction borrows (unsigned less-than).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct Flags {
    pub z: bool,
    pub n: bool,
    pub c: bool,
    pub v: bool,
}

impl Flags {
    #[inline]
    pub fn from_compare(a: u32, b: u32) -> Flags {
        let r = a.wrapping_sub(b);
        Flags {
            z: r == 0,
            n: (r as i32) < 0,
            c: a < b,
            v: ((a ^ b) & (a ^ r)) >> 31 == 1,
        }
    }

    pub fn bits(self) -> u8 {
        (self.z as u8) | (self.n as u8) << 1 | (self.c as u8) << 2 | (self.v as u8) << 3
    }

    pub fn from_bits(b: u8) -> Flags {
        Flags {
            z: b & 1 != 0,
            n: b & 2 != 0,
            c: b & 4 != 0,
            v: b & 8 != 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operand {
    Reg(u8),
    Imm(i32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Width {
    Byte,
    Word,
}

impl Width {
    pub fn bytes(self) -> u32 {
        match self {
            Width::Byte => 1,
            Width::Word => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Instruction {
    Nop,
    Halt,
    /// `rd := sext(imm18)`
    Ldi { rd: u8, imm: i32 },
    /// `rd := (imm16 << 16) | (rd & 0xffff)`
    Movhi { rd: u8, imm: u16 },
    Mov { rd: u8, rs: u8 },
    Alu { op: AluOp, rd: u8, rs1: u8, src: Operand },
    Load { width: Width, rd: u8, base: u8, offset: i32 },
    Store { width: Width, src: u8, base: u8, offset: i32 },
    Cmp { rs1: u8, src: Operand },
    Branch { cond: Cond, offset: i32 },
    Jal { offset: i32 },
    Jr { rs: u8 },
    Iret,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("unknown opcode {0:#x}")]
    UnknownOpcode(u32),
    #[error("non-canonical encoding {0:#010x}")]
    NonCanonical(u32),
    #[error("invalid register in {0:#010x}")]
    BadRegister(u32),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EncodeError {
    #[error("register r{0} out of range")]
    Register(u8),
    #[error("r15 is not writable")]
    WritesPc,
    #[error("immediate {0} does not fit in 18 signed bits")]
    Immediate(i64),
    #[error("branch offset {0} is not a multiple of 4")]
    Misaligned(i32),
}

mod op {
    pub const NOP: u32 = 0;
    pub const HALT: u32 = 1;
    pub const LDI: u32 = 2;
    pub const MOVHI: u32 = 3;
    pub const MOV: u32 = 4;
    pub const ALU_REG: u32 = 5; // 5..=11
    pub const ALU_IMM: u32 = 12; // 12..=18
    pub const LDB: u32 = 19;
    pub const LDW: u32 = 20;
    pub const STB: u32 = 21;
    pub const STW: u32 = 22;
    pub const CMP_REG: u32 = 23;
    pub const CMP_IMM: u32 = 24;
    pub const BCC: u32 = 25;
    pub const JAL: u32 = 26;
    pub const JR: u32 = 27;
    pub const IRET: u32 = 28;
}

fn pack(opcode: u32, rd: u8, rs1: u8, low18: u32) -> u32 {
    opcode << 26 | (rd as u32) << 22 | (rs1 as u32) << 18 | (low18 & 0x3_ffff)
}

fn imm_bits(imm: i32) -> Result<u32, EncodeError> {
    if !(IMM_MIN..=IMM_MAX).contains(&imm) {
        return Err(EncodeError::Immediate(imm as i64));
    }
    Ok(imm as u32 & 0x3_ffff)
}

fn reg(r: u8) -> Result<u8, EncodeError> {
    if r > 15 {
        Err(EncodeError::Register(r))
    } else {
        Ok(r)
    }
}

fn dest(r: u8) -> Result<u8, EncodeError> {
    match reg(r)? {
        PC => Err(EncodeError::WritesPc),
        r => Ok(r),
    }
}

#[inline]
fn sext18(bits: u32) -> i32 {
    ((bits << 14) as i32) >> 14
}

impl Instruction {
    pub fn encode(&self) -> Result<u32, EncodeError> {
        use Instruction::*;
        Ok(match *self {
            Nop => pack(op::NOP, 0, 0, 0),
            Halt => pack(op::HALT, 0, 0, 0),
            Ldi { rd, imm } => pack(op::LDI, dest(rd)?, 0, imm_bits(imm)?),
            Movhi { rd, imm } => pack(op::MOVHI, dest(rd)?, 0, imm as u32),
            Mov { rd, rs } => pack(op::MOV, dest(rd)?, reg(rs)?, 0),
            Alu { op: o, rd, rs1, src } => match src {
                Operand::Reg(rs2) => pack(
                    op::ALU_REG + o.index(),
                    dest(rd)?,
                    reg(rs1)?,
                    (reg(rs2)? as u32) << 14,
                ),
                Operand::Imm(i) => pack(op::ALU_IMM + o.index(), dest(rd)?, reg(rs1)?, imm_bits(i)?),
            },
            Load { width, rd, base, offset } => {
                let code = if width == Width::Byte { op::LDB } else { op::LDW };
                pack(code, dest(rd)?, reg(base)?, imm_bits(offset)?)
            }
            Store { width, src, base, offset } => {
                let code = if width == Width::Byte { op::STB } else { op::STW };
                pack(code, reg(src)?, reg(base)?, imm_bits(offset)?)
            }
            Cmp { rs1, src } => match src {
                Operand::Reg(rs2) => pack(op::CMP_REG, 0, reg(rs1)?, (reg(rs2)? as u32) << 14),
                Operand::Imm(i) => pack(op::CMP_IMM, 0, reg(rs1)?, imm_bits(i)?),
            },
            Branch { cond, offset } => {
                if offset % 4 != 0 {
                    return Err(EncodeError::Misaligned(offset));
                }
                let c = Cond::ALL.iter().position(|&x| x == cond).unwrap() as u8;
                pack(op::BCC, c, 0, imm_bits(offset)?)
            }
            Jal { offset } => {
                if offset % 4 != 0 {
                    return Err(EncodeError::Misaligned(offset));
                }
                pack(op::JAL, 0, 0, imm_bits(offset)?)
            }
            Jr { rs } => pack(op::JR, 0, reg(rs)?, 0),
            Iret => pack(op::IRET, 0, 0, 0),
        })
    }

    /// Decodes a word. Only canonical encodings are accepted, so
    /// `decode(w)?.encode() == w` for every word that decodes.
    pub fn decode(word: u32) -> Result<Instruction, DecodeError> {
        use Instruction::*;
        let opcode = word >> 26;
        let rd = ((word >> 22) & 0xf) as u8;
        let rs1 = ((word >> 18) & 0xf) as u8;
        let rs2 = ((word >> 14) & 0xf) as u8;
        let low18 = word & 0x3_ffff;
        let low14 = word & 0x3fff;
        let imm = sext18(low18);
        let nc = || DecodeError::NonCanonical(word);
        let no_pc = |r: u8| {
            if r == PC {
                Err(DecodeError::BadRegister(word))
            } else {
                Ok(r)
            }
        };
        let insn = match opcode {
            op::NOP | op::HALT | op::IRET => {
                if word & 0x03ff_ffff != 0 {
                    return Err(nc());
                }
                match opcode {
                    op::NOP => Nop,
                    op::HALT => Halt,
                    _ => Iret,
                }
            }
            op::LDI => {
                if rs1 != 0 {
                    return Err(nc());
                }
                Ldi { rd: no_pc(rd)?, imm }
            }
            op::MOVHI => {
                if rs1 != 0 || low18 > 0xffff {
                    return Err(nc());
                }
                Movhi { rd: no_pc(rd)?, imm: low18 as u16 }
            }
            op::MOV => {
                if low18 != 0 {
                    return Err(nc());
                }
                Mov { rd: no_pc(rd)?, rs: rs1 }
            }
            o if (op::ALU_REG..op::ALU_REG + 7).contains(&o) => {
                if low14 != 0 {
                    return Err(nc());
                }
                Alu {
                    op: AluOp::ALL[(o - op::ALU_REG) as usize],
                    rd: no_pc(rd)?,
                    rs1,
                    src: Operand::Reg(rs2),
                }
            }
            o if (op::ALU_IMM..op::ALU_IMM + 7).contains(&o) => Alu {
                op: AluOp::ALL[(o - op::ALU_IMM) as usize],
                rd: no_pc(rd)?,
                rs1,
                src: Operand::Imm(imm),
            },
            op::LDB | op::LDW => Load {
                width: if opcode == op::LDB { Width::Byte } else { Width::Word },
                rd: no_pc(rd)?,
                base: rs1,
                offset: imm,
            },
            op::STB | op::STW => Store {
                width: if opcode == op::STB { Width::Byte } else { Width::Word },
                src: rd,
                base: rs1,
                offset: imm,
            },
            op::CMP_REG => {
                if rd != 0 || low14 != 0 {
                    return Err(nc());
                }
                Cmp { rs1, src: Operand::Reg(rs2) }
            }
            op::CMP_IMM => {
                if rd != 0 {
                    return Err(nc());
                }
                Cmp { rs1, src: Operand::Imm(imm) }
            }
            op::BCC => {
                if rs1 != 0 || imm % 4 != 0 || rd as usize >= Cond::ALL.len() {
                    return Err(nc());
                }
                Branch { cond: Cond::ALL[rd as usize], offset: imm }
            }
            op::JAL => {
                if rd != 0 || rs1 != 0 || imm % 4 != 0 {
                    return Err(nc());
                }
                Jal { offset: imm }
            }
            op::JR => {
                if rd != 0 || low18 != 0 {
                    return Err(nc());
                }
                Jr { rs: rs1 }
            }
            other => return Err(DecodeError::UnknownOpcode(other)),
        };
        Ok(insn)
    }

    /// True for instructions that end a basic block.
    pub fn ends_block(&self) -> bool {
        matches!(
            self,
            Instruction::Branch { .. }
                | Instruction::Jal { .. }
                | Instruction::Jr { .. }
                | Instruction::Iret
                | Instruction::Halt
        )
    }

    /// Register written by this instruction, if any.
    pub fn dest_reg(&self) -> Option<u8> {
        match *self {
            Instruction::Ldi { rd, .. }
            | Instruction::Movhi { rd, .. }
            | Instruction::Mov { rd, .. }
            | Instruction::Alu { rd, .. }
            | Instruction::Load { rd, .. } => Some(rd),
            Instruction::Jal { .. } => Some(LR),
            _ => None,
        }
    }
}

fn reg_name(r: u8) -> String {
    format!("r{r}")
}

fn fmt_operand(o: Operand) -> String {
    match o {
        Operand::Reg(r) => reg_name(r),
        Operand::Imm(i) => format!("#{i}"),
    }
}

fn fmt_mem(base: u8, offset: i32) -> String {
    if offset < 0 {
        format!("[{}-{}]", reg_name(base), -(offset as i64))
    } else {
        format!("[{}+{}]", reg_name(base), offset)
    }
}

impl fmt::Display for Instruction {
    /// Position-independent rendering; branch and call offsets are shown as
    /// relative `.+N` / `.-N` targets.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Instruction::*;
        let rel = |o: i32| if o < 0 { format!(".-{}", -(o as i64)) } else { format!(".+{o}") };
        match *self {
            Nop => write!(f, "NOP"),
            Halt => write!(f, "HALT"),
            Iret => write!(f, "IRET"),
            Ldi { rd, imm } => write!(f, "LDI {}, #{}", reg_name(rd), imm),
            Movhi { rd, imm } => write!(f, "MOVHI {}, #{}", reg_name(rd), imm),
            Mov { rd, rs } => write!(f, "MOV {}, {}", reg_name(rd), reg_name(rs)),
            Alu { op, rd, rs1, src } => write!(
                f,
                "{} {}, {}, {}",
                op.mnemonic(),
                reg_name(rd),
                reg_name(rs1),
                fmt_operand(src)
            ),
            Load { width, rd, base, offset } => write!(
                f,
                "{} {}, {}",
                if width == Width::Byte { "LDB" } else { "LDW" },
                reg_name(rd),
                fmt_mem(base, offset)
            ),
            Store { width, src, base, offset } => write!(
                f,
                "{} {}, {}",
                if width == Width::Byte { "STB" } else { "STW" },
                reg_name(src),
                fmt_mem(base, offset)
            ),
            Cmp { rs1, src } => write!(f, "CMP {}, {}", reg_name(rs1), fmt_operand(src)),
            Branch { cond, offset } => write!(f, "B{} {}", cond.suffix(), rel(offset)),
            Jal { offset } => write!(f, "JAL {}", rel(offset)),
            Jr { rs } => write!(f, "JR {}", reg_name(rs)),
        }
    }
}

#[cfg(test)]
pub(crate) mod testgen {
    use super::*;
    use proptest::prelude::*;

    fn any_reg() -> impl Strategy<Value = u8> {
        0u8..16
    }
    fn any_dest() -> impl Strategy<Value = u8> {
        0u8..15
    }
    fn any_imm() -> impl Strategy<Value = i32> {
        IMM_MIN..=IMM_MAX
    }
    fn any_rel() -> impl Strategy<Value = i32> {
        (IMM_MIN / 4..=IMM_MAX / 4).prop_map(|x| x * 4)
    }
    fn any_operand() -> impl Strategy<Value = Operand> {
        prop_oneof![any_reg().prop_map(Operand::Reg), any_imm().prop_map(Operand::Imm)]
    }
    fn any_width() -> impl Strategy<Value = Width> {
        prop_oneof![Just(Width::Byte), Just(Width::Word)]
    }

    /// Generator over every valid instruction.
    pub fn any_instruction() -> impl Strategy<Value = Instruction> {
        use Instruction::*;
        prop_oneof![
            Just(Nop),
            Just(Halt),
            Just(Iret),
            (any_dest(), any_imm()).prop_map(|(rd, imm)| Ldi { rd, imm }),
            (any_dest(), any::<u16>()).prop_map(|(rd, imm)| Movhi { rd, imm }),
            (any_dest(), any_reg()).prop_map(|(rd, rs)| Mov { rd, rs }),
            (0usize..7, any_dest(), any_reg(), any_operand()).prop_map(|(o, rd, rs1, src)| Alu {
                op: AluOp::ALL[o],
                rd,
                rs1,
                src
            }),
            (any_width(), any_dest(), any_reg(), any_imm())
                .prop_map(|(width, rd, base, offset)| Load { width, rd, base, offset }),
            (any_width(), any_reg(), any_reg(), any_imm())
                .prop_map(|(width, src, base, offset)| Store { width, src, base, offset }),
            (any_reg(), any_operand()).prop_map(|(rs1, src)| Cmp { rs1, src }),
            (0usize..7, any_rel()).prop_map(|(c, offset)| Branch { cond: Cond::ALL[c], offset }),
            any_rel().prop_map(|offset| Jal { offset }),
            any_reg().prop_map(|rs| Jr { rs }),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn nop_is_word_zero() {
        assert_eq!(Instruction::Nop.encode().unwrap(), 0);
        assert_eq!(Instruction::decode(0).unwrap(), Instruction::Nop);
    }

    #[test]
    fn rejects_pc_as_destination() {
        assert_eq!(
            Instruction::Mov { rd: 15, rs: 1 }.encode(),
            Err(EncodeError::WritesPc)
        );
        let w = pack(op::MOV, 15, 1, 0);
        assert!(Instruction::decode(w).is_err());
    }

    #[test]
    fn immediate_range() {
        assert!(Instruction::Ldi { rd: 1, imm: IMM_MAX }.encode().is_ok());
        assert!(Instruction::Ldi { rd: 1, imm: IMM_MAX + 1 }.encode().is_err());
        assert!(Instruction::Ldi { rd: 1, imm: IMM_MIN }.encode().is_ok());
        assert_eq!(
            Instruction::decode(Instruction::Ldi { rd: 2, imm: -1 }.encode().unwrap()).unwrap(),
            Instruction::Ldi { rd: 2, imm: -1 }
        );
    }

    #[test]
    fn flags_match_conditions() {
        for &(a, b) in &[(0u32, 0u32), (1, 2), (2, 1), (0x8000_0000, 1), (1, 0x8000_0000), (u32::MAX, 0)] {
            let f = Flags::from_compare(a, b);
            for c in Cond::ALL {
                assert_eq!(c.holds(f), c.compare(a, b), "{c:?} {a:#x} {b:#x}");
            }
        }
    }

    #[test]
    fn unknown_opcode() {
        assert_eq!(Instruction::decode(63 << 26), Err(DecodeError::UnknownOpcode(63)));
    }

    proptest! {
        #[test]
        fn encode_decode_bijective(i in testgen::any_instruction()) {
            let w = i.encode().unwrap();
            prop_assert_eq!(Instruction::decode(w).unwrap(), i);
        }

        #[test]
        fn decode_encode_on_valid_words(w in any::<u32>()) {
            if let Ok(i) = Instruction::decode(w) {
                prop_assert_eq!(i.encode().unwrap(), w);
            }
        }

        #[test]
        fn conditions_agree_with_flags(a in any::<u32>(), b in any::<u32>()) {
            let f = Flags::from_compare(a, b);
            for c in Cond::ALL {
                prop_assert_eq!(c.holds(f), c.compare(a, b));
            }
        }
    }
}
