//! Deterministic concrete MiniMCU emulator.
//!
//! Execution is driven through [`Hooks`]: the embedder resolves MMIO reads and
//! observes blocks, instructions, memory traffic and interrupts. Interrupts
//! are only taken at block boundaries and never nest. A configured IRQ becomes
//! pending every `K` block entries; it is serviced at the next boundary where
//! no handler is active, lowest pending id first.

mod events;

pub use events::{EventKind, EventLog, ExecEvent};

use std::sync::Arc;

use crate::isa::image::{FirmwareImage, IVT_LEN, MMIO_BASE, MMIO_END, RAM_BASE};
use crate::isa::{build_cfg, Flags, Instruction, Operand, StaticCfg, Width, PC};

pub const DEFAULT_IRQ_PERIOD: u64 = 200;
pub const DEFAULT_MAX_BBS: u64 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VmConfig {
    /// `(irq_id, K)`: raise `irq_id` every `K` block entries.
    pub irq: Option<(u8, u64)>,
    pub max_bbs: u64,
}

impl Default for VmConfig {
    fn default() -> Self {
        VmConfig { irq: None, max_bbs: DEFAULT_MAX_BBS }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, thiserror::Error)]
pub enum Fault {
    #[error("invalid instruction at {0:#010x}")]
    InvalidInstruction(u32),
    #[error("misaligned access at {0:#010x}")]
    Misaligned(u32),
    #[error("unmapped access at {0:#010x}")]
    Unmapped(u32),
    #[error("write to code at {0:#010x}")]
    CodeWrite(u32),
    #[error("IRET outside an interrupt handler")]
    IretWithoutFrame,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stop {
    Halted,
    Fault(Fault),
    Hang,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct IrqFrame {
    pub pc: u32,
    pub flags: Flags,
    pub context: u32,
    pub seq: u32,
    pub irq: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MachineState {
    pub regs: [u32; 16],
    pub flags: Flags,
    pub ram: Vec<u8>,
    pub pc: u32,
    pub bb_count: u64,
    /// Address of the active ISR, 0 outside handlers.
    pub irq_context: u32,
    /// Instance number of the active ISR (per IRQ line, from 1), 0 outside.
    pub irq_seq: u32,
    pub irq_stack: Vec<IrqFrame>,
    pub irq_counts: [u32; IVT_LEN],
    pub pending_irqs: u16,
    pub dropped_irqs: u32,
    /// Last value written to each MMIO register, for passthrough models.
    pub mmio_latch: Vec<(u32, u32)>,
    /// The next step begins a basic block.
    pub at_block_start: bool,
    pub stop: Option<Stop>,
}

impl MachineState {
    pub fn new(image: &FirmwareImage) -> MachineState {
        let mut regs = [0u32; 16];
        regs[crate::isa::SP as usize] = image.initial_sp();
        MachineState {
            regs,
            flags: Flags::default(),
            ram: vec![0; image.ram_size as usize],
            pc: crate::isa::image::ENTRY,
            bb_count: 0,
            irq_context: 0,
            irq_seq: 0,
            irq_stack: Vec::new(),
            irq_counts: [0; IVT_LEN],
            pending_irqs: 0,
            dropped_irqs: 0,
            mmio_latch: Vec::new(),
            at_block_start: true,
            stop: None,
        }
    }

    #[inline]
    pub fn reg(&self, r: u8) -> u32 {
        if r == PC {
            self.pc
        } else {
            self.regs[r as usize]
        }
    }

    #[inline]
    pub fn set_reg(&mut self, r: u8, v: u32) {
        if r != PC {
            self.regs[r as usize] = v;
        }
    }

    pub fn latch(&self, addr: u32) -> u32 {
        self.mmio_latch.iter().find(|(a, _)| *a == addr).map_or(0, |&(_, v)| v)
    }

    fn set_latch(&mut self, addr: u32, v: u32) {
        match self.mmio_latch.iter_mut().find(|(a, _)| *a == addr) {
            Some(e) => e.1 = v,
            None => self.mmio_latch.push((addr, v)),
        }
    }

    pub fn ram_byte(&self, addr: u32) -> Option<u8> {
        self.ram.get(addr.wrapping_sub(RAM_BASE) as usize).copied()
    }

    pub fn is_halted(&self) -> bool {
        self.stop.is_some()
    }
}

/// A snapshot is an immutable full copy of the machine state.
pub type Snapshot = Arc<MachineState>;

/// Observer and MMIO provider for a running machine.
pub trait Hooks {
    fn mmio_read(&mut self, st: &MachineState, pc: u32, addr: u32, size: u32) -> u32;
    fn bb_enter(&mut self, _st: &MachineState) {}
    fn before_insn(&mut self, _st: &MachineState, _insn: &Instruction) {}
    fn mmio_write(&mut self, _st: &MachineState, _pc: u32, _addr: u32, _size: u32, _value: u32) {}
    fn ram_read(&mut self, _st: &MachineState, _pc: u32, _addr: u32, _size: u32, _value: u32) {}
    fn ram_write(&mut self, _st: &MachineState, _pc: u32, _addr: u32, _size: u32, _value: u32) {}
    fn irq_enter(&mut self, _st: &MachineState, _irq: u8) {}
    fn irq_exit(&mut self, _st: &MachineState) {}
    fn stopped(&mut self, _st: &MachineState, _stop: Stop) {}
}

impl<F: FnMut(u32, u32) -> u32> Hooks for F {
    fn mmio_read(&mut self, _st: &MachineState, _pc: u32, addr: u32, size: u32) -> u32 {
        self(addr, size)
    }
}

/// An image with its instructions predecoded and block leaders marked.
#[derive(Debug)]
pub struct Program {
    pub image: FirmwareImage,
    pub cfg: StaticCfg,
    insns: Vec<Option<Instruction>>,
    leaders: Vec<bool>,
}

impl Program {
    pub fn new(image: FirmwareImage) -> Arc<Program> {
        let cfg = build_cfg(&image);
        let words = image.code.len() / 4;
        let insns = (0..words)
            .map(|i| image.word(4 * i as u32).and_then(|w| Instruction::decode(w).ok()))
            .collect();
        let mut leaders = vec![false; words];
        for &b in &cfg.blocks {
            leaders[(b / 4) as usize] = true;
        }
        Arc::new(Program { image, cfg, insns, leaders })
    }

    #[inline]
    pub fn insn_at(&self, pc: u32) -> Option<Instruction> {
        if !pc.is_multiple_of(4) {
            return None;
        }
        self.insns.get((pc / 4) as usize).copied().flatten()
    }

    #[inline]
    pub fn is_leader(&self, pc: u32) -> bool {
        pc.is_multiple_of(4) && self.leaders.get((pc / 4) as usize).copied().unwrap_or(false)
    }

    pub fn initial_state(&self) -> MachineState {
        MachineState::new(&self.image)
    }
}

#[derive(Debug, Clone)]
pub struct Machine {
    pub program: Arc<Program>,
    pub state: MachineState,
    pub config: VmConfig,
}

impl Machine {
    pub fn new(program: Arc<Program>, config: VmConfig) -> Machine {
        let state = program.initial_state();
        Machine { program, state, config }
    }

    pub fn snapshot(&self) -> Snapshot {
        Arc::new(self.state.clone())
    }

    pub fn restore(&mut self, snap: &Snapshot) {
        self.state = (**snap).clone();
    }

    /// Runs until the machine stops.
    pub fn run<H: Hooks>(&mut self, hooks: &mut H) -> Stop {
        loop {
            if let Some(s) = self.step(hooks) {
                return s;
            }
        }
    }

    /// Executes one instruction, first processing a pending block boundary.
    pub fn step_events<P: FnMut(u32, u32) -> u32>(&mut self, provider: P) -> Vec<ExecEvent> {
        let mut log = EventLog::new(provider);
        self.step(&mut log);
        log.events
    }

    /// Raises `irq` now. Enters the handler immediately when no handler is
    /// active, otherwise leaves it pending. Returns whether it was entered.
    pub fn fire_irq<H: Hooks>(&mut self, irq: u8, hooks: &mut H) -> bool {
        if self.state.is_halted() {
            return false;
        }
        if self.program.image.ivt(irq as usize) == 0 {
            self.state.dropped_irqs += 1;
            return false;
        }
        if !self.state.irq_stack.is_empty() {
            self.state.pending_irqs |= 1 << irq;
            return false;
        }
        self.enter_irq(irq, hooks);
        true
    }

    fn enter_irq<H: Hooks>(&mut self, irq: u8, hooks: &mut H) {
        let st = &mut self.state;
        let isr = self.program.image.ivt(irq as usize);
        st.pending_irqs &= !(1 << irq);
        st.irq_counts[irq as usize] += 1;
        st.irq_stack.push(IrqFrame {
            pc: st.pc,
            flags: st.flags,
            context: st.irq_context,
            seq: st.irq_seq,
            irq,
        });
        st.irq_context = isr;
        st.irq_seq = st.irq_counts[irq as usize];
        st.pc = isr;
        st.at_block_start = true;
        hooks.irq_enter(&self.state, irq);
    }

    fn stop<H: Hooks>(&mut self, s: Stop, hooks: &mut H) -> Option<Stop> {
        self.state.stop = Some(s);
        hooks.stopped(&self.state, s);
        Some(s)
    }

    fn fault<H: Hooks>(&mut self, f: Fault, hooks: &mut H) -> Option<Stop> {
        self.stop(Stop::Fault(f), hooks)
    }

    /// Takes a pending interrupt if possible, then counts the block entry.
    fn enter_block<H: Hooks>(&mut self, hooks: &mut H) -> Option<Stop> {
        while self.state.irq_stack.is_empty() && self.state.pending_irqs != 0 {
            let irq = self.state.pending_irqs.trailing_zeros() as u8;
            if self.program.image.ivt(irq as usize) == 0 {
                self.state.pending_irqs &= !(1 << irq);
                self.state.dropped_irqs += 1;
                continue;
            }
            self.enter_irq(irq, hooks);
        }
        let st = &mut self.state;
        st.at_block_start = false;
        st.bb_count += 1;
        hooks.bb_enter(&self.state);
        let st = &mut self.state;
        if let Some((irq, k)) = self.config.irq {
            if k > 0 && st.bb_count.is_multiple_of(k) {
                st.pending_irqs |= 1 << irq;
            }
        }
        if st.bb_count >= self.config.max_bbs {
            return self.stop(Stop::Hang, hooks);
        }
        None
    }

    /// One instruction. Returns the stop reason once the machine stops.
    pub fn step<H: Hooks>(&mut self, hooks: &mut H) -> Option<Stop> {
        if let Some(s) = self.state.stop {
            return Some(s);
        }
        if self.state.at_block_start {
            if let Some(s) = self.enter_block(hooks) {
                return Some(s);
            }
        }
        let pc = self.state.pc;
        let Some(insn) = self.program.insn_at(pc) else {
            return self.fault(Fault::InvalidInstruction(pc), hooks);
        };
        hooks.before_insn(&self.state, &insn);
        let mut next = pc.wrapping_add(4);
        let st = &mut self.state;
        match insn {
            Instruction::Nop => {}
            Instruction::Halt => return self.stop(Stop::Halted, hooks),
            Instruction::Ldi { rd, imm } => st.set_reg(rd, imm as u32),
            Instruction::Movhi { rd, imm } => {
                let v = (st.reg(rd) & 0xffff) | ((imm as u32) << 16);
                st.set_reg(rd, v);
            }
            Instruction::Mov { rd, rs } => {
                let v = st.reg(rs);
                st.set_reg(rd, v);
            }
            Instruction::Alu { op, rd, rs1, src } => {
                let b = match src {
                    Operand::Reg(r) => st.reg(r),
                    Operand::Imm(i) => i as u32,
                };
                let v = op.apply(st.reg(rs1), b);
                st.set_reg(rd, v);
            }
            Instruction::Cmp { rs1, src } => {
                let b = match src {
                    Operand::Reg(r) => st.reg(r),
                    Operand::Imm(i) => i as u32,
                };
                st.flags = Flags::from_compare(st.reg(rs1), b);
            }
            Instruction::Load { width, rd, base, offset } => {
                let addr = st.reg(base).wrapping_add(offset as u32);
                match self.load(pc, addr, width, hooks) {
                    Ok(v) => self.state.set_reg(rd, v),
                    Err(f) => return self.fault(f, hooks),
                }
            }
            Instruction::Store { width, src, base, offset } => {
                let addr = st.reg(base).wrapping_add(offset as u32);
                let v = st.reg(src);
                if let Err(f) = self.store(pc, addr, width, v, hooks) {
                    return self.fault(f, hooks);
                }
            }
            Instruction::Branch { cond, offset } => {
                if cond.holds(st.flags) {
                    next = pc.wrapping_add(offset as u32);
                }
            }
            Instruction::Jal { offset } => {
                st.set_reg(crate::isa::LR, pc.wrapping_add(4));
                next = pc.wrapping_add(offset as u32);
            }
            Instruction::Jr { rs } => next = st.reg(rs),
            Instruction::Iret => {
                let Some(frame) = st.irq_stack.pop() else {
                    return self.fault(Fault::IretWithoutFrame, hooks);
                };
                st.flags = frame.flags;
                st.irq_context = frame.context;
                st.irq_seq = frame.seq;
                next = frame.pc;
                st.pc = next;
                st.at_block_start = true;
                hooks.irq_exit(&self.state);
                return None;
            }
        }
        let st = &mut self.state;
        st.pc = next;
        st.at_block_start = insn.ends_block() || self.program.is_leader(next);
        None
    }

    fn load<H: Hooks>(&mut self, pc: u32, addr: u32, width: Width, hooks: &mut H) -> Result<u32, Fault> {
        let size = width.bytes();
        if size == 4 && !addr.is_multiple_of(4) {
            return Err(Fault::Misaligned(addr));
        }
        let img = &self.program.image;
        if (addr as usize) < img.code.len() {
            let a = addr as usize;
            return Ok(match width {
                Width::Byte => img.code[a] as u32,
                Width::Word => img.word(addr).ok_or(Fault::Unmapped(addr))?,
            });
        }
        if (MMIO_BASE..=MMIO_END).contains(&addr) {
            let raw = hooks.mmio_read(&self.state, pc, addr, size);
            return Ok(if size == 1 { raw & 0xff } else { raw });
        }
        let off = addr.wrapping_sub(RAM_BASE) as usize;
        let ram = &self.state.ram;
        if addr >= RAM_BASE && off + size as usize <= ram.len() {
            let v = match width {
                Width::Byte => ram[off] as u32,
                Width::Word => u32::from_le_bytes(ram[off..off + 4].try_into().unwrap()),
            };
            hooks.ram_read(&self.state, pc, addr, size, v);
            return Ok(v);
        }
        Err(Fault::Unmapped(addr))
    }

    fn store<H: Hooks>(&mut self, pc: u32, addr: u32, width: Width, v: u32, hooks: &mut H) -> Result<(), Fault> {
        let size = width.bytes();
        if size == 4 && !addr.is_multiple_of(4) {
            return Err(Fault::Misaligned(addr));
        }
        if (addr as usize) < self.program.image.code.len() {
            return Err(Fault::CodeWrite(addr));
        }
        let v = if size == 1 { v & 0xff } else { v };
        if (MMIO_BASE..=MMIO_END).contains(&addr) {
            self.state.set_latch(addr, v);
            hooks.mmio_write(&self.state, pc, addr, size, v);
            return Ok(());
        }
        let off = addr.wrapping_sub(RAM_BASE) as usize;
        let ram = &mut self.state.ram;
        if addr >= RAM_BASE && off + size as usize <= ram.len() {
            match width {
                Width::Byte => ram[off] = v as u8,
                Width::Word => ram[off..off + 4].copy_from_slice(&v.to_le_bytes()),
            }
            hooks.ram_write(&self.state, pc, addr, size, v);
            return Ok(());
        }
        Err(Fault::Unmapped(addr))
    }
}
