//! Symbolic MiniMCU execution state.
//!
//! Semantics follow the concrete machine instruction for instruction,
//! including block accounting and periodic interrupts. Symbolic addresses
//! and jump targets are concretized to their value under the current model,
//! with an equality recorded in the path constraint.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use super::expr::{self, konst, zext, Constraint, Sym, Val};
use super::solver::Model;
use crate::corpus::Target;
use crate::fuzz::BaselineModel;
use crate::isa::image::{IVT_LEN, MMIO_BASE, MMIO_END, RAM_BASE};
use crate::isa::{AluOp, Cond, Flags, Instruction, Operand, Width, LR, PC, SP};
use crate::taint::DetailedTrace;
use crate::vm::{Fault, IrqFrame, MachineState, Program, VmConfig};

const PAGE: usize = 256;

/// Copy-on-write RAM with a symbolic overlay.
#[derive(Debug, Clone)]
pub struct SymMemory {
    len: usize,
    pages: Vec<Arc<[u8; PAGE]>>,
    sym: Arc<BTreeMap<u32, Sym>>,
}

impl SymMemory {
    pub fn from_ram(ram: &[u8]) -> SymMemory {
        let pages = ram
            .chunks(PAGE)
            .map(|c| {
                let mut p = [0u8; PAGE];
                p[..c.len()].copy_from_slice(c);
                Arc::new(p)
            })
            .collect();
        SymMemory { len: ram.len(), pages, sym: Arc::new(BTreeMap::new()) }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn concrete(&self, off: u32) -> u8 {
        self.pages[off as usize / PAGE][off as usize % PAGE]
    }

    pub fn byte(&self, off: u32) -> Sym {
        match self.sym.get(&off) {
            Some(e) => Arc::clone(e),
            None => konst(self.concrete(off) as u32, 8),
        }
    }

    pub fn set_byte(&mut self, off: u32, b: Sym) {
        match b.as_const() {
            Some(v) => {
                if self.sym.contains_key(&off) {
                    Arc::make_mut(&mut self.sym).remove(&off);
                }
                let page = Arc::make_mut(&mut self.pages[off as usize / PAGE]);
                page[off as usize % PAGE] = v as u8;
            }
            None => {
                Arc::make_mut(&mut self.sym).insert(off, b);
            }
        }
    }

    pub fn read(&self, off: u32, width: Width) -> Val {
        match width {
            Width::Byte => Val::sym(zext(self.byte(off), 32)),
            Width::Word => {
                if (off..off + 4).all(|o| !self.sym.contains_key(&o)) {
                    let b: [u8; 4] = std::array::from_fn(|i| self.concrete(off + i as u32));
                    return Val::C(u32::from_le_bytes(b));
                }
                Val::from_bytes(std::array::from_fn(|i| self.byte(off + i as u32)))
            }
        }
    }

    pub fn write(&mut self, off: u32, width: Width, v: &Val) {
        for i in 0..width.bytes() {
            self.set_byte(off + i, v.byte(i as u8));
        }
    }

    pub fn symbolic(&self) -> &BTreeMap<u32, Sym> {
        &self.sym
    }

    pub fn has_symbolic(&self) -> bool {
        !self.sym.is_empty()
    }

    /// Zeroes symbolic cells in `[lo, hi)`.
    pub fn clear_range(&mut self, lo: u32, hi: u32) {
        if self.sym.range(lo..hi).next().is_none() {
            return;
        }
        let keys: Vec<u32> = self.sym.range(lo..hi).map(|(k, _)| *k).collect();
        for k in keys {
            self.set_byte(k, konst(0, 8));
        }
    }

    pub fn to_ram(&self, model: &Model) -> Vec<u8> {
        let mut out: Vec<u8> = self.pages.iter().flat_map(|p| p.iter().copied()).take(self.len).collect();
        for (k, e) in self.sym.iter() {
            out[*k as usize] = e.eval(model) as u8;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum SymFlags {
    Concrete(Flags),
    Cmp(Val, Val),
}

impl SymFlags {
    fn compare(a: Val, b: Val) -> SymFlags {
        match (&a, &b) {
            (Val::C(x), Val::C(y)) => SymFlags::Concrete(Flags::from_compare(*x, *y)),
            _ => SymFlags::Cmp(a, b),
        }
    }

    pub fn eval(&self, model: &Model) -> Flags {
        match self {
            SymFlags::Concrete(f) => *f,
            SymFlags::Cmp(a, b) => Flags::from_compare(a.eval(model), b.eval(model)),
        }
    }

    fn is_symbolic(&self) -> bool {
        matches!(self, SymFlags::Cmp(..))
    }
}

#[derive(Debug, Clone)]
pub struct SymFrame {
    pub pc: u32,
    pub flags: SymFlags,
    pub context: u32,
    pub seq: u32,
    pub irq: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ReadRole {
    Recorded,
    Forced,
    Symbolic,
}

/// An MMIO read executed by a symbolic state.
#[derive(Debug, Clone)]
pub struct SymRead {
    pub addr: u32,
    pub pc: u32,
    pub isr: u32,
    /// Matching recorded read.
    pub trace: Option<usize>,
    /// Position within the explored group.
    pub group_pos: Option<usize>,
    pub role: ReadRole,
    pub value: Val,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Prune {
    /// A read with no matching recorded read left.
    NoTraceRead,
    /// Register file repeated since the last MMIO read.
    RepeatedRegisters,
    /// No symbolic data left after leaving a context.
    NoSymbolicData,
    Infeasible,
    Incomplete,
}

impl Prune {
    pub fn name(self) -> &'static str {
        match self {
            Prune::NoTraceRead => "no-trace-read",
            Prune::RepeatedRegisters => "repeated-registers",
            Prune::NoSymbolicData => "no-symbolic-data",
            Prune::Infeasible => "infeasible",
            Prune::Incomplete => "incomplete",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum End {
    Halted,
    Fault(Fault),
    Hang,
    Pruned(Prune),
}

impl End {
    pub fn name(self) -> &'static str {
        match self {
            End::Halted => "halted",
            End::Fault(_) => "fault",
            End::Hang => "hang",
            End::Pruned(p) => p.name(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Step {
    Continue,
    /// The state sits at a branch on symbolic flags.
    Branch { constraint: Constraint, taken: u32, fallthrough: u32 },
    End(End),
}

/// Recorded reads and blocks of a trace, indexed for lookup.
#[derive(Debug, Clone, Default)]
pub struct TraceIndex {
    pub reads: Vec<TraceRead>,
    by_key: HashMap<(u32, u32, u32), Vec<usize>>,
    pub bbs: Vec<(u64, u32, u32, u32)>,
    by_bb: HashMap<(u32, u32), Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceRead {
    pub bb_count: u64,
    pub seq: u32,
    pub addr: u32,
    pub pc: u32,
    pub isr: u32,
    pub irq_seq: u32,
    pub value: u32,
}

impl TraceIndex {
    pub fn new(trace: &DetailedTrace) -> TraceIndex {
        let mut ix = TraceIndex::default();
        for m in trace.mmio() {
            ix.by_key.entry((m.addr, m.pc, m.isr)).or_default().push(ix.reads.len());
            ix.reads.push(TraceRead {
                bb_count: m.time.bb_count,
                seq: m.time.seq,
                addr: m.addr,
                pc: m.pc,
                isr: m.isr,
                irq_seq: m.irq_seq,
                value: m.value,
            });
        }
        for b in trace.bbs() {
            ix.by_bb.entry((b.pc, b.isr)).or_default().push(ix.bbs.len());
            ix.bbs.push((b.time.bb_count, b.pc, b.isr, b.irq_seq));
        }
        ix
    }

    /// First recorded read of `(addr, pc, isr)` at or after `from`.
    pub fn map_read(&self, addr: u32, pc: u32, isr: u32, from: usize) -> Option<usize> {
        let v = self.by_key.get(&(addr, pc, isr))?;
        let i = v.partition_point(|&x| x < from);
        v.get(i).copied()
    }

    /// First recorded block entry of `(pc, isr)` after `after`.
    pub fn map_bb(&self, pc: u32, isr: u32, after: Option<usize>) -> Option<usize> {
        let v = self.by_bb.get(&(pc, isr))?;
        let i = match after {
            Some(a) => v.partition_point(|&x| x <= a),
            None => 0,
        };
        v.get(i).copied()
    }

    pub fn find_read(&self, bb_count: u64, pc: u32) -> Option<usize> {
        self.reads.iter().position(|r| r.bb_count == bb_count && r.pc == pc)
    }
}

/// Which recorded reads are symbolic, and which of them are forced.
#[derive(Debug, Clone, Default)]
pub struct ReadPlan {
    /// Recorded read index to group position.
    pub group: HashMap<usize, usize>,
    pub forced: BTreeMap<usize, u32>,
    /// Recorded index of the last group read.
    pub last: usize,
}

/// Shared, read-only exploration inputs.
pub struct ExecCtx<'a> {
    pub program: &'a Program,
    pub target: &'a Target,
    pub vm: VmConfig,
    pub trace: &'a TraceIndex,
    pub plan: &'a ReadPlan,
    pub heuristics: bool,
    pub symbol_budget: usize,
    pub stack_limit: u32,
}

pub const HISTORY_CAP: usize = 4096;
/// Blocks a state without symbolic data keeps running before it is pruned.
pub const DRAIN_BBS: u64 = 256;

#[derive(Debug, Clone)]
pub struct SymState {
    pub regs: [Val; 16],
    pub flags: SymFlags,
    pub mem: SymMemory,
    pub pc: u32,
    pub bb_count: u64,
    pub irq_context: u32,
    pub irq_seq: u32,
    pub irq_stack: Vec<SymFrame>,
    pub irq_counts: [u32; IVT_LEN],
    pub pending_irqs: u16,
    pub dropped_irqs: u32,
    pub mmio_latch: Vec<(u32, u32)>,
    pub at_block_start: bool,

    pub constraints: Vec<Constraint>,
    /// Symbols occurring in `constraints`.
    pub cvars: u128,
    /// A satisfying assignment of `constraints`.
    pub model: Model,
    pub symbols: u16,
    pub reads: Vec<SymRead>,
    pub mmio_ptr: usize,
    pub bb_ptr: Option<usize>,
    pub history: HashSet<u64>,
    pub seq: u64,
    /// Block count at which a state without symbolic data is pruned.
    pub drain_until: Option<u64>,
}

impl SymState {
    pub fn from_machine(st: &MachineState) -> SymState {
        SymState {
            regs: st.regs.map(Val::C),
            flags: SymFlags::Concrete(st.flags),
            mem: SymMemory::from_ram(&st.ram),
            pc: st.pc,
            bb_count: st.bb_count,
            irq_context: st.irq_context,
            irq_seq: st.irq_seq,
            irq_stack: st
                .irq_stack
                .iter()
                .map(|f| SymFrame { pc: f.pc, flags: SymFlags::Concrete(f.flags), context: f.context, seq: f.seq, irq: f.irq })
                .collect(),
            irq_counts: st.irq_counts,
            pending_irqs: st.pending_irqs,
            dropped_irqs: st.dropped_irqs,
            mmio_latch: st.mmio_latch.clone(),
            at_block_start: st.at_block_start,
            constraints: Vec::new(),
            cvars: 0,
            model: [0; expr::MAX_SYMBOLS],
            symbols: 0,
            reads: Vec::new(),
            mmio_ptr: 0,
            bb_ptr: None,
            history: HashSet::new(),
            seq: 0,
            drain_until: None,
        }
    }

    /// The concrete machine state under `model`.
    pub fn concretize(&self, model: &Model) -> MachineState {
        MachineState {
            regs: std::array::from_fn(|i| self.regs[i].eval(model)),
            flags: self.flags.eval(model),
            ram: self.mem.to_ram(model),
            pc: self.pc,
            bb_count: self.bb_count,
            irq_context: self.irq_context,
            irq_seq: self.irq_seq,
            irq_stack: self
                .irq_stack
                .iter()
                .map(|f| IrqFrame { pc: f.pc, flags: f.flags.eval(model), context: f.context, seq: f.seq, irq: f.irq })
                .collect(),
            irq_counts: self.irq_counts,
            pending_irqs: self.pending_irqs,
            dropped_irqs: self.dropped_irqs,
            mmio_latch: self.mmio_latch.clone(),
            at_block_start: self.at_block_start,
            stop: None,
        }
    }

    pub fn sym_count(&self) -> u32 {
        self.cvars.count_ones()
    }

    /// Adds a constraint the current model already satisfies, or with a new
    /// model that satisfies all of them.
    pub fn add_constraint(&mut self, c: Constraint, model: Option<Model>) {
        self.cvars |= c.vars();
        self.constraints.push(c);
        if let Some(m) = model {
            self.model = m;
        }
        debug_assert!(self.constraints.iter().all(|c| c.holds(&self.model)));
    }

    /// Takes one side of a symbolic branch.
    pub fn follow(&mut self, target: u32) {
        self.pc = target;
        self.at_block_start = true;
    }

    fn reg(&self, r: u8) -> Val {
        if r == PC {
            Val::C(self.pc)
        } else {
            self.regs[r as usize].clone()
        }
    }

    fn set_reg(&mut self, r: u8, v: Val) {
        if r != PC {
            self.regs[r as usize] = v;
        }
    }

    /// Concrete value of `v`, pinning it in the path constraint.
    fn concretize_val(&mut self, v: &Val) -> u32 {
        match v {
            Val::C(x) => *x,
            Val::S(_) => {
                let x = v.eval(&self.model);
                self.add_constraint(Constraint { cond: Cond::Eq, a: v.clone(), b: Val::C(x) }, None);
                x
            }
        }
    }

    pub fn has_symbolic_data(&self) -> bool {
        self.mem.has_symbolic() || self.regs.iter().any(Val::is_symbolic) || self.flags.is_symbolic()
    }

    fn history_hash(&self, cx: &ExecCtx) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for r in &self.regs {
            r.hash_value().hash(&mut h);
        }
        self.flags.hash(&mut h);
        self.pc.hash(&mut h);
        self.irq_context.hash(&mut h);
        // Interrupt phase, so polling a flag set by an ISR is not a repeat.
        if let Some((_, k)) = cx.vm.irq {
            if k > 0 && self.irq_stack.is_empty() {
                (self.bb_count % k).hash(&mut h);
            }
        }
        h.finish()
    }

    fn enter_irq(&mut self, irq: u8, isr: u32) {
        self.pending_irqs &= !(1 << irq);
        self.irq_counts[irq as usize] += 1;
        self.irq_stack.push(SymFrame {
            pc: self.pc,
            flags: self.flags.clone(),
            context: self.irq_context,
            seq: self.irq_seq,
            irq,
        });
        self.irq_context = isr;
        self.irq_seq = self.irq_counts[irq as usize];
        self.pc = isr;
    }

    fn enter_block(&mut self, cx: &ExecCtx) -> Option<End> {
        while self.irq_stack.is_empty() && self.pending_irqs != 0 {
            let irq = self.pending_irqs.trailing_zeros() as u8;
            let isr = cx.program.image.ivt(irq as usize);
            if isr == 0 {
                self.pending_irqs &= !(1 << irq);
                self.dropped_irqs += 1;
                continue;
            }
            self.enter_irq(irq, isr);
        }
        self.at_block_start = false;
        self.bb_count += 1;
        self.bb_ptr = cx.trace.map_bb(self.pc, self.irq_context, self.bb_ptr);
        if self.drain_until.is_some_and(|d| self.bb_count >= d) {
            return Some(End::Pruned(Prune::NoSymbolicData));
        }
        if cx.heuristics {
            let h = self.history_hash(cx);
            if !self.history.insert(h) {
                return Some(End::Pruned(Prune::RepeatedRegisters));
            }
            if self.history.len() >= HISTORY_CAP {
                self.history.clear();
            }
        }
        if let Some((irq, k)) = cx.vm.irq {
            if k > 0 && self.bb_count.is_multiple_of(k) {
                self.pending_irqs |= 1 << irq;
            }
        }
        if self.bb_count >= cx.vm.max_bbs {
            return Some(End::Hang);
        }
        None
    }

    /// Zeroes symbolic stack cells below the stack pointer. A state left
    /// without symbolic data after its group was consumed only drains.
    fn leave_context(&mut self, cx: &ExecCtx) -> Option<End> {
        let sp = self.regs[SP as usize].eval(&self.model);
        let lo = cx.stack_limit.wrapping_sub(RAM_BASE);
        let hi = sp.wrapping_sub(RAM_BASE).min(self.mem.len() as u32);
        if lo < hi {
            self.mem.clear_range(lo, hi);
        }
        if cx.heuristics
            && self.drain_until.is_none()
            && self.symbols > 0
            && self.mmio_ptr > cx.plan.last
            && !self.has_symbolic_data()
        {
            self.drain_until = Some(self.bb_count + DRAIN_BBS);
        }
        None
    }

    /// Fresh symbolic bytes shaped like the register's baseline model.
    fn fresh_value(&mut self, model: BaselineModel, size: u32) -> Option<Val> {
        let (mask, shift, n) = match model {
            BaselineModel::BitExtract { mask, left_shift, size } => (mask, left_shift, size as u32),
            _ => (expr::mask(8 * size as u8), 0, size),
        };
        let live: Vec<u32> = (0..n).filter(|i| (mask >> (8 * i)) & 0xff != 0).collect();
        if self.symbols as usize + live.len() > expr::MAX_SYMBOLS {
            return None;
        }
        let bytes: [Sym; 4] = std::array::from_fn(|i| {
            if live.contains(&(i as u32)) {
                let k = self.symbols + live.iter().position(|&x| x == i as u32).unwrap() as u16;
                expr::byte(k)
            } else {
                konst(0, 8)
            }
        });
        self.symbols += live.len() as u16;
        let raw = Val::from_bytes(bytes);
        let v = Val::alu(AluOp::And, &raw, &Val::C(mask));
        Some(Val::alu(AluOp::Shl, &v, &Val::C(shift as u32)))
    }

    fn mmio_read(&mut self, cx: &ExecCtx, pc: u32, addr: u32, size: u32) -> Result<Val, End> {
        let isr = self.irq_context;
        let mapped = cx.trace.map_read(addr, pc, isr, self.mmio_ptr);
        if let Some(j) = mapped {
            self.mmio_ptr = j + 1;
        }
        self.history.clear();
        let recorded = mapped.map(|j| cx.trace.reads[j].value);
        let group_pos = mapped.and_then(|j| cx.plan.group.get(&j).copied());
        let model = cx.target.baseline_model(addr, size);
        let budget_left = |s: &SymState, need: usize| s.symbols as usize + need <= cx.symbol_budget;
        let need = match model {
            BaselineModel::BitExtract { mask, size, .. } => (0..size).filter(|i| (mask >> (8 * i)) & 0xff != 0).count(),
            _ => size as usize,
        };
        let (role, value) = if cx.heuristics {
            let Some(rec) = recorded else {
                return Err(End::Pruned(Prune::NoTraceRead));
            };
            match group_pos {
                Some(p) => match cx.plan.forced.get(&p) {
                    Some(&v) => (ReadRole::Forced, Val::C(v)),
                    None if budget_left(self, need) => match self.fresh_value(model, size) {
                        Some(v) => (ReadRole::Symbolic, v),
                        None => (ReadRole::Recorded, Val::C(rec)),
                    },
                    None => (ReadRole::Recorded, Val::C(rec)),
                },
                None => (ReadRole::Recorded, Val::C(rec)),
            }
        } else {
            // No trace guidance: past the budget, the baseline model on zero input.
            match budget_left(self, need).then(|| self.fresh_value(model, size)).flatten() {
                Some(v) => (ReadRole::Symbolic, v),
                None => {
                    let v = match model {
                        BaselineModel::Constant(c) => c,
                        BaselineModel::Passthrough => {
                            self.mmio_latch.iter().find(|(a, _)| *a == addr).map_or(0, |&(_, v)| v)
                        }
                        BaselineModel::BitExtract { .. } => 0,
                    };
                    (ReadRole::Recorded, Val::C(v))
                }
            }
        };
        let value = if size == 1 { Val::alu(AluOp::And, &value, &Val::C(0xff)) } else { value };
        self.reads.push(SymRead { addr, pc, isr, trace: mapped, group_pos, role, value: value.clone() });
        Ok(value)
    }

    fn load(&mut self, cx: &ExecCtx, pc: u32, addr: u32, width: Width) -> Result<Val, End> {
        let size = width.bytes();
        if size == 4 && !addr.is_multiple_of(4) {
            return Err(End::Fault(Fault::Misaligned(addr)));
        }
        let img = &cx.program.image;
        if (addr as usize) < img.code.len() {
            return Ok(Val::C(match width {
                Width::Byte => img.code[addr as usize] as u32,
                Width::Word => img.word(addr).ok_or(End::Fault(Fault::Unmapped(addr)))?,
            }));
        }
        if (MMIO_BASE..=MMIO_END).contains(&addr) {
            return self.mmio_read(cx, pc, addr, size);
        }
        let off = addr.wrapping_sub(RAM_BASE);
        if addr >= RAM_BASE && off as usize + size as usize <= self.mem.len() {
            return Ok(self.mem.read(off, width));
        }
        Err(End::Fault(Fault::Unmapped(addr)))
    }

    fn store(&mut self, cx: &ExecCtx, addr: u32, width: Width, v: Val) -> Result<(), End> {
        let size = width.bytes();
        if size == 4 && !addr.is_multiple_of(4) {
            return Err(End::Fault(Fault::Misaligned(addr)));
        }
        if (addr as usize) < cx.program.image.code.len() {
            return Err(End::Fault(Fault::CodeWrite(addr)));
        }
        let v = if size == 1 { Val::alu(AluOp::And, &v, &Val::C(0xff)) } else { v };
        if (MMIO_BASE..=MMIO_END).contains(&addr) {
            let x = v.eval(&self.model);
            match self.mmio_latch.iter_mut().find(|(a, _)| *a == addr) {
                Some(e) => e.1 = x,
                None => self.mmio_latch.push((addr, x)),
            }
            return Ok(());
        }
        let off = addr.wrapping_sub(RAM_BASE);
        if addr >= RAM_BASE && off as usize + size as usize <= self.mem.len() {
            self.mem.write(off, width, &v);
            return Ok(());
        }
        Err(End::Fault(Fault::Unmapped(addr)))
    }

    /// Executes one instruction. `entered` receives the address of a block
    /// entered on the way.
    pub fn step(&mut self, cx: &ExecCtx, entered: &mut Option<u32>) -> Step {
        if self.at_block_start {
            if let Some(e) = self.enter_block(cx) {
                return Step::End(e);
            }
            *entered = Some(self.pc);
        }
        let pc = self.pc;
        let Some(insn) = cx.program.insn_at(pc) else {
            return Step::End(End::Fault(Fault::InvalidInstruction(pc)));
        };
        let mut next = pc.wrapping_add(4);
        match insn {
            Instruction::Nop => {}
            Instruction::Halt => return Step::End(End::Halted),
            Instruction::Ldi { rd, imm } => self.set_reg(rd, Val::C(imm as u32)),
            Instruction::Movhi { rd, imm } => {
                let low = Val::alu(AluOp::And, &self.reg(rd), &Val::C(0xffff));
                self.set_reg(rd, Val::alu(AluOp::Or, &low, &Val::C((imm as u32) << 16)));
            }
            Instruction::Mov { rd, rs } => {
                let v = self.reg(rs);
                self.set_reg(rd, v);
            }
            Instruction::Alu { op, rd, rs1, src } => {
                let b = match src {
                    Operand::Reg(r) => self.reg(r),
                    Operand::Imm(i) => Val::C(i as u32),
                };
                let v = Val::alu(op, &self.reg(rs1), &b);
                self.set_reg(rd, v);
            }
            Instruction::Cmp { rs1, src } => {
                let b = match src {
                    Operand::Reg(r) => self.reg(r),
                    Operand::Imm(i) => Val::C(i as u32),
                };
                self.flags = SymFlags::compare(self.reg(rs1), b);
            }
            Instruction::Load { width, rd, base, offset } => {
                let a = Val::alu(AluOp::Add, &self.reg(base), &Val::C(offset as u32));
                let addr = self.concretize_val(&a);
                match self.load(cx, pc, addr, width) {
                    Ok(v) => self.set_reg(rd, v),
                    Err(e) => return Step::End(e),
                }
            }
            Instruction::Store { width, src, base, offset } => {
                let a = Val::alu(AluOp::Add, &self.reg(base), &Val::C(offset as u32));
                let addr = self.concretize_val(&a);
                let v = self.reg(src);
                if let Err(e) = self.store(cx, addr, width, v) {
                    return Step::End(e);
                }
            }
            Instruction::Branch { cond, offset } => {
                let taken = pc.wrapping_add(offset as u32);
                match &self.flags {
                    SymFlags::Concrete(f) => {
                        if cond.holds(*f) {
                            next = taken;
                        }
                    }
                    SymFlags::Cmp(a, b) => {
                        if cond == Cond::Al {
                            next = taken;
                        } else {
                            let constraint = Constraint { cond, a: a.clone(), b: b.clone() };
                            return Step::Branch { constraint, taken, fallthrough: next };
                        }
                    }
                }
            }
            Instruction::Jal { offset } => {
                self.set_reg(LR, Val::C(pc.wrapping_add(4)));
                next = pc.wrapping_add(offset as u32);
            }
            Instruction::Jr { rs } => {
                let t = self.reg(rs);
                next = self.concretize_val(&t);
                if rs == LR && self.irq_context == 0 {
                    self.pc = next;
                    self.at_block_start = true;
                    if let Some(e) = self.leave_context(cx) {
                        return Step::End(e);
                    }
                    return Step::Continue;
                }
            }
            Instruction::Iret => {
                let Some(frame) = self.irq_stack.pop() else {
                    return Step::End(End::Fault(Fault::IretWithoutFrame));
                };
                self.flags = frame.flags;
                self.irq_context = frame.context;
                self.irq_seq = frame.seq;
                self.pc = frame.pc;
                self.at_block_start = true;
                if let Some(e) = self.leave_context(cx) {
                    return Step::End(e);
                }
                return Step::Continue;
            }
        }
        self.pc = next;
        self.at_block_start = insn.ends_block() || cx.program.is_leader(next);
        Step::Continue
    }
}
