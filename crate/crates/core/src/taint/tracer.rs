//! Replay with byte-granular taint tracking.
//!
//! MMIO reads whose baseline model is a bit extraction label the bytes
//! covered by `mask << shift`. Loads of identified constant strings label
//! each loaded byte with its string position. Moves, ALU operations, loads
//! and stores propagate labels; compares and branches do not.
//!
//! An instruction is a sink when it uses a byte carrying an MMIO label from
//! a context other than the current one. The context of a read is its ISR
//! address, or outside interrupts the entry of the enclosing function.
//! Sources of a sink are all labels on the bytes it uses, capped at
//! [`MAX_SINK_SOURCES`]. Stores are not sinks.
//!
//! When a function returns outside interrupts, or an ISR returns, labels on
//! the stack below the stack pointer are cleared.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::{BbEvent, DetailedTrace, MmioAccess, MmioSource, Sink, SinkKind, StringSource, TaintLabel, Time, TraceEvent};
use crate::cluster::identify_strings;
use crate::corpus::Target;
use crate::fuzz::{BaselineModel, Resolver};
use crate::isa::image::{ENTRY, MMIO_BASE, MMIO_END, RAM_BASE};
use crate::isa::{AluOp, Instruction, Operand, LR, SP};
use crate::modelgen::ModelStore;
use crate::vm::{Hooks, Machine, MachineState, Snapshot, Stop};

pub const MAX_SINK_SOURCES: usize = 64;

impl Hooks for Resolver {
    fn mmio_read(&mut self, st: &MachineState, _pc: u32, addr: u32, size: u32) -> u32 {
        self.resolve(st, addr, size).value
    }
}

/// Sorted label ids; `None` is the empty set.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct TSet(Option<Arc<[u32]>>);

impl TSet {
    fn single(id: u32) -> TSet {
        TSet(Some(Arc::from([id])))
    }

    fn ids(&self) -> &[u32] {
        self.0.as_deref().unwrap_or(&[])
    }

    fn union(&self, other: &TSet) -> TSet {
        match (&self.0, &other.0) {
            (None, _) => other.clone(),
            (_, None) => self.clone(),
            (Some(a), Some(b)) if Arc::ptr_eq(a, b) => self.clone(),
            (Some(a), Some(b)) => {
                let mut v = Vec::with_capacity(a.len() + b.len());
                let (mut i, mut j) = (0, 0);
                while i < a.len() && j < b.len() {
                    match a[i].cmp(&b[j]) {
                        std::cmp::Ordering::Less => {
                            v.push(a[i]);
                            i += 1;
                        }
                        std::cmp::Ordering::Greater => {
                            v.push(b[j]);
                            j += 1;
                        }
                        std::cmp::Ordering::Equal => {
                            v.push(a[i]);
                            i += 1;
                            j += 1;
                        }
                    }
                }
                v.extend_from_slice(&a[i..]);
                v.extend_from_slice(&b[j..]);
                TSet(Some(v.into()))
            }
        }
    }
}

type RegTaint = [TSet; 4];

/// MMIO reads chronologically, then string bytes by address.
pub(crate) fn source_order(l: &TaintLabel) -> (u8, u64, u32, u32) {
    match l {
        TaintLabel::Mmio(m) => (0, m.bb_count, m.pc, m.reg),
        TaintLabel::Str(s) => (1, s.addr as u64, 0, 0),
    }
}

fn union_all(bytes: &[TSet]) -> TSet {
    bytes.iter().fold(TSet::default(), |acc, b| acc.union(b))
}

/// Result bytes of an ALU operation from operand byte taints.
fn alu_taint(op: AluOp, a: &RegTaint, b: &RegTaint, imm: Option<u32>) -> RegTaint {
    let mut r: RegTaint = Default::default();
    match op {
        AluOp::And | AluOp::Or | AluOp::Xor => {
            for i in 0..4 {
                let masked_out = op == AluOp::And && imm.is_some_and(|m| (m >> (8 * i)) & 0xff == 0);
                if !masked_out {
                    r[i] = a[i].union(&b[i]);
                }
            }
        }
        AluOp::Add | AluOp::Sub => {
            let mut acc = TSet::default();
            for i in 0..4 {
                acc = acc.union(&a[i]).union(&b[i]);
                r[i] = acc.clone();
            }
        }
        AluOp::Shl | AluOp::Shr => match imm {
            Some(k) => {
                let k = (k & 31) as usize;
                let (q, partial) = (k / 8, !k.is_multiple_of(8));
                for i in 0..4 {
                    let src = |j: isize| -> TSet {
                        if (0..4).contains(&j) {
                            a[j as usize].clone()
                        } else {
                            TSet::default()
                        }
                    };
                    let i = i as isize;
                    let q = q as isize;
                    r[i as usize] = if op == AluOp::Shl {
                        let t = src(i - q);
                        if partial { t.union(&src(i - q - 1)) } else { t }
                    } else {
                        let t = src(i + q);
                        if partial { t.union(&src(i + q + 1)) } else { t }
                    };
                }
            }
            None => {
                let all = union_all(a).union(&union_all(b));
                r = [all.clone(), all.clone(), all.clone(), all];
            }
        },
    }
    r
}

struct Tracer<'a> {
    resolver: Resolver,
    target: &'a Target,
    strings: HashMap<u32, (u32, u8)>,
    labels: Vec<TaintLabel>,
    /// Context of each MMIO label, `None` for string labels.
    label_ctx: Vec<Option<u32>>,
    str_ids: HashMap<u32, u32>,
    regs: [RegTaint; 16],
    ram: Vec<TSet>,
    call_stack: Vec<u32>,
    events: Vec<TraceEvent>,
    seq: u32,
    /// Sink event that loaded each register within the current block.
    reg_sink: [Option<usize>; 16],
    pending_rd: Option<u8>,
    stack_lo: u32,
}

impl<'a> Tracer<'a> {
    fn new(target: &'a Target, resolver: Resolver) -> Tracer<'a> {
        let mut strings = HashMap::new();
        for s in identify_strings(target.image()) {
            for a in s.start..=s.end {
                strings.insert(a, (s.end, s.byte_at(a).unwrap()));
            }
        }
        Tracer {
            resolver,
            target,
            strings,
            labels: Vec::new(),
            label_ctx: Vec::new(),
            str_ids: HashMap::new(),
            regs: Default::default(),
            ram: vec![TSet::default(); target.image().ram_size as usize],
            call_stack: vec![ENTRY],
            events: Vec::new(),
            seq: 0,
            reg_sink: [None; 16],
            pending_rd: None,
            stack_lo: target.stack_limit(),
        }
    }

    fn context(&self, st: &MachineState) -> u32 {
        if st.irq_context != 0 {
            st.irq_context
        } else {
            *self.call_stack.last().unwrap_or(&ENTRY)
        }
    }

    fn time(&mut self, st: &MachineState) -> Time {
        self.seq += 1;
        Time { bb_count: st.bb_count, seq: self.seq }
    }

    fn string_label(&mut self, addr: u32) -> TSet {
        let Some(&(end, byte)) = self.strings.get(&addr) else {
            return TSet::default();
        };
        let id = *self.str_ids.entry(addr).or_insert_with(|| {
            self.labels.push(TaintLabel::Str(StringSource { end, byte, addr }));
            self.label_ctx.push(None);
            (self.labels.len() - 1) as u32
        });
        TSet::single(id)
    }

    fn ram_index(&self, addr: u32, size: u32) -> Option<usize> {
        let off = addr.checked_sub(RAM_BASE)? as usize;
        (off + size as usize <= self.ram.len()).then_some(off)
    }

    fn clear_dead_stack(&mut self, sp: u32) {
        let lo = self.stack_lo.saturating_sub(RAM_BASE) as usize;
        let hi = (sp.saturating_sub(RAM_BASE) as usize).min(self.ram.len());
        for t in self.ram.iter_mut().take(hi).skip(lo) {
            *t = TSet::default();
        }
    }

    /// Records a sink if `used` carries an MMIO label from another context.
    fn check_sink(&mut self, st: &MachineState, used: &TSet, kind: SinkKind) -> Option<usize> {
        let ctx = self.context(st);
        let outside = used.ids().iter().any(|&id| self.label_ctx[id as usize].is_some_and(|c| c != ctx));
        if !outside {
            return None;
        }
        let mut sources: Vec<TaintLabel> = used.ids().iter().map(|&id| self.labels[id as usize]).collect();
        sources.sort_by_key(source_order);
        let truncated = sources.len() > MAX_SINK_SOURCES;
        sources.truncate(MAX_SINK_SOURCES);
        let time = self.time(st);
        self.events.push(TraceEvent::Sink(Sink { time, pc: st.pc, kind, sources, truncated, copy: false }));
        Some(self.events.len() - 1)
    }

    fn set_reg(&mut self, r: u8, t: RegTaint) {
        self.regs[r as usize] = t;
        self.reg_sink[r as usize] = None;
    }
}

impl Hooks for Tracer<'_> {
    fn mmio_read(&mut self, st: &MachineState, pc: u32, addr: u32, size: u32) -> u32 {
        let res = self.resolver.resolve(st, addr, size);
        let value = if size == 1 { res.value & 0xff } else { res.value };
        let time = self.time(st);
        let access = MmioAccess { time, pc, addr, size, value, isr: st.irq_context, irq_seq: st.irq_seq };
        self.events.push(TraceEvent::Mmio(access));
        if let (Some(rd), BaselineModel::BitExtract { .. }) = (self.pending_rd.take(), res.baseline) {
            let ctx = self.context(st);
            self.labels.push(TaintLabel::Mmio(MmioSource {
                bb_count: st.bb_count,
                pc,
                reg: addr,
                isr: st.irq_context,
                irq_seq: st.irq_seq,
            }));
            self.label_ctx.push(Some(ctx));
            let id = (self.labels.len() - 1) as u32;
            let mask = res.data_mask();
            let mut t: RegTaint = Default::default();
            for (i, b) in t.iter_mut().enumerate().take(size as usize) {
                if (mask >> (8 * i)) & 0xff != 0 {
                    *b = TSet::single(id);
                }
            }
            self.regs[rd as usize] = t;
        }
        value
    }

    fn bb_enter(&mut self, st: &MachineState) {
        self.seq = 0;
        self.reg_sink = [None; 16];
        self.events.push(TraceEvent::Bb(BbEvent {
            time: Time { bb_count: st.bb_count, seq: 0 },
            pc: st.pc,
            isr: st.irq_context,
            irq_seq: st.irq_seq,
        }));
    }

    fn irq_exit(&mut self, st: &MachineState) {
        self.clear_dead_stack(st.regs[SP as usize]);
    }

    fn before_insn(&mut self, st: &MachineState, insn: &Instruction) {
        let operand = |t: &Self, src: Operand| -> (RegTaint, Option<u32>) {
            match src {
                Operand::Reg(r) => (t.regs[r as usize].clone(), None),
                Operand::Imm(i) => (Default::default(), Some(i as u32)),
            }
        };
        match *insn {
            Instruction::Nop | Instruction::Halt | Instruction::Branch { .. } | Instruction::Iret => {}
            Instruction::Ldi { rd, .. } => self.set_reg(rd, Default::default()),
            Instruction::Movhi { rd, .. } => {
                let mut t = self.regs[rd as usize].clone();
                t[2] = TSet::default();
                t[3] = TSet::default();
                self.set_reg(rd, t);
            }
            Instruction::Mov { rd, rs } => {
                let t = self.regs[rs as usize].clone();
                self.check_sink(st, &union_all(&t), SinkKind::NonMemory);
                self.set_reg(rd, t);
            }
            Instruction::Alu { op, rd, rs1, src } => {
                let a = self.regs[rs1 as usize].clone();
                let (b, imm) = operand(self, src);
                self.check_sink(st, &union_all(&a).union(&union_all(&b)), SinkKind::NonMemory);
                self.set_reg(rd, alu_taint(op, &a, &b, imm));
            }
            Instruction::Cmp { rs1, src } => {
                let a = self.regs[rs1 as usize].clone();
                let (b, _) = operand(self, src);
                self.check_sink(st, &union_all(&a).union(&union_all(&b)), SinkKind::NonMemory);
            }
            Instruction::Load { width, rd, base, offset } => {
                let addr = st.reg(base).wrapping_add(offset as u32);
                let size = width.bytes();
                if size == 4 && !addr.is_multiple_of(4) {
                    return;
                }
                let mut t: RegTaint = Default::default();
                if (addr as usize) < self.target.image().code.len() {
                    for (i, b) in t.iter_mut().enumerate().take(size as usize) {
                        *b = self.string_label(addr + i as u32);
                    }
                    self.set_reg(rd, t);
                } else if (MMIO_BASE..=MMIO_END).contains(&addr) {
                    self.set_reg(rd, t);
                    self.pending_rd = Some(rd);
                } else if let Some(off) = self.ram_index(addr, size) {
                    for (i, b) in t.iter_mut().enumerate().take(size as usize) {
                        *b = self.ram[off + i].clone();
                    }
                    let value = match size {
                        1 => st.ram[off] as u32,
                        _ => u32::from_le_bytes(st.ram[off..off + 4].try_into().unwrap()),
                    };
                    let sink = self.check_sink(st, &union_all(&t), SinkKind::RamRead { addr, size, value });
                    self.set_reg(rd, t);
                    self.reg_sink[rd as usize] = sink;
                }
            }
            Instruction::Store { width, src, base, offset } => {
                let addr = st.reg(base).wrapping_add(offset as u32);
                let size = width.bytes();
                if size == 4 && !addr.is_multiple_of(4) {
                    return;
                }
                if let Some(off) = self.ram_index(addr, size) {
                    for i in 0..size as usize {
                        self.ram[off + i] = self.regs[src as usize][i].clone();
                    }
                    if let Some(idx) = self.reg_sink[src as usize] {
                        if let TraceEvent::Sink(s) = &mut self.events[idx] {
                            s.copy = true;
                        }
                    }
                }
            }
            Instruction::Jal { offset } => {
                self.set_reg(LR, Default::default());
                if st.irq_context == 0 {
                    self.call_stack.push(st.pc.wrapping_add(offset as u32));
                }
            }
            Instruction::Jr { rs } => {
                if rs == LR && st.irq_context == 0 {
                    if self.call_stack.len() > 1 {
                        self.call_stack.pop();
                    }
                    self.clear_dead_stack(st.regs[SP as usize]);
                }
            }
        }
    }
}

/// Replays `input` with taint tracking. Faults and hangs end the trace.
pub fn record_trace(target: &Arc<Target>, models: &Arc<ModelStore>, input: &[u8], p_skip: f64) -> DetailedTrace {
    let resolver = Resolver::new(Arc::clone(target), Arc::clone(models), Arc::new(input.to_vec()), p_skip);
    let mut tracer = Tracer::new(target, resolver);
    let mut m = Machine::new(Arc::clone(&target.program), target.config.vm_config());
    let stop: Stop = m.run(&mut tracer);
    DetailedTrace { events: tracer.events, stop: stop.into() }
}

/// Machine and input-resolution state immediately before an instruction.
#[derive(Debug, Clone)]
pub struct HarnessSnapshot {
    pub machine: Snapshot,
    pub resolver: Resolver,
}

impl HarnessSnapshot {
    /// A machine restored to the snapshot.
    pub fn machine(&self, target: &Target) -> Machine {
        let mut m = Machine::new(Arc::clone(&target.program), target.config.vm_config());
        m.restore(&self.machine);
        m
    }
}

struct SnapHooks {
    resolver: Resolver,
    wanted: BTreeMap<(u64, u32), Vec<usize>>,
    out: Vec<Option<HarnessSnapshot>>,
}

impl Hooks for SnapHooks {
    fn mmio_read(&mut self, st: &MachineState, _pc: u32, addr: u32, size: u32) -> u32 {
        self.resolver.resolve(st, addr, size).value
    }

    fn before_insn(&mut self, st: &MachineState, _insn: &Instruction) {
        if let Some(idxs) = self.wanted.remove(&(st.bb_count, st.pc)) {
            let snap = HarnessSnapshot { machine: Arc::new(st.clone()), resolver: self.resolver.clone() };
            for i in idxs {
                self.out[i] = Some(snap.clone());
            }
        }
    }
}

/// Snapshots taken immediately before the instruction at each
/// `(bb_count, pc)`, in request order; `None` marks timestamps never reached.
pub fn snapshot_at(
    target: &Arc<Target>,
    models: &Arc<ModelStore>,
    input: &[u8],
    p_skip: f64,
    timestamps: &[(u64, u32)],
) -> Vec<Option<HarnessSnapshot>> {
    let resolver = Resolver::new(Arc::clone(target), Arc::clone(models), Arc::new(input.to_vec()), p_skip);
    let mut wanted: BTreeMap<(u64, u32), Vec<usize>> = BTreeMap::new();
    for (i, t) in timestamps.iter().enumerate() {
        wanted.entry(*t).or_default().push(i);
    }
    let mut hooks = SnapHooks { resolver, wanted, out: vec![None; timestamps.len()] };
    let mut m = Machine::new(Arc::clone(&target.program), target.config.vm_config());
    while !hooks.wanted.is_empty() && m.step(&mut hooks).is_none() {}
    hooks.out
}
