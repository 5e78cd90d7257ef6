//! Forward-dataflow taint interpreter driven by the VM's raw event stream.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use chunkfuzz::corpus::Target;
use chunkfuzz::fuzz::BaselineModel;
use chunkfuzz::isa::image::{ENTRY, MMIO_BASE, MMIO_END, RAM_BASE};
use chunkfuzz::isa::{AluOp, Instruction, Operand};
use chunkfuzz::modelgen::ModelStore;
use chunkfuzz::taint::{record_trace, SinkKind, TaintLabel, MAX_SINK_SOURCES};
use chunkfuzz::vm::{EventKind, EventLog, Machine};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Src {
    Read { bb: u64, pc: u32, reg: u32, isr: u32, seq: u32 },
    Text { addr: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Loc {
    Reg(u8, u8),
    Mem(u32),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleSink {
    pub bb: u64,
    pub pc: u32,
    pub ram: Option<(u32, u32)>,
    pub sources: BTreeSet<Src>,
}

/// Byte addresses inside printable NUL-terminated runs of two or more
/// characters, terminators included.
pub fn text_bytes(code: &[u8]) -> BTreeSet<u32> {
    let mut out = BTreeSet::new();
    let mut run: Vec<u32> = Vec::new();
    for (a, &b) in code.iter().enumerate() {
        if (0x20..0x7f).contains(&b) {
            run.push(a as u32);
            continue;
        }
        if b == 0 && run.len() >= 2 {
            out.extend(run.iter().copied());
            out.insert(a as u32);
        }
        run.clear();
    }
    out
}

struct Oracle {
    flow: HashMap<Loc, BTreeSet<Src>>,
    read_ctx: HashMap<Src, u32>,
    calls: Vec<u32>,
    text: BTreeSet<u32>,
    stack_lo: u32,
    sinks: Vec<OracleSink>,
}

impl Oracle {
    fn get(&self, l: Loc) -> BTreeSet<Src> {
        self.flow.get(&l).cloned().unwrap_or_default()
    }

    fn put(&mut self, l: Loc, s: BTreeSet<Src>) {
        if s.is_empty() {
            self.flow.remove(&l);
        } else {
            self.flow.insert(l, s);
        }
    }

    fn reg_all(&self, r: u8) -> BTreeSet<Src> {
        (0..4).flat_map(|b| self.get(Loc::Reg(r, b))).collect()
    }

    fn ctx(&self, irq_context: u32) -> u32 {
        if irq_context != 0 { irq_context } else { *self.calls.last().unwrap() }
    }

    fn maybe_sink(&mut self, bb: u64, pc: u32, irq_context: u32, used: BTreeSet<Src>, ram: Option<(u32, u32)>) {
        let here = self.ctx(irq_context);
        if used.iter().any(|s| self.read_ctx.get(s).is_some_and(|&c| c != here)) {
            self.sinks.push(OracleSink { bb, pc, ram, sources: used });
        }
    }

    fn kill_below(&mut self, sp: u32) {
        self.flow.retain(|l, _| !matches!(l, Loc::Mem(a) if *a >= self.stack_lo && *a < sp));
    }
}

fn contributing(op: AluOp, i: u8, imm: Option<u32>) -> Vec<(bool, u8)> {
    // (from second operand, byte)
    let both = |j: u8| vec![(false, j), (true, j)];
    match op {
        AluOp::And if imm.is_some_and(|m| m.to_le_bytes()[i as usize] == 0) => vec![],
        AluOp::And | AluOp::Or | AluOp::Xor => both(i),
        AluOp::Add | AluOp::Sub => (0..=i).flat_map(both).collect(),
        AluOp::Shl | AluOp::Shr => match imm {
            None => (0..4).flat_map(both).collect(),
            Some(k) => {
                let k = (k & 31) as i32;
                let base = if op == AluOp::Shl { i as i32 - k / 8 } else { i as i32 + k / 8 };
                let mut v = vec![base];
                if k % 8 != 0 {
                    v.push(if op == AluOp::Shl { base - 1 } else { base + 1 });
                }
                v.into_iter().filter(|j| (0..4).contains(j)).map(|j| (false, j as u8)).collect()
            }
        },
    }
}

pub fn oracle_sinks(target: &Target, input: &[u8]) -> Vec<OracleSink> {
    let mut cursor = 0usize;
    let provider = |addr: u32, size: u32| -> u32 {
        match target.baseline_model(addr, size) {
            BaselineModel::Constant(v) => v,
            BaselineModel::Passthrough => 0,
            BaselineModel::BitExtract { mask, left_shift, size } => {
                let mut b = 0u32;
                for i in 0..size as usize {
                    b |= (*input.get(cursor).unwrap_or(&0) as u32) << (8 * i);
                    cursor += 1;
                }
                (b & mask) << left_shift
            }
        }
    };
    let mut m = Machine::new(Arc::clone(&target.program), target.config.vm_config());
    let mut log = EventLog::new(provider);
    let mut o = Oracle {
        flow: HashMap::new(),
        read_ctx: HashMap::new(),
        calls: vec![ENTRY],
        text: text_bytes(&target.image().code),
        stack_lo: target.stack_limit(),
        sinks: Vec::new(),
    };
    loop {
        let regs = m.state.regs;
        let stopped = m.step(&mut log).is_some();
        let events = std::mem::take(&mut log.events);
        for (k, e) in events.iter().enumerate() {
            match e.kind {
                EventKind::IrqExit => o.kill_below(m.state.regs[13]),
                EventKind::Insn => {
                    let insn = Instruction::decode(e.value).unwrap();
                    let later = &events[k + 1..];
                    let (bb, pc, ictx) = (e.bb_count, e.pc, e.irq_context);
                    let addr_of = |base: u8, off: i32| if base == 15 { pc } else { regs[base as usize] }.wrapping_add(off as u32);
                    match insn {
                        Instruction::Ldi { rd, .. } => (0..4).for_each(|b| o.put(Loc::Reg(rd, b), BTreeSet::new())),
                        Instruction::Movhi { rd, .. } => (2..4).for_each(|b| o.put(Loc::Reg(rd, b), BTreeSet::new())),
                        Instruction::Mov { rd, rs } => {
                            let used = o.reg_all(rs);
                            o.maybe_sink(bb, pc, ictx, used, None);
                            let copy: Vec<_> = (0..4).map(|b| o.get(Loc::Reg(rs, b))).collect();
                            for (b, s) in copy.into_iter().enumerate() {
                                o.put(Loc::Reg(rd, b as u8), s);
                            }
                        }
                        Instruction::Cmp { rs1, src } => {
                            let mut used = o.reg_all(rs1);
                            if let Operand::Reg(r) = src {
                                used.extend(o.reg_all(r));
                            }
                            o.maybe_sink(bb, pc, ictx, used, None);
                        }
                        Instruction::Alu { op, rd, rs1, src } => {
                            let (rb, imm) = match src {
                                Operand::Reg(r) => (Some(r), None),
                                Operand::Imm(i) => (None, Some(i as u32)),
                            };
                            let mut used = o.reg_all(rs1);
                            if let Some(r) = rb {
                                used.extend(o.reg_all(r));
                            }
                            o.maybe_sink(bb, pc, ictx, used, None);
                            let result: Vec<BTreeSet<Src>> = (0..4u8)
                                .map(|i| {
                                    contributing(op, i, imm)
                                        .into_iter()
                                        .flat_map(|(second, j)| match (second, rb) {
                                            (false, _) => o.get(Loc::Reg(rs1, j)),
                                            (true, Some(r)) => o.get(Loc::Reg(r, j)),
                                            (true, None) => BTreeSet::new(),
                                        })
                                        .collect()
                                })
                                .collect();
                            for (i, s) in result.into_iter().enumerate() {
                                o.put(Loc::Reg(rd, i as u8), s);
                            }
                        }
                        Instruction::Load { width, rd, base, offset } => {
                            let a = addr_of(base, offset);
                            let n = width.bytes();
                            if stopped && later.iter().any(|x| x.kind == EventKind::Fault) {
                                continue;
                            }
                            let mut bytes: Vec<BTreeSet<Src>> = vec![BTreeSet::new(); 4];
                            if (a as usize) < target.image().code.len() {
                                for i in 0..n {
                                    if o.text.contains(&(a + i)) {
                                        bytes[i as usize].insert(Src::Text { addr: a + i });
                                    }
                                }
                            } else if (MMIO_BASE..=MMIO_END).contains(&a) {
                                let rd_ev = later.iter().find(|x| x.kind == EventKind::MmioRead).unwrap();
                                if let BaselineModel::BitExtract { mask, left_shift, .. } = target.baseline_model(a, n) {
                                    let src =
                                        Src::Read { bb: rd_ev.bb_count, pc, reg: a, isr: ictx, seq: m.state.irq_seq };
                                    let live = mask << left_shift;
                                    o.read_ctx.insert(src, o.ctx(ictx));
                                    for (b, l) in bytes.iter_mut().zip(live.to_le_bytes()).take(n as usize) {
                                        if l != 0 {
                                            b.insert(src);
                                        }
                                    }
                                }
                            } else {
                                let ev = later.iter().find(|x| x.kind == EventKind::RamRead).unwrap();
                                for i in 0..n {
                                    bytes[i as usize] = o.get(Loc::Mem(a + i));
                                }
                                let used: BTreeSet<Src> = bytes.iter().flatten().copied().collect();
                                o.maybe_sink(bb, pc, ictx, used, Some((a, ev.value)));
                            }
                            for (i, s) in bytes.into_iter().enumerate() {
                                o.put(Loc::Reg(rd, i as u8), s);
                            }
                        }
                        Instruction::Store { width, src, base, offset } => {
                            let a = addr_of(base, offset);
                            if a >= RAM_BASE && later.iter().any(|x| x.kind == EventKind::RamWrite) {
                                for i in 0..width.bytes() {
                                    let s = o.get(Loc::Reg(src, i as u8));
                                    o.put(Loc::Mem(a + i), s);
                                }
                            }
                        }
                        Instruction::Jal { offset } => {
                            (0..4).for_each(|b| o.put(Loc::Reg(14, b), BTreeSet::new()));
                            if ictx == 0 {
                                o.calls.push(pc.wrapping_add(offset as u32));
                            }
                        }
                        Instruction::Jr { rs: 14 } if ictx == 0 => {
                            if o.calls.len() > 1 {
                                o.calls.pop();
                            }
                            o.kill_below(regs[13]);
                        }
                        _ => {}
                    }
                }
                _ => {}
            }
        }
        if stopped {
            break;
        }
    }
    o.sinks
}

pub fn normalize(l: &TaintLabel) -> Src {
    match l {
        TaintLabel::Mmio(m) => Src::Read { bb: m.bb_count, pc: m.pc, reg: m.reg, isr: m.isr, seq: m.irq_seq },
        TaintLabel::Str(s) => Src::Text { addr: s.addr },
    }
}

pub fn inputs_for(target: &Target, rng: &mut ChaCha8Rng) -> Vec<Vec<u8>> {
    let mut v: Vec<Vec<u8>> = vec![Vec::new()];
    let chunks: Vec<&Vec<u8>> = target.config.chunks.values().collect();
    for c in &chunks {
        v.push(c.to_vec());
    }
    for _ in 0..6 {
        let mut s = Vec::new();
        for _ in 0..rng.random_range(1..5) {
            if !chunks.is_empty() && rng.random_bool(0.6) {
                s.extend_from_slice(chunks[rng.random_range(0..chunks.len())]);
            } else {
                let n = rng.random_range(1..12);
                s.extend((0..n).map(|_| rng.random::<u8>()));
            }
        }
        v.push(s);
    }
    v
}

/// Compares the tracer's sinks with the oracle on one input; returns the
/// number of sinks.
pub fn compare_sinks(target: &Arc<Target>, name: &str, input: &[u8]) -> Result<usize, String> {
    let models = Arc::new(ModelStore::default());
    let trace = record_trace(target, &models, input, 0.0);
    let expected = oracle_sinks(target, input);
    let got: Vec<_> = trace.sinks().collect();
    if got.len() != expected.len() {
        return Err(format!("{name} {input:?}: {} sinks, oracle {}", got.len(), expected.len()));
    }
    for (g, e) in got.iter().zip(&expected) {
        if (g.time.bb_count, g.pc) != (e.bb, e.pc) {
            return Err(format!("{name} {input:?}: sink at {:x}/{:x}, oracle {:x}/{:x}", g.time.bb_count, g.pc, e.bb, e.pc));
        }
        let ram = match g.kind {
            SinkKind::RamRead { addr, value, .. } => Some((addr, value)),
            SinkKind::NonMemory => None,
        };
        if ram != e.ram {
            return Err(format!("{name} {input:?} at {:x}: ram {ram:?}, oracle {:?}", g.pc, e.ram));
        }
        let srcs: BTreeSet<Src> = g.sources.iter().map(normalize).collect();
        let ok = if e.sources.len() > MAX_SINK_SOURCES {
            g.truncated && srcs.is_subset(&e.sources)
        } else {
            !g.truncated && srcs == e.sources
        };
        if !ok {
            return Err(format!("{name} {input:?} at bb {:x} pc {:x}: {srcs:?} vs {:?}", g.time.bb_count, g.pc, e.sources));
        }
    }
    Ok(got.len())
}
