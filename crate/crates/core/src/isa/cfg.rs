//! Static control-flow graph recovered by recursive traversal from the entry
//! point and every installed interrupt handler.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use super::image::{FirmwareImage, ENTRY, IVT_LEN};
use super::{Cond, Instruction, LR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeKind {
    Fallthrough,
    Taken,
    Call,
    /// From a calling block to the instruction after the call.
    CallReturn,
    Return,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StaticCfg {
    pub blocks: BTreeSet<u32>,
    /// Address of the last instruction of each block.
    pub block_last: BTreeMap<u32, u32>,
    pub edges: BTreeMap<u32, Vec<(u32, EdgeKind)>>,
    pub functions: BTreeSet<u32>,
    pub func_of: BTreeMap<u32, u32>,
    pub callees: BTreeMap<u32, BTreeSet<u32>>,
    pub diagnostics: Vec<String>,
}

impl StaticCfg {
    pub fn successors(&self, block: u32) -> &[(u32, EdgeKind)] {
        self.edges.get(&block).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Block containing `addr`, if any.
    pub fn block_containing(&self, addr: u32) -> Option<u32> {
        let (&start, _) = self.blocks.range(..=addr).next_back().map(|b| (b, ()))?;
        (self.block_last.get(&start).copied()? >= addr).then_some(start)
    }

    /// Functions reachable from `f` through calls, including `f`.
    pub fn transitive_callees(&self, f: u32) -> BTreeSet<u32> {
        let mut seen = BTreeSet::from([f]);
        let mut work = vec![f];
        while let Some(g) = work.pop() {
            for &c in self.callees.get(&g).into_iter().flatten() {
                if seen.insert(c) {
                    work.push(c);
                }
            }
        }
        seen
    }
}

fn decode_at(image: &FirmwareImage, addr: u32) -> Option<Instruction> {
    image.word(addr).and_then(|w| Instruction::decode(w).ok())
}

fn target(at: u32, offset: i32) -> u32 {
    at.wrapping_add(offset as u32)
}

pub fn build_cfg(image: &FirmwareImage) -> StaticCfg {
    let mut cfg = StaticCfg::default();
    let mut roots = vec![ENTRY];
    for i in 0..IVT_LEN {
        let v = image.ivt(i);
        if v != 0 {
            roots.push(v);
        }
    }
    cfg.functions.extend(roots.iter().copied());

    // Pass 1: discover leaders and every reachable instruction.
    let mut leaders: BTreeSet<u32> = roots.iter().copied().collect();
    let mut reached: BTreeSet<u32> = BTreeSet::new();
    let mut bad: BTreeSet<u32> = BTreeSet::new();
    let mut work: VecDeque<u32> = roots.iter().copied().collect();
    while let Some(start) = work.pop_front() {
        let mut pc = start;
        loop {
            if pc % 4 != 0 || !reached.insert(pc) {
                break;
            }
            let Some(insn) = decode_at(image, pc) else {
                reached.remove(&pc);
                if bad.insert(pc) {
                    cfg.diagnostics.push(format!("undecodable word at {pc:#010x} excluded"));
                }
                break;
            };
            let mut push = |a: u32, leaders: &mut BTreeSet<u32>| {
                leaders.insert(a);
                work.push_back(a);
            };
            match insn {
                Instruction::Branch { cond, offset } => {
                    push(target(pc, offset), &mut leaders);
                    if cond != Cond::Al {
                        push(pc + 4, &mut leaders);
                    }
                    break;
                }
                Instruction::Jal { offset } => {
                    let t = target(pc, offset);
                    cfg.functions.insert(t);
                    push(t, &mut leaders);
                    push(pc + 4, &mut leaders);
                    break;
                }
                Instruction::Jr { .. } | Instruction::Iret | Instruction::Halt => break,
                _ => pc += 4,
            }
        }
    }
    leaders.retain(|a| reached.contains(a));
    cfg.functions.retain(|a| reached.contains(a));

    // Pass 2: carve blocks and intra-procedural edges.
    let mut calls: Vec<(u32, u32, u32)> = Vec::new(); // (block, callee, return address)
    let mut returns: Vec<u32> = Vec::new();
    for &start in &leaders {
        let mut pc = start;
        let mut succ = Vec::new();
        loop {
            let insn = decode_at(image, pc).expect("reached instructions decode");
            match insn {
                Instruction::Branch { cond, offset } => {
                    let t = target(pc, offset);
                    if reached.contains(&t) {
                        succ.push((t, EdgeKind::Taken));
                    }
                    if cond != Cond::Al && reached.contains(&(pc + 4)) {
                        succ.push((pc + 4, EdgeKind::Fallthrough));
                    }
                    break;
                }
                Instruction::Jal { offset } => {
                    let t = target(pc, offset);
                    if reached.contains(&t) {
                        succ.push((t, EdgeKind::Call));
                    }
                    if reached.contains(&(pc + 4)) {
                        succ.push((pc + 4, EdgeKind::CallReturn));
                    }
                    calls.push((start, t, pc + 4));
                    break;
                }
                Instruction::Jr { rs } => {
                    if rs == LR {
                        returns.push(start);
                    }
                    break;
                }
                Instruction::Iret | Instruction::Halt => break,
                _ => {}
            }
            if leaders.contains(&(pc + 4)) {
                succ.push((pc + 4, EdgeKind::Fallthrough));
                break;
            }
            if !reached.contains(&(pc + 4)) {
                break;
            }
            pc += 4;
        }
        cfg.block_last.insert(start, pc);
        cfg.edges.insert(start, succ);
    }
    cfg.blocks = leaders;

    // Function membership over intra-procedural edges; shared blocks belong to
    // the lowest-addressed function that reaches them.
    let mut members: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
    for &f in &cfg.functions {
        let mut seen = BTreeSet::from([f]);
        let mut work = vec![f];
        while let Some(b) = work.pop() {
            for &(s, k) in cfg.successors(b) {
                if k != EdgeKind::Call && seen.insert(s) {
                    work.push(s);
                }
            }
        }
        for &b in &seen {
            cfg.func_of.entry(b).or_insert(f);
        }
        members.insert(f, seen);
    }
    for &(block, callee, _) in &calls {
        for (&f, m) in &members {
            if m.contains(&block) {
                cfg.callees.entry(f).or_default().insert(callee);
            }
        }
    }
    for &ret in &returns {
        for &(_, callee, ra) in &calls {
            if members.get(&callee).is_some_and(|m| m.contains(&ret)) && cfg.blocks.contains(&ra) {
                let e = cfg.edges.entry(ret).or_default();
                if !e.contains(&(ra, EdgeKind::Return)) {
                    e.push((ra, EdgeKind::Return));
                }
            }
        }
    }
    cfg
}
