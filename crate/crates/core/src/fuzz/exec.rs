//! Single concrete executions of a target on one input.

use std::sync::Arc;

use super::harness::Resolver;
use crate::corpus::Target;
use crate::modelgen::ModelStore;
use crate::vm::{Hooks, Machine, MachineState, Stop};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Verdict {
    Ok,
    Crash,
    Hang,
}

impl From<Stop> for Verdict {
    fn from(s: Stop) -> Verdict {
        match s {
            Stop::Halted => Verdict::Ok,
            Stop::Fault(_) => Verdict::Crash,
            Stop::Hang => Verdict::Hang,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecResult {
    pub stop: Stop,
    pub verdict: Verdict,
    /// Distinct block addresses entered, sorted.
    pub bbs: Vec<u32>,
    pub bb_count: u64,
    /// Input bytes consumed, zero extension included.
    pub consumed: usize,
}

struct CoverageHooks<'a> {
    resolver: Resolver,
    seen: &'a mut [u32],
    stamp: u32,
    hits: Vec<u32>,
}

impl Hooks for CoverageHooks<'_> {
    fn mmio_read(&mut self, st: &MachineState, _pc: u32, addr: u32, size: u32) -> u32 {
        self.resolver.resolve(st, addr, size).value
    }

    fn bb_enter(&mut self, st: &MachineState) {
        let i = (st.pc / 4) as usize;
        if let Some(s) = self.seen.get_mut(i) {
            if *s != self.stamp {
                *s = self.stamp;
                self.hits.push(st.pc);
            }
        }
    }
}

/// Reusable executor for one target.
pub struct Executor {
    pub target: Arc<Target>,
    pub models: Arc<ModelStore>,
    pub p_skip: f64,
    seen: Vec<u32>,
    stamp: u32,
}

impl Executor {
    pub fn new(target: Arc<Target>, models: Arc<ModelStore>, p_skip: f64) -> Executor {
        let words = target.image().code.len() / 4 + 1;
        Executor { target, models, p_skip, seen: vec![0; words], stamp: 0 }
    }

    pub fn run(&mut self, input: &[u8]) -> ExecResult {
        self.stamp = self.stamp.wrapping_add(1);
        if self.stamp == 0 {
            self.seen.fill(0);
            self.stamp = 1;
        }
        let resolver = Resolver::new(Arc::clone(&self.target), Arc::clone(&self.models), Arc::new(input.to_vec()), self.p_skip);
        let mut hooks = CoverageHooks { resolver, seen: &mut self.seen, stamp: self.stamp, hits: Vec::new() };
        let mut m = Machine::new(Arc::clone(&self.target.program), self.target.config.vm_config());
        let stop = m.run(&mut hooks);
        let mut bbs = hooks.hits;
        bbs.sort_unstable();
        ExecResult { stop, verdict: stop.into(), bbs, bb_count: m.state.bb_count, consumed: hooks.resolver.cursor }
    }
}

/// One-off execution.
pub fn execute(target: &Arc<Target>, models: &Arc<ModelStore>, input: &[u8], p_skip: f64) -> ExecResult {
    Executor::new(Arc::clone(target), Arc::clone(models), p_skip).run(input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_target;

    #[test]
    fn doorlock_ok_reaches_unlocked() {
        let t = Arc::new(build_target("doorlock").unwrap());
        let unlocked = t.image().symbol("unlocked").unwrap();
        let models = Arc::new(ModelStore::default());
        let mut ex = Executor::new(Arc::clone(&t), models, 0.0);
        let hit = ex.run(b"OK\r\n");
        assert!(hit.bbs.contains(&unlocked));
        let miss = ex.run(b"NO\r\n");
        assert!(!miss.bbs.contains(&unlocked));
        assert_eq!(ex.run(b"OK\r\n"), hit);
    }

    #[test]
    fn coverage_is_subset_of_static_blocks() {
        let t = Arc::new(build_target("toy3").unwrap());
        let models = Arc::new(ModelStore::default());
        let mut ex = Executor::new(Arc::clone(&t), models, 0.0);
        for input in [&b""[..], b"\x01\x02\x03", b"\xff\xff\xff"] {
            let r = ex.run(input);
            assert!(r.bbs.iter().all(|b| t.program.cfg.blocks.contains(b)));
        }
    }
}
