//! Sink source sets from the tracer against a separate forward-dataflow
//! interpreter driven by the VM's raw event stream.

mod oracles;

use std::collections::BTreeMap;
use std::sync::Arc;

use chunkfuzz::corpus::{build_target, list_targets};
use chunkfuzz::fuzz::{execute, Resolver};
use chunkfuzz::modelgen::ModelStore;
use chunkfuzz::taint::record_trace;
use chunkfuzz::vm::{Hooks, Machine, MachineState};
use oracles::dataflow::{compare_sinks, inputs_for};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn sink_sources_match_dataflow_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut per_target: BTreeMap<&str, usize> = BTreeMap::new();
    let names = list_targets();
    assert_eq!(names.len(), 10);
    for name in names {
        let target = Arc::new(build_target(name).unwrap());
        for input in inputs_for(&target, &mut rng) {
            let n = compare_sinks(&target, name, &input).unwrap_or_else(|e| panic!("{e}"));
            *per_target.entry(name).or_default() += n;
        }
    }
    // Every program except the status poller and the register-only loop
    // produces sinks for some input.
    let silent: Vec<&str> = per_target.iter().filter(|(_, n)| **n == 0).map(|(k, _)| *k).collect();
    assert!(silent.len() <= 2, "no sinks for {silent:?}");
}

struct BlockOrder {
    resolver: Resolver,
    pcs: Vec<u32>,
}

impl Hooks for BlockOrder {
    fn mmio_read(&mut self, st: &MachineState, _pc: u32, addr: u32, size: u32) -> u32 {
        self.resolver.resolve(st, addr, size).value
    }
    fn bb_enter(&mut self, st: &MachineState) {
        self.pcs.push(st.pc);
    }
}

#[test]
fn trace_blocks_equal_fuzzer_blocks() {
    let models = Arc::new(ModelStore::default());
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for name in list_targets() {
        let target = Arc::new(build_target(name).unwrap());
        for input in inputs_for(&target, &mut rng) {
            let trace = record_trace(&target, &models, &input, 0.0);
            let resolver = Resolver::new(Arc::clone(&target), Arc::clone(&models), Arc::new(input.clone()), 0.0);
            let mut hooks = BlockOrder { resolver, pcs: Vec::new() };
            Machine::new(Arc::clone(&target.program), target.config.vm_config()).run(&mut hooks);
            let seq: Vec<u32> = trace.bbs().map(|b| b.pc).collect();
            assert_eq!(seq, hooks.pcs, "{name}");
            let fuzz = execute(&target, &models, &input, 0.0);
            assert_eq!(trace.stop, fuzz.verdict);
            let mut set = seq;
            set.sort_unstable();
            set.dedup();
            assert_eq!(set, fuzz.bbs, "{name}");
        }
    }
}
