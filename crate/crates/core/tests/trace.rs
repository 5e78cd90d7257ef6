use std::sync::Arc;

use chunkfuzz::corpus::build_target;
use chunkfuzz::fuzz::Resolver;
use chunkfuzz::modelgen::ModelStore;
use chunkfuzz::taint::{record_trace, snapshot_at, DetailedTrace, SinkKind, TraceEvent};
use chunkfuzz::vm::{Hooks, MachineState};

fn no_models() -> Arc<ModelStore> {
    Arc::new(ModelStore::default())
}

#[test]
fn steering_word_compare_sink() {
    let t = Arc::new(build_target("steering").unwrap());
    let trace = record_trace(&t, &no_models(), b"steer,90\n", 0.0);
    let sink = trace
        .sinks()
        .find(|s| matches!(s.kind, SinkKind::RamRead { value: 0x6565_7473, size: 4, .. }))
        .expect("word load of \"stee\"");
    assert_eq!(sink.sources.len(), 4);
    assert!(sink.sources.iter().all(|s| s.as_mmio().is_some_and(|m| m.reg == 0x4000_0818)));
    let cmp = trace.sinks().find(|s| s.sources.iter().any(|l| l.as_str().is_some())).unwrap();
    let text: Vec<u8> = cmp.sources.iter().filter_map(|l| l.as_str()).map(|s| s.byte).collect();
    assert_eq!(text, b"stee");
    assert_eq!(DetailedTrace::parse(&trace.to_text()).unwrap(), trace);
}

#[test]
fn status_poll_has_no_sinks() {
    let t = Arc::new(build_target("status-poll").unwrap());
    let trace = record_trace(&t, &no_models(), b"\x01\x02\x03\x04", 0.0);
    assert_eq!(trace.sinks().count(), 0);
    assert!(trace.mmio().count() > 0);
}

#[test]
fn sinks_reference_earlier_reads() {
    let t = Arc::new(build_target("uart-irq-echo").unwrap());
    let trace = record_trace(&t, &no_models(), b"hello world\n", 0.0);
    assert!(trace.sinks().count() > 0);
    for (i, e) in trace.events.iter().enumerate() {
        if let TraceEvent::Sink(s) = e {
            assert!(!s.sources.is_empty());
            for src in s.sources.iter().filter_map(|l| l.as_mmio()) {
                let pos = trace.events.iter().position(|x| matches!(x, TraceEvent::Mmio(m) if m.source() == *src));
                assert!(pos.is_some_and(|p| p < i));
            }
        }
    }
    assert!(trace.events.windows(2).all(|w| w[0].time() < w[1].time()));
}

struct Recorder {
    resolver: Resolver,
    out: Vec<(u64, u32, u32)>,
}

impl Hooks for Recorder {
    fn mmio_read(&mut self, st: &MachineState, pc: u32, addr: u32, size: u32) -> u32 {
        let v = self.resolver.resolve(st, addr, size).value;
        let v = if size == 1 { v & 0xff } else { v };
        self.out.push((st.bb_count, pc, v));
        v
    }
    fn bb_enter(&mut self, st: &MachineState) {
        self.out.push((st.bb_count, st.pc, u32::MAX));
    }
}

fn tail(trace: &DetailedTrace, from: (u64, u32)) -> Vec<(u64, u32, u32)> {
    trace
        .events
        .iter()
        .filter_map(|e| match e {
            TraceEvent::Bb(b) => Some((b.time.bb_count, b.pc, u32::MAX)),
            TraceEvent::Mmio(m) => Some((m.time.bb_count, m.pc, m.value)),
            TraceEvent::Sink(_) => None,
        })
        .filter(|&(bb, _, _)| bb > from.0)
        .collect()
}

#[test]
fn snapshot_first_instruction_is_initial_state() {
    let t = Arc::new(build_target("doorlock").unwrap());
    let snaps = snapshot_at(&t, &no_models(), b"OK\r\n", 0.0, &[(1, 0x44), (999_999, 0x44)]);
    let first = snaps[0].as_ref().unwrap();
    let mut init = t.program.initial_state();
    init.bb_count = 1;
    init.at_block_start = false;
    assert_eq!(*first.machine, init);
    assert!(snaps[1].is_none());
}

#[test]
fn resume_from_sink_reproduces_suffix() {
    let models = no_models();
    for (name, input) in [("steering", &b"steer,190\nmotor,12\n"[..]), ("uart-irq-echo", b"abc\ndef\n")] {
        let t = Arc::new(build_target(name).unwrap());
        let trace = record_trace(&t, &models, input, 0.0);
        let stamps: Vec<(u64, u32)> = trace.sinks().map(|s| (s.time.bb_count, s.pc)).step_by(5).collect();
        assert!(!stamps.is_empty());
        let snaps = snapshot_at(&t, &models, input, 0.0, &stamps);
        for (stamp, snap) in stamps.iter().zip(snaps) {
            let snap = snap.expect("sink timestamps are reached");
            let mut m = snap.machine(&t);
            let mut rec = Recorder { resolver: snap.resolver.clone(), out: Vec::new() };
            m.run(&mut rec);
            let resumed: Vec<_> = rec.out.into_iter().filter(|&(bb, _, _)| bb > stamp.0).collect();
            assert_eq!(resumed, tail(&trace, *stamp), "{name} from {stamp:?}");
        }
    }
}

#[test]
fn snapshot_inside_isr_has_isr_context() {
    let t = Arc::new(build_target("uart-irq-echo").unwrap());
    let trace = record_trace(&t, &no_models(), b"xyz\n", 0.0);
    let isr_read = trace.mmio().find(|m| m.isr != 0).unwrap();
    let snaps = snapshot_at(&t, &no_models(), b"xyz\n", 0.0, &[(isr_read.time.bb_count, isr_read.pc)]);
    assert_eq!(snaps[0].as_ref().unwrap().machine.irq_context, isr_read.isr);
}
