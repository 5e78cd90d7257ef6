//! Materialized event stream of an execution.

use super::{Hooks, MachineState, Stop};
use crate::isa::Instruction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    BbEnter,
    /// An instruction about to execute; `value` holds its encoding.
    Insn,
    MmioRead,
    MmioWrite,
    RamRead,
    RamWrite,
    IrqEnter,
    IrqExit,
    Halt,
    Fault,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ExecEvent {
    pub kind: EventKind,
    pub bb_count: u64,
    pub pc: u32,
    pub irq_context: u32,
    pub addr: u32,
    pub size: u32,
    pub value: u32,
}

impl ExecEvent {
    fn at(kind: EventKind, st: &MachineState, pc: u32) -> ExecEvent {
        ExecEvent { kind, bb_count: st.bb_count, pc, irq_context: st.irq_context, addr: 0, size: 0, value: 0 }
    }
}

/// Hooks that record every event and answer MMIO reads from a provider.
pub struct EventLog<P> {
    pub provider: P,
    pub events: Vec<ExecEvent>,
}

impl<P: FnMut(u32, u32) -> u32> EventLog<P> {
    pub fn new(provider: P) -> Self {
        EventLog { provider, events: Vec::new() }
    }
}

impl<P: FnMut(u32, u32) -> u32> Hooks for EventLog<P> {
    fn mmio_read(&mut self, st: &MachineState, pc: u32, addr: u32, size: u32) -> u32 {
        let raw = (self.provider)(addr, size);
        let value = if size == 1 { raw & 0xff } else { raw };
        self.events.push(ExecEvent { addr, size, value, ..ExecEvent::at(EventKind::MmioRead, st, pc) });
        value
    }
    fn bb_enter(&mut self, st: &MachineState) {
        self.events.push(ExecEvent::at(EventKind::BbEnter, st, st.pc));
    }
    fn before_insn(&mut self, st: &MachineState, insn: &Instruction) {
        self.events.push(ExecEvent { value: insn.encode().unwrap_or(0), ..ExecEvent::at(EventKind::Insn, st, st.pc) });
    }
    fn mmio_write(&mut self, st: &MachineState, pc: u32, addr: u32, size: u32, value: u32) {
        self.events.push(ExecEvent { addr, size, value, ..ExecEvent::at(EventKind::MmioWrite, st, pc) });
    }
    fn ram_read(&mut self, st: &MachineState, pc: u32, addr: u32, size: u32, value: u32) {
        self.events.push(ExecEvent { addr, size, value, ..ExecEvent::at(EventKind::RamRead, st, pc) });
    }
    fn ram_write(&mut self, st: &MachineState, pc: u32, addr: u32, size: u32, value: u32) {
        self.events.push(ExecEvent { addr, size, value, ..ExecEvent::at(EventKind::RamWrite, st, pc) });
    }
    fn irq_enter(&mut self, st: &MachineState, irq: u8) {
        self.events.push(ExecEvent { value: irq as u32, ..ExecEvent::at(EventKind::IrqEnter, st, st.pc) });
    }
    fn irq_exit(&mut self, st: &MachineState) {
        self.events.push(ExecEvent::at(EventKind::IrqExit, st, st.pc));
    }
    fn stopped(&mut self, st: &MachineState, stop: Stop) {
        let kind = match stop {
            Stop::Fault(_) => EventKind::Fault,
            _ => EventKind::Halt,
        };
        self.events.push(ExecEvent::at(kind, st, st.pc));
    }
}
