//! Instrumented replay: detailed execution traces with byte-level taint.
//!
//! Trace text format, one event per line, numbers in lowercase hex:
//!
//! ```text
//! BB 1fd7, ADDR 813cc, IRQ 80718-3
//! BB 1fd7, PC 813cc, MMIO 400e0818, SIZE 4, VAL 00000073
//! BB 5ea0, PC 824e4, RAM 20071270, SIZE 4, VAL 65657473,
//!   SRC 1fd7 813cc 400e0818 80718-3, # MMIO data
//!   SRC 27ab 813cc 400e0818 80718-4 # MMIO data
//! BB 5ea0, PC 82502,
//!   SRC 1fd7 813cc 400e0818 80718-3, # MMIO data
//!   SRC 84b17 74 84b13 0-0 # string byte
//! ```
//!
//! A sink header is followed by its sources, comma-separated except for the
//! last. `SRC <bb> <pc> <reg> <isr>-<seq>` names an MMIO read and
//! `SRC <end> <byte> <addr> 0-0` a string byte. The trailing comment tells
//! the two apart; without it, a source is a string byte when its context is
//! `0-0`, the byte fits in 8 bits and the address does not exceed the end.
//! Header comments carry `copy` and `truncated` flags. A final `# stop <verdict>` line records how
//! the replay ended.

mod tracer;

pub use tracer::{record_trace, snapshot_at, HarnessSnapshot, MAX_SINK_SOURCES};

use std::fmt::{self, Write as _};

use crate::fuzz::Verdict;
use crate::isa::image::{MMIO_BASE, MMIO_END};

/// Position of an event: block count, then order within the block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Time {
    pub bb_count: u64,
    pub seq: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MmioSource {
    pub bb_count: u64,
    pub pc: u32,
    pub reg: u32,
    pub isr: u32,
    pub irq_seq: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StringSource {
    pub end: u32,
    pub byte: u8,
    pub addr: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaintLabel {
    Mmio(MmioSource),
    Str(StringSource),
}

impl TaintLabel {
    pub fn as_mmio(&self) -> Option<&MmioSource> {
        match self {
            TaintLabel::Mmio(m) => Some(m),
            TaintLabel::Str(_) => None,
        }
    }

    pub fn as_str(&self) -> Option<&StringSource> {
        match self {
            TaintLabel::Str(s) => Some(s),
            TaintLabel::Mmio(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SinkKind {
    RamRead { addr: u32, size: u32, value: u32 },
    NonMemory,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sink {
    pub time: Time,
    pub pc: u32,
    pub kind: SinkKind,
    /// Sorted: MMIO reads chronologically, then string bytes.
    pub sources: Vec<TaintLabel>,
    /// More than [`MAX_SINK_SOURCES`] sources; the rest were dropped.
    pub truncated: bool,
    /// A RAM read whose value is stored again within the same block.
    pub copy: bool,
}

impl Sink {
    pub fn is_memory(&self) -> bool {
        matches!(self.kind, SinkKind::RamRead { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BbEvent {
    pub time: Time,
    pub pc: u32,
    pub isr: u32,
    pub irq_seq: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MmioAccess {
    pub time: Time,
    pub pc: u32,
    pub addr: u32,
    pub size: u32,
    pub value: u32,
    pub isr: u32,
    pub irq_seq: u32,
}

impl MmioAccess {
    pub fn source(&self) -> MmioSource {
        MmioSource { bb_count: self.time.bb_count, pc: self.pc, reg: self.addr, isr: self.isr, irq_seq: self.irq_seq }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceEvent {
    Bb(BbEvent),
    Mmio(MmioAccess),
    Sink(Sink),
}

impl TraceEvent {
    pub fn time(&self) -> Time {
        match self {
            TraceEvent::Bb(b) => b.time,
            TraceEvent::Mmio(m) => m.time,
            TraceEvent::Sink(s) => s.time,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetailedTrace {
    pub events: Vec<TraceEvent>,
    pub stop: Verdict,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("trace line {line}: {msg}")]
pub struct TraceParseError {
    pub line: usize,
    pub msg: String,
}

fn verdict_name(v: Verdict) -> &'static str {
    match v {
        Verdict::Ok => "halted",
        Verdict::Crash => "fault",
        Verdict::Hang => "hang",
    }
}

impl DetailedTrace {
    pub fn bbs(&self) -> impl Iterator<Item = &BbEvent> {
        self.events.iter().filter_map(|e| match e {
            TraceEvent::Bb(b) => Some(b),
            _ => None,
        })
    }

    pub fn mmio(&self) -> impl Iterator<Item = &MmioAccess> {
        self.events.iter().filter_map(|e| match e {
            TraceEvent::Mmio(m) => Some(m),
            _ => None,
        })
    }

    pub fn sinks(&self) -> impl Iterator<Item = &Sink> {
        self.events.iter().filter_map(|e| match e {
            TraceEvent::Sink(s) => Some(s),
            _ => None,
        })
    }

    /// The MMIO access a source refers to.
    pub fn access(&self, src: &MmioSource) -> Option<&MmioAccess> {
        self.mmio().find(|m| m.time.bb_count == src.bb_count && m.pc == src.pc && m.addr == src.reg)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            match e {
                TraceEvent::Bb(b) => {
                    writeln!(out, "BB {:x}, ADDR {:x}, IRQ {:x}-{:x}", b.time.bb_count, b.pc, b.isr, b.irq_seq).unwrap()
                }
                TraceEvent::Mmio(m) => writeln!(
                    out,
                    "BB {:x}, PC {:x}, MMIO {:x}, SIZE {:x}, VAL {:08x}",
                    m.time.bb_count, m.pc, m.addr, m.size, m.value
                )
                .unwrap(),
                TraceEvent::Sink(s) => {
                    write!(out, "BB {:x}, PC {:x},", s.time.bb_count, s.pc).unwrap();
                    if let SinkKind::RamRead { addr, size, value } = s.kind {
                        write!(out, " RAM {addr:x}, SIZE {size:x}, VAL {value:08x},").unwrap();
                    }
                    let flags: Vec<&str> =
                        [(s.copy, "copy"), (s.truncated, "truncated")].iter().filter(|f| f.0).map(|f| f.1).collect();
                    if !flags.is_empty() {
                        write!(out, " # {}", flags.join(" ")).unwrap();
                    }
                    out.push('\n');
                    for (i, src) in s.sources.iter().enumerate() {
                        let sep = if i + 1 < s.sources.len() { "," } else { "" };
                        match src {
                            TaintLabel::Mmio(m) => writeln!(
                                out,
                                "  SRC {:x} {:x} {:x} {:x}-{:x}{sep} # MMIO data",
                                m.bb_count, m.pc, m.reg, m.isr, m.irq_seq
                            ),
                            TaintLabel::Str(c) => {
                                writeln!(out, "  SRC {:x} {:x} {:x} 0-0{sep} # string byte", c.end, c.byte, c.addr)
                            }
                        }
                        .unwrap();
                    }
                }
            }
        }
        writeln!(out, "# stop {}", verdict_name(self.stop)).unwrap();
        out
    }

    pub fn parse(text: &str) -> Result<DetailedTrace, TraceParseError> {
        let mut events: Vec<TraceEvent> = Vec::new();
        let mut stop = None;
        let mut ctx = (0u32, 0u32);
        let mut cur_bb = 0u64;
        let mut seq = 0u32;
        let mut open_sink = false;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |m: &str| TraceParseError { line, msg: m.to_string() };
            let (body, comment) = match raw.split_once('#') {
                Some((b, c)) => (b.trim(), c.trim()),
                None => (raw.trim(), ""),
            };
            if body.is_empty() {
                if let Some(v) = comment.strip_prefix("stop ") {
                    stop = Some(match v.trim() {
                        "halted" => Verdict::Ok,
                        "fault" => Verdict::Crash,
                        "hang" => Verdict::Hang,
                        _ => return Err(err("unknown stop kind")),
                    });
                }
                continue;
            }
            if let Some(rest) = body.strip_prefix("SRC") {
                if !open_sink {
                    return Err(err("SRC outside a sink"));
                }
                let rest = rest.trim();
                let more = rest.ends_with(',');
                let f: Vec<&str> = rest.trim_end_matches(',').split_whitespace().collect();
                if f.len() != 4 {
                    return Err(err("SRC needs four fields"));
                }
                let (a, b, c) = (hex(f[0], &err)?, hex(f[1], &err)?, hex(f[2], &err)?);
                let (isr, iseq) = pair(f[3], &err)?;
                let is_string = match comment {
                    "string byte" => true,
                    "MMIO data" => false,
                    _ => (isr, iseq) == (0, 0) && b <= 0xff && c <= a && !(MMIO_BASE..=MMIO_END).contains(&(c as u32)),
                };
                let label = if !is_string {
                    TaintLabel::Mmio(MmioSource { bb_count: a, pc: b as u32, reg: c as u32, isr, irq_seq: iseq })
                } else {
                    if b > 0xff {
                        return Err(err("string byte out of range"));
                    }
                    TaintLabel::Str(StringSource { end: a as u32, byte: b as u8, addr: c as u32 })
                };
                match events.last_mut() {
                    Some(TraceEvent::Sink(s)) => s.sources.push(label),
                    _ => unreachable!(),
                }
                open_sink = more;
                continue;
            }
            if open_sink {
                return Err(err("sink source list not terminated"));
            }
            let fields: Vec<&str> = body.trim_end_matches(',').split(',').map(str::trim).collect();
            let kv = |k: &str| -> Result<Option<u64>, TraceParseError> {
                for f in &fields {
                    if let Some(v) = f.strip_prefix(k).and_then(|v| v.strip_prefix(' ')) {
                        return hex(v.trim(), &err).map(Some);
                    }
                }
                Ok(None)
            };
            let bb = kv("BB")?.ok_or_else(|| err("missing BB"))?;
            if bb != cur_bb {
                cur_bb = bb;
                seq = 0;
            } else {
                seq += 1;
            }
            let time = Time { bb_count: bb, seq };
            if let Some(pc) = kv("ADDR")? {
                let irq = fields.iter().find_map(|f| f.strip_prefix("IRQ ")).ok_or_else(|| err("missing IRQ"))?;
                ctx = pair(irq.trim(), &err)?;
                events.push(TraceEvent::Bb(BbEvent { time, pc: pc as u32, isr: ctx.0, irq_seq: ctx.1 }));
                continue;
            }
            let pc = kv("PC")?.ok_or_else(|| err("missing PC"))? as u32;
            if let Some(addr) = kv("MMIO")? {
                let size = kv("SIZE")?.ok_or_else(|| err("missing SIZE"))? as u32;
                let value = kv("VAL")?.ok_or_else(|| err("missing VAL"))? as u32;
                events.push(TraceEvent::Mmio(MmioAccess {
                    time,
                    pc,
                    addr: addr as u32,
                    size,
                    value,
                    isr: ctx.0,
                    irq_seq: ctx.1,
                }));
                continue;
            }
            let kind = match kv("RAM")? {
                Some(addr) => SinkKind::RamRead {
                    addr: addr as u32,
                    size: kv("SIZE")?.ok_or_else(|| err("missing SIZE"))? as u32,
                    value: kv("VAL")?.ok_or_else(|| err("missing VAL"))? as u32,
                },
                None => SinkKind::NonMemory,
            };
            let flags: Vec<&str> = comment.split_whitespace().collect();
            events.push(TraceEvent::Sink(Sink {
                time,
                pc,
                kind,
                sources: Vec::new(),
                truncated: flags.contains(&"truncated"),
                copy: flags.contains(&"copy"),
            }));
            open_sink = true;
        }
        if open_sink {
            return Err(TraceParseError { line: text.lines().count(), msg: "unterminated sink".into() });
        }
        let stop = stop.ok_or(TraceParseError { line: 0, msg: "missing stop line".into() })?;
        Ok(DetailedTrace { events, stop })
    }
}

fn hex<E>(s: &str, err: &impl Fn(&str) -> E) -> Result<u64, E> {
    u64::from_str_radix(s, 16).map_err(|_| err("bad hex number"))
}

fn pair<E>(s: &str, err: &impl Fn(&str) -> E) -> Result<(u32, u32), E> {
    let (a, b) = s.split_once('-').ok_or_else(|| err("expected <isr>-<seq>"))?;
    Ok((hex(a, err)? as u32, hex(b, err)? as u32))
}

impl fmt::Display for DetailedTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "BB 1fd7, ADDR 813cc, IRQ 80718-3
BB 1fd7, PC 813cc, MMIO 400e0818, SIZE 4, VAL 00000073
BB 5ea0, ADDR 824de, IRQ 0-0
BB 5ea0, PC 824e4, RAM 20071270, SIZE 4, VAL 65657473,
  SRC 1fd7 813cc 400e0818 80718-3, # MMIO data
  SRC 27ab 813cc 400e0818 80718-4 # MMIO data
BB 5ea0, PC 82502,
  SRC 1fd7 813cc 400e0818 80718-3, # MMIO data
  SRC 84b17 74 84b13 0-0 # string byte
# stop halted
";

    #[test]
    fn listing_shape_round_trip() {
        let t = DetailedTrace::parse(SAMPLE).unwrap();
        assert_eq!(t.events.len(), 5);
        let sinks: Vec<&Sink> = t.sinks().collect();
        assert_eq!(sinks[0].kind, SinkKind::RamRead { addr: 0x2007_1270, size: 4, value: 0x6565_7473 });
        assert_eq!(sinks[1].sources[1], TaintLabel::Str(StringSource { end: 0x84b17, byte: 0x74, addr: 0x84b13 }));
        assert_eq!(t.mmio().next().unwrap().isr, 0x80718);
        assert_eq!(sinks[1].time, Time { bb_count: 0x5ea0, seq: 2 });
        assert_eq!(t.to_text(), SAMPLE);
    }

    #[test]
    fn aligned_listing_parses() {
        let text = "BB 5ea0, PC 824e4, RAM  20071270, SIZE 4, VAL 65657473,\n  SRC  1fd7 813cc 400e0818 80718-3, # MMIO data\n  SRC 84b17    74    84b13     0-0  # string byte\n# stop hang\n";
        let t = DetailedTrace::parse(text).unwrap();
        assert_eq!(t.sinks().next().unwrap().sources.len(), 2);
        assert_eq!(t.stop, Verdict::Hang);
    }

    #[test]
    fn malformed() {
        assert!(DetailedTrace::parse("  SRC 1 2 3 0-0\n# stop halted\n").is_err());
        assert!(DetailedTrace::parse("BB 1, PC 2,\n  SRC 1 2 40000000 0-0,\n# stop halted\n").is_err());
        assert!(DetailedTrace::parse("BB 1, ADDR 44, IRQ 0-0\n").is_err());
    }
}
