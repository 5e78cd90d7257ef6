//! Stateful MMIO models: per-label value sequences the fuzzer selects from.
//!
//! A model belongs to a label `(I, R)`: the ISR address `I` the reads occur
//! in (0 outside interrupts) and the register address `R`. Entry 0 is the
//! dummy `undef` entry, which defers one read to the baseline model.
//!
//! Text format, one model per file:
//!
//! ```text
//! isr_00080718_mmio_400e0818:
//!   0: undef # fall back on the baseline model
//!   1: [0x73,0x74,0x65,0x65,0x72,0x2c,0x0a] # 'steer,\n'
//!   2: [0x4f,undef,0x0d] # 'O?\r'
//! ```
//!
//! Labels with `I = 0` are written `ctx0_mmio_<R>`. Indices are right-aligned
//! to three columns. The trailing comment is derived from the values and is
//! ignored when parsing.

mod build;
mod select;
mod store;

pub use build::{build_entry, BuildError, PriorRead};
pub use select::{next_value, select_model, ModelSelection, Next, DEFAULT_P_SKIP};
pub use store::{ManifestRecord, ModelStore, StoreError};

use std::collections::BTreeSet;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Label {
    pub isr: u32,
    pub reg: u32,
}

impl Label {
    pub fn new(isr: u32, reg: u32) -> Label {
        Label { isr, reg }
    }

    pub fn key(&self) -> String {
        if self.isr == 0 {
            format!("ctx0_mmio_{:08x}", self.reg)
        } else {
            format!("isr_{:08x}_mmio_{:08x}", self.isr, self.reg)
        }
    }

    pub fn parse_key(key: &str) -> Option<Label> {
        let hex = |s: &str| (s.len() == 8).then(|| u32::from_str_radix(s, 16).ok()).flatten();
        if let Some(r) = key.strip_prefix("ctx0_mmio_") {
            return Some(Label::new(0, hex(r)?));
        }
        let rest = key.strip_prefix("isr_")?;
        let (i, r) = rest.split_once("_mmio_")?;
        let isr = hex(i)?;
        (isr != 0).then_some(Label::new(isr, hex(r)?))
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

/// Where a model entry came from.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Provenance {
    pub run: u64,
    pub witness: u64,
    pub group_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelEntry {
    /// One value per read; `None` defers that read to the baseline model.
    pub values: Vec<Option<u32>>,
    /// Positions that start a one-read group; these may be skipped.
    pub singletons: BTreeSet<usize>,
    pub provenance: Option<Provenance>,
}

impl ModelEntry {
    pub fn new(values: Vec<Option<u32>>) -> ModelEntry {
        ModelEntry { values, singletons: BTreeSet::new(), provenance: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StatefulModel {
    pub label: Label,
    /// Entries `1..`; the dummy entry 0 is implicit.
    pub entries: Vec<ModelEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: {msg}")]
pub struct ParseError {
    pub line: usize,
    pub msg: String,
}

impl StatefulModel {
    pub fn new(label: Label) -> StatefulModel {
        StatefulModel { label, entries: Vec::new() }
    }

    /// Number of selectable entries including the dummy.
    pub fn entry_count(&self) -> usize {
        self.entries.len() + 1
    }

    /// Entry `z`, or `None` for the dummy.
    pub fn entry(&self, z: usize) -> Option<&ModelEntry> {
        z.checked_sub(1).and_then(|i| self.entries.get(i))
    }

    /// Appends an entry unless an identical value list exists. Returns the
    /// entry's index.
    pub fn push(&mut self, entry: ModelEntry) -> (usize, bool) {
        if let Some(i) = self.entries.iter().position(|e| e.values == entry.values) {
            return (i + 1, false);
        }
        assert!(!entry.values.is_empty(), "model entries are nonempty");
        self.entries.push(entry);
        (self.entries.len(), true)
    }

    pub fn serialize(&self) -> String {
        let mut out = format!("{}:\n", self.label.key());
        out.push_str(&format!("{:>3}: undef # fall back on the baseline model\n", 0));
        for (i, e) in self.entries.iter().enumerate() {
            let vals: Vec<String> = e
                .values
                .iter()
                .map(|v| match v {
                    Some(x) => format!("{x:#04x}"),
                    None => "undef".to_string(),
                })
                .collect();
            out.push_str(&format!("{:>3}: [{}]", i + 1, vals.join(",")));
            if let Some(c) = text_comment(&e.values) {
                out.push_str(&format!(" # '{c}'"));
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<StatefulModel, ParseError> {
        let mut label = None;
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |m: &str| ParseError { line, msg: m.to_string() };
            let l = raw.split('#').next().unwrap().trim();
            if l.is_empty() {
                continue;
            }
            if label.is_none() {
                let key = l.strip_suffix(':').ok_or_else(|| err("expected `<label>:`"))?;
                label = Some(Label::parse_key(key).ok_or_else(|| err("malformed label"))?);
                continue;
            }
            let (idx, body) = l.split_once(':').ok_or_else(|| err("expected `<index>: ...`"))?;
            let idx: usize = idx.trim().parse().map_err(|_| err("bad index"))?;
            if idx != entries.len() {
                return Err(err("indices must be contiguous from 0"));
            }
            let body = body.trim();
            if idx == 0 {
                if body != "undef" {
                    return Err(err("entry 0 must be undef"));
                }
                entries.push(None);
                continue;
            }
            let inner = body
                .strip_prefix('[')
                .and_then(|b| b.strip_suffix(']'))
                .ok_or_else(|| err("expected `[v,...]`"))?;
            let mut values = Vec::new();
            for v in inner.split(',') {
                let v = v.trim();
                if v == "undef" {
                    values.push(None);
                } else {
                    let h = v.strip_prefix("0x").ok_or_else(|| err("values must be 0x hex or undef"))?;
                    values.push(Some(u32::from_str_radix(h, 16).map_err(|_| err("bad hex value"))?));
                }
            }
            if values.is_empty() || inner.trim().is_empty() {
                return Err(err("empty entry"));
            }
            entries.push(Some(ModelEntry::new(values)));
        }
        let label = label.ok_or(ParseError { line: 0, msg: "empty model".into() })?;
        if entries.is_empty() {
            return Err(ParseError { line: 0, msg: "missing entry 0".into() });
        }
        Ok(StatefulModel { label, entries: entries.into_iter().flatten().collect() })
    }
}

/// Readable rendering of byte-valued entries, `?` for undefined bytes.
fn text_comment(values: &[Option<u32>]) -> Option<String> {
    let mut s = String::new();
    for v in values {
        match *v {
            None => s.push('?'),
            Some(x) if x > 0xff => return None,
            Some(x) => match x as u8 {
                b'\n' => s.push_str("\\n"),
                b'\r' => s.push_str("\\r"),
                b'\t' => s.push_str("\\t"),
                0 => s.push_str("\\0"),
                b'\\' => s.push_str("\\\\"),
                b'\'' => s.push_str("\\'"),
                b @ 0x20..=0x7e => s.push(b as char),
                b => s.push_str(&format!("\\x{b:02x}")),
            },
        }
    }
    Some(s)
}
