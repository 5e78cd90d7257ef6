//! Grouping of MMIO reads into presumed data chunks.
//!
//! Reads are partitioned by label `(I, R)`. Each read gets the interval
//! spanned by its sinks; reads whose intervals overlap are merged until no
//! two groups overlap. RAM reads that are only copied (stored again in the
//! same block) do not count towards intervals, unless a read has no other
//! sinks.
//!
//! Groups are then matched with constant strings used together with their
//! reads. A sink whose sources hold reads of the group and string bytes pairs
//! them up in order: reads by time, string bytes by address. Per string, the
//! match starts at the lowest paired string byte and is anchored at the reads
//! paired with that byte. A match is dropped when a RAM read mixes the
//! group's data with the string, which indicates concatenation rather than
//! comparison.

mod strings;

pub use strings::{identify_strings, ConstantString, MIN_STRING_LEN};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::modelgen::Label;
use crate::taint::{DetailedTrace, MmioSource, TaintLabel, Time};

/// A tainted read with the times of its sinks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadInfo {
    pub source: MmioSource,
    pub time: Time,
    /// Chronological sink times used for the interval.
    pub sinks: Vec<Time>,
}

impl ReadInfo {
    pub fn interval(&self) -> (Time, Time) {
        (self.sinks[0], *self.sinks.last().unwrap())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StringMatch {
    /// The string trimmed to the first byte the firmware used.
    pub string: ConstantString,
    /// Reads paired with the first used byte.
    pub anchors: Vec<MmioSource>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadGroup {
    pub label: Label,
    /// Reads in order of occurrence.
    pub reads: Vec<ReadInfo>,
    pub interval: (Time, Time),
    /// Ordinal among groups of the same label, from 1.
    pub index: usize,
    pub matches: Vec<StringMatch>,
}

impl ReadGroup {
    pub fn first_read(&self) -> &ReadInfo {
        &self.reads[0]
    }

    pub fn contains(&self, src: &MmioSource) -> bool {
        self.reads.iter().any(|r| r.source == *src)
    }
}

pub fn label_of(src: &MmioSource) -> Label {
    Label::new(src.isr, src.reg)
}

/// Tainted reads with at least one sink, by label, in order of occurrence.
pub fn partition_reads(trace: &DetailedTrace) -> BTreeMap<Label, Vec<ReadInfo>> {
    let mut kept: BTreeMap<MmioSource, Vec<Time>> = BTreeMap::new();
    let mut copies: BTreeMap<MmioSource, Vec<Time>> = BTreeMap::new();
    for s in trace.sinks() {
        let dst = if s.copy { &mut copies } else { &mut kept };
        for m in s.sources.iter().filter_map(TaintLabel::as_mmio) {
            dst.entry(*m).or_default().push(s.time);
        }
    }
    let mut out: BTreeMap<Label, Vec<ReadInfo>> = BTreeMap::new();
    for acc in trace.mmio() {
        let src = acc.source();
        let sinks = match kept.get(&src) {
            Some(v) => v.clone(),
            None => match copies.get(&src) {
                Some(v) => v.clone(),
                None => continue,
            },
        };
        out.entry(label_of(&src)).or_default().push(ReadInfo { source: src, time: acc.time, sinks });
    }
    out
}

/// Merges closed intervals that overlap, transitively. Returns the member
/// indices and span of each merged interval, ordered by start.
pub fn merge_intervals<T: Ord + Copy>(intervals: &[(T, T)]) -> Vec<(Vec<usize>, (T, T))> {
    let mut order: Vec<usize> = (0..intervals.len()).collect();
    order.sort_by_key(|&i| (intervals[i].0, i));
    let mut out: Vec<(Vec<usize>, (T, T))> = Vec::new();
    for i in order {
        let (s, e) = intervals[i];
        match out.last_mut() {
            Some((members, span)) if s <= span.1 => {
                members.push(i);
                span.1 = span.1.max(e);
            }
            _ => out.push((vec![i], (s, e))),
        }
    }
    for (m, _) in &mut out {
        m.sort_unstable();
    }
    out
}

/// Groups one partition's reads.
pub fn group_reads(label: Label, reads: &[ReadInfo]) -> Vec<ReadGroup> {
    let intervals: Vec<(Time, Time)> = reads.iter().map(ReadInfo::interval).collect();
    merge_intervals(&intervals)
        .into_iter()
        .enumerate()
        .map(|(i, (members, interval))| ReadGroup {
            label,
            reads: members.into_iter().map(|m| reads[m].clone()).collect(),
            interval,
            index: i + 1,
            matches: Vec::new(),
        })
        .collect()
}

/// Groups of every label, ordered by the time of their first read.
pub fn group_trace(trace: &DetailedTrace) -> Vec<ReadGroup> {
    let mut all: Vec<ReadGroup> =
        partition_reads(trace).iter().flat_map(|(label, reads)| group_reads(*label, reads)).collect();
    all.sort_by_key(|g| (g.first_read().time, g.label));
    all
}

/// Attaches string matches to each group.
pub fn match_strings(groups: &mut [ReadGroup], trace: &DetailedTrace, strings: &[ConstantString]) {
    for g in groups.iter_mut() {
        // string end -> (paired read, string byte address)
        let mut pairs: BTreeMap<u32, Vec<(MmioSource, u32)>> = BTreeMap::new();
        let mut concatenated: BTreeSet<u32> = BTreeSet::new();
        for s in trace.sinks() {
            let mut reads: Vec<&MmioSource> =
                s.sources.iter().filter_map(TaintLabel::as_mmio).filter(|m| g.contains(m)).collect();
            if reads.is_empty() {
                continue;
            }
            let mut bytes: Vec<_> = s.sources.iter().filter_map(TaintLabel::as_str).collect();
            if bytes.is_empty() {
                continue;
            }
            if s.is_memory() {
                concatenated.extend(bytes.iter().map(|b| b.end));
                continue;
            }
            reads.sort();
            bytes.sort_by_key(|b| b.addr);
            for (m, c) in reads.iter().zip(&bytes) {
                pairs.entry(c.end).or_default().push((**m, c.addr));
            }
        }
        g.matches.clear();
        for (end, ps) in pairs {
            if concatenated.contains(&end) {
                continue;
            }
            let Some(full) = strings.iter().find(|s| s.end == end) else {
                continue;
            };
            let first = ps.iter().map(|p| p.1).min().unwrap();
            if first >= full.end {
                continue;
            }
            let anchors: BTreeSet<MmioSource> = ps.iter().filter(|p| p.1 == first).map(|p| p.0).collect();
            g.matches.push(StringMatch { string: full.suffix_from(first), anchors: anchors.into_iter().collect() });
        }
    }
}

/// Groups with string matches, as used by the pipeline.
pub fn cluster_trace(trace: &DetailedTrace, strings: &[ConstantString]) -> Vec<ReadGroup> {
    let mut groups = group_trace(trace);
    match_strings(&mut groups, trace, strings);
    groups
}

fn time_text(t: Time) -> String {
    format!("{:x}.{}", t.bb_count, t.seq)
}

/// Human-readable dump of groups.
pub fn groups_report(groups: &[ReadGroup]) -> String {
    let mut out = String::new();
    for g in groups {
        writeln!(
            out,
            "group {} #{} [{}, {}] reads {}",
            g.label,
            g.index,
            time_text(g.interval.0),
            time_text(g.interval.1),
            g.reads.len()
        )
        .unwrap();
        for r in &g.reads {
            let (s, e) = r.interval();
            writeln!(
                out,
                "  read {:x} {:x} {:x}-{:x} sinks {} [{}, {}]",
                r.source.bb_count,
                r.source.pc,
                r.source.isr,
                r.source.irq_seq,
                r.sinks.len(),
                time_text(s),
                time_text(e)
            )
            .unwrap();
        }
        for m in &g.matches {
            let anchors: Vec<String> = m.anchors.iter().map(|a| format!("{:x}", a.bb_count)).collect();
            writeln!(out, "  match {:?} at {:x} anchors {}", m.string.text(), m.string.start, anchors.join(",")).unwrap();
        }
    }
    out
}
