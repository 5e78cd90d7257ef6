//! Per-group exploration: start states, pre-constrained lanes, scheduling.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use super::explore::{explore, DseConfig, LaneOutcome, LaneSpec, Termination, Witness};
use super::state::{ExecCtx, ReadPlan, Step, SymRead, SymState, TraceIndex};
use crate::cluster::ReadGroup;
use crate::corpus::Target;
use crate::modelgen::{Label, ModelStore};
use crate::taint::{snapshot_at, DetailedTrace, SinkKind, TaintLabel};

/// Block entries an ISR replay may deviate from its recorded path.
pub const DEVIATION_TOLERANCE: usize = 4;

/// Everything exploration needs about the traced test case.
pub struct DseRun<'a> {
    pub target: &'a Arc<Target>,
    pub models: &'a Arc<ModelStore>,
    pub input: &'a [u8],
    pub p_skip: f64,
    pub trace: &'a DetailedTrace,
    pub groups: &'a [ReadGroup],
}

#[derive(Debug, Clone)]
pub struct GroupAttempt {
    pub label: Label,
    pub index: usize,
    pub lanes: Vec<LaneOutcome>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct DseReport {
    pub attempts: Vec<GroupAttempt>,
    pub witnesses: Vec<Witness>,
    pub diagnostics: Vec<String>,
}

impl DseReport {
    pub fn states_explored(&self) -> usize {
        self.attempts.iter().flat_map(|a| &a.lanes).map(|l| l.dequeued).sum()
    }

    pub fn end_histogram(&self) -> BTreeMap<&'static str, usize> {
        let mut h = BTreeMap::new();
        for l in self.attempts.iter().flat_map(|a| &a.lanes) {
            for (k, v) in &l.ends {
                *h.entry(*k).or_default() += v;
            }
        }
        h
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "groups attempted {}", self.attempts.len()).unwrap();
        writeln!(out, "states explored {}", self.states_explored()).unwrap();
        for (k, v) in self.end_histogram() {
            writeln!(out, "end {k} {v}").unwrap();
        }
        for a in &self.attempts {
            writeln!(out, "group {} #{}{}", a.label, a.index, a.note.as_deref().map(|n| format!(" ({n})")).unwrap_or_default())
                .unwrap();
            for l in &a.lanes {
                writeln!(
                    out,
                    "  lane {} states {} witnesses {} rejected {} stop {}",
                    l.name,
                    l.dequeued,
                    l.witnesses.len(),
                    l.rejected,
                    l.termination.name()
                )
                .unwrap();
            }
        }
        for w in &self.witnesses {
            let vals: Vec<String> =
                w.values.iter().map(|v| v.map_or("undef".to_string(), |x| format!("{x:#x}"))).collect();
            writeln!(out, "witness {} #{} bb {:#x} lane {} [{}]", w.label, w.group_index, w.reached_bb, w.lane, vals.join(" "))
                .unwrap();
        }
        for d in &self.diagnostics {
            writeln!(out, "note {d}").unwrap();
        }
        out
    }
}

/// A group's start state plus group values materialized before it.
pub struct StartState {
    pub state: SymState,
    pub prefix: Vec<SymRead>,
}

fn group_plan(ix: &TraceIndex, group: &ReadGroup) -> Result<ReadPlan, String> {
    let mut plan = ReadPlan::default();
    for (pos, r) in group.reads.iter().enumerate() {
        let j = ix
            .find_read(r.source.bb_count, r.source.pc)
            .ok_or_else(|| format!("group read at {:x}/{:x} missing from trace", r.source.bb_count, r.source.pc))?;
        plan.group.insert(j, pos);
        plan.last = plan.last.max(j);
    }
    Ok(plan)
}

fn ctx<'a>(target: &'a Target, ix: &'a TraceIndex, plan: &'a ReadPlan, cfg: &DseConfig) -> ExecCtx<'a> {
    ExecCtx {
        program: &target.program,
        target,
        vm: target.config.vm_config(),
        trace: ix,
        plan,
        heuristics: cfg.heuristics,
        symbol_budget: cfg.symbol_budget,
        stack_limit: target.stack_limit(),
    }
}

/// Start state at the group's first read, for groups read by the main
/// program.
fn main_start(run: &DseRun, ix: &TraceIndex, group: &ReadGroup) -> Result<StartState, String> {
    let first = &group.first_read().source;
    let snap = snapshot_at(run.target, run.models, run.input, run.p_skip, &[(first.bb_count, first.pc)])
        .pop()
        .flatten()
        .ok_or("first read not reached")?;
    let mut state = SymState::from_machine(&snap.machine);
    state.mmio_ptr = ix.find_read(first.bb_count, first.pc).ok_or("first read missing")?;
    state.bb_ptr = ix.bbs.iter().rposition(|b| b.0 == first.bb_count);
    Ok(StartState { state, prefix: Vec::new() })
}

/// Start state at the first RAM read of the group's data in the main
/// program, with each earlier ISR instance replayed symbolically and its
/// symbolic RAM transferred.
fn isr_start(
    run: &DseRun,
    ix: &TraceIndex,
    group: &ReadGroup,
    plan: &ReadPlan,
    cfg: &DseConfig,
    notes: &mut Vec<String>,
) -> Result<StartState, String> {
    let ctx_of: BTreeMap<u64, u32> = run.trace.bbs().map(|b| (b.time.bb_count, b.isr)).collect();
    let use_sink = run
        .trace
        .sinks()
        .filter(|s| matches!(s.kind, SinkKind::RamRead { .. }))
        .filter(|s| ctx_of.get(&s.time.bb_count) == Some(&0))
        .find(|s| s.sources.iter().filter_map(TaintLabel::as_mmio).any(|m| group.contains(m)))
        .ok_or("no main-program use of the group")?;
    let t = use_sink.time;
    let mut instances: Vec<(u32, u32)> = Vec::new();
    for r in group.reads.iter().filter(|r| r.time < t) {
        let key = (r.source.isr, r.source.irq_seq);
        if !instances.contains(&key) {
            instances.push(key);
        }
    }
    let entries: Vec<(u64, u32)> = instances
        .iter()
        .map(|&(isr, seq)| {
            run.trace
                .bbs()
                .find(|b| b.isr == isr && b.irq_seq == seq)
                .map(|b| (b.time.bb_count, b.pc))
                .ok_or_else(|| format!("isr instance {isr:x}-{seq} has no blocks"))
        })
        .collect::<Result<_, _>>()?;
    let mut stamps = entries.clone();
    stamps.push((t.bb_count, use_sink.pc));
    let mut snaps = snapshot_at(run.target, run.models, run.input, run.p_skip, &stamps);
    let at_use = snaps.pop().flatten().ok_or("use point not reached")?;

    let cx = ctx(run.target, ix, plan, cfg);
    let mut carry = SymState::from_machine(&at_use.machine);
    let mut prefix = Vec::new();
    for ((isr, seq), snap) in instances.iter().zip(snaps) {
        let snap = snap.ok_or("isr entry not reached")?;
        let recorded: Vec<u32> =
            ix.bbs.iter().filter(|b| b.2 == *isr && b.3 == *seq).map(|b| b.1).collect();
        let mut s = SymState::from_machine(&snap.machine);
        s.symbols = carry.symbols;
        s.constraints = carry.constraints.clone();
        s.cvars = carry.cvars;
        s.model = carry.model;
        s.mmio_ptr = ix.reads.iter().position(|r| r.isr == *isr && r.irq_seq == *seq).unwrap_or(ix.reads.len());
        let frame_top = snap.machine.regs[crate::isa::SP as usize];
        let mut entered_n = 1usize; // the entry block was counted before the snapshot
        let mut deviations = 0usize;
        let mut ok = true;
        while !s.irq_stack.is_empty() {
            let mut entered = None;
            match s.step(&cx, &mut entered) {
                Step::Continue => {
                    if entered.is_some() {
                        entered_n += 1;
                    }
                }
                Step::End(e) => {
                    notes.push(format!("isr {isr:x}-{seq} replay ended: {}", e.name()));
                    ok = false;
                    break;
                }
                Step::Branch { constraint, taken, fallthrough } => {
                    let want = recorded.get(entered_n).copied();
                    let (c, to) = if want == Some(taken) {
                        (constraint, taken)
                    } else if want == Some(fallthrough) {
                        (constraint.negated(), fallthrough)
                    } else {
                        deviations += 1;
                        if deviations > DEVIATION_TOLERANCE {
                            ok = false;
                            break;
                        }
                        (constraint, taken)
                    };
                    let mut all = s.constraints.clone();
                    all.push(c.clone());
                    match super::solver::solve(&all, &s.model, cfg.eval_budget) {
                        super::solver::SolveResult::Sat(m) => {
                            s.add_constraint(c, Some(m));
                            s.follow(to);
                        }
                        _ => {
                            ok = false;
                            break;
                        }
                    }
                }
            }
        }
        if !ok {
            notes.push(format!("isr {isr:x}-{seq} replay deviated; instance skipped"));
            continue;
        }
        prefix.extend(s.reads.iter().filter(|r| r.group_pos.is_some()).cloned());
        let lo = frame_top.wrapping_sub(crate::isa::image::RAM_BASE);
        let stack_lo = run.target.stack_limit().wrapping_sub(crate::isa::image::RAM_BASE);
        for (off, e) in s.mem.symbolic() {
            if *off < stack_lo || *off >= lo {
                carry.mem.set_byte(*off, Arc::clone(e));
            }
        }
        carry.symbols = s.symbols;
        carry.constraints = s.constraints;
        carry.cvars = s.cvars;
        carry.model = s.model;
    }
    carry.mmio_ptr = ix.reads.iter().position(|r| (r.bb_count, r.seq) > (t.bb_count, t.seq)).unwrap_or(ix.reads.len());
    carry.bb_ptr = ix.bbs.iter().rposition(|b| b.0 == t.bb_count);
    Ok(StartState { state: carry, prefix })
}

/// Pre-constrained copies of a group: one per (matched string, anchor),
/// grouped into one lane per string and ordered by anchor time.
fn string_lanes(group: &ReadGroup) -> Vec<(String, Vec<BTreeMap<usize, u32>>)> {
    let mut lanes = Vec::new();
    for m in &group.matches {
        let mut anchors: Vec<usize> =
            m.anchors.iter().filter_map(|a| group.reads.iter().position(|r| r.source == *a)).collect();
        anchors.sort_by_key(|&p| group.reads[p].time);
        let copies = anchors
            .into_iter()
            .map(|p| {
                m.string
                    .bytes
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| p + i < group.reads.len())
                    .map(|(i, &b)| (p + i, b as u32))
                    .collect()
            })
            .collect();
        lanes.push((m.string.text(), copies));
    }
    lanes
}

fn attempt_group(
    run: &DseRun,
    ix: &TraceIndex,
    group: &ReadGroup,
    wanted: &mut BTreeSet<u32>,
    cfg: &DseConfig,
    notes: &mut Vec<String>,
) -> GroupAttempt {
    let mut attempt = GroupAttempt { label: group.label, index: group.index, lanes: Vec::new(), note: None };
    let deadline = Instant::now() + cfg.timeout;
    let base_plan = match group_plan(ix, group) {
        Ok(p) => p,
        Err(e) => {
            attempt.note = Some(e);
            return attempt;
        }
    };
    let mut variants: Vec<(String, Vec<ReadPlan>, bool)> = Vec::new();
    if cfg.heuristics {
        for (text, copies) in string_lanes(group) {
            let plans = copies.into_iter().map(|forced| ReadPlan { forced, ..base_plan.clone() }).collect();
            variants.push((format!("{text:?}"), plans, true));
        }
    }
    variants.push(("free".to_string(), vec![base_plan.clone()], false));
    let mut found = false;
    for (name, plans, is_string) in variants {
        if !is_string && found {
            break;
        }
        for (ci, plan) in plans.iter().enumerate() {
            let start = if group.label.isr == 0 {
                main_start(run, ix, group)
            } else {
                isr_start(run, ix, group, plan, cfg, notes)
            };
            let start = match start {
                Ok(s) => s,
                Err(e) => {
                    attempt.note = Some(e);
                    return attempt;
                }
            };
            let cx = ctx(run.target, ix, plan, cfg);
            let spec = LaneSpec {
                name: if plans.len() > 1 { format!("{name}@{ci}") } else { name.clone() },
                label: group.label,
                group_index: group.index,
                prefix: start.prefix,
                stop_on_first: is_string,
            };
            let out = explore(&cx, &spec, start.state, wanted, cfg, deadline);
            let hit = !out.witnesses.is_empty();
            let timed_out = out.termination == Termination::Timeout;
            attempt.lanes.push(out);
            if hit {
                found = true;
                break;
            }
            if timed_out || wanted.is_empty() {
                return attempt;
            }
        }
    }
    attempt
}

/// Explores groups label by label. Within a label, groups with more string
/// matches go first, then earlier data use; once a group yields a witness
/// the label's remaining groups are skipped.
pub fn run_dse(run: &DseRun, wanted: &BTreeSet<u32>, cfg: &DseConfig) -> DseReport {
    let mut report = DseReport::default();
    let mut wanted = wanted.clone();
    if wanted.is_empty() {
        return report;
    }
    let ix = TraceIndex::new(run.trace);
    let mut by_label: BTreeMap<Label, Vec<&ReadGroup>> = BTreeMap::new();
    for g in run.groups {
        by_label.entry(g.label).or_default().push(g);
    }
    for (_, mut groups) in by_label {
        groups.sort_by_key(|g| (std::cmp::Reverse(g.matches.len()), g.interval.0, g.index));
        for g in groups {
            if wanted.is_empty() {
                break;
            }
            let attempt = attempt_group(run, &ix, g, &mut wanted, cfg, &mut report.diagnostics);
            let hit = attempt.lanes.iter().any(|l| !l.witnesses.is_empty());
            report.witnesses.extend(attempt.lanes.iter().flat_map(|l| l.witnesses.iter().cloned()));
            report.attempts.push(attempt);
            if hit {
                break;
            }
        }
    }
    report
}
