//! Prioritized exploration of symbolic states towards wanted blocks.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, VecDeque};
use std::sync::Arc;
use std::time::{Duration, Instant};

use super::solver::{solve, SolveResult};
use super::state::{End, ExecCtx, Prune, ReadRole, Step, SymRead, SymState};
use crate::isa::{EdgeKind, StaticCfg};
use crate::modelgen::Label;
use crate::vm::{Hooks, Machine, MachineState};

pub const DEFAULT_STATE_CAP: usize = 20_000;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);
pub const DEFAULT_SYMBOL_BUDGET: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct DseConfig {
    /// Trace-guided reads, prioritization, pruning and pre-constraining.
    /// Without them every MMIO read is symbolic and states run in FIFO order.
    pub heuristics: bool,
    pub state_cap: usize,
    pub timeout: Duration,
    pub symbol_budget: usize,
    /// Stop after as many unproductive dequeues as the first hit took.
    pub idle_stop: bool,
    pub eval_budget: u64,
}

impl DseConfig {
    /// Exploration without trace guidance, prioritization or pruning.
    pub fn vanilla() -> DseConfig {
        DseConfig { heuristics: false, symbol_budget: super::expr::MAX_SYMBOLS, ..DseConfig::default() }
    }
}

impl Default for DseConfig {
    fn default() -> Self {
        DseConfig {
            heuristics: true,
            state_cap: DEFAULT_STATE_CAP,
            timeout: DEFAULT_TIMEOUT,
            symbol_budget: DEFAULT_SYMBOL_BUDGET,
            idle_stop: true,
            eval_budget: super::solver::DEFAULT_EVAL_BUDGET,
        }
    }
}

/// Input values that drive execution to an uncovered block.
#[derive(Debug, Clone)]
pub struct Witness {
    pub label: Label,
    pub group_index: usize,
    pub lane: String,
    pub reached_bb: u32,
    /// Values of the group's reads in order; `None` is unconstrained.
    pub values: Vec<Option<u32>>,
    /// Concrete state the exploration started from.
    pub start: Arc<MachineState>,
    /// Every MMIO read from `start` on: `(addr, pc, value)`.
    pub reads: Vec<(u32, u32, u32)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Termination {
    Exhausted,
    FirstWitness,
    IdleLimit,
    StateCap,
    Timeout,
}

impl Termination {
    pub fn name(self) -> &'static str {
        match self {
            Termination::Exhausted => "exhausted",
            Termination::FirstWitness => "first-witness",
            Termination::IdleLimit => "idle-limit",
            Termination::StateCap => "state-cap",
            Termination::Timeout => "timeout",
        }
    }
}

#[derive(Debug, Clone)]
pub struct LaneOutcome {
    pub name: String,
    pub dequeued: usize,
    pub ends: BTreeMap<&'static str, usize>,
    pub witnesses: Vec<Witness>,
    pub rejected: usize,
    pub termination: Termination,
}

/// Shortest distance from each block to a wanted block, moving only within
/// the block's function and its transitive callees.
pub fn wanted_distances(cfg: &StaticCfg, wanted: &BTreeSet<u32>) -> HashMap<u32, u32> {
    let mut out = HashMap::new();
    for &f in &cfg.functions {
        let scope_funcs = cfg.transitive_callees(f);
        let in_scope = |b: &u32| cfg.func_of.get(b).is_some_and(|g| scope_funcs.contains(g));
        let mut rev: HashMap<u32, Vec<u32>> = HashMap::new();
        for (&from, succ) in &cfg.edges {
            if !in_scope(&from) {
                continue;
            }
            for &(to, kind) in succ {
                if kind != EdgeKind::Return && in_scope(&to) {
                    rev.entry(to).or_default().push(from);
                }
            }
        }
        let mut dist: HashMap<u32, u32> = HashMap::new();
        let mut queue: VecDeque<u32> = VecDeque::new();
        for w in wanted.iter().filter(|w| in_scope(w)) {
            dist.insert(*w, 0);
            queue.push_back(*w);
        }
        while let Some(b) = queue.pop_front() {
            let d = dist[&b];
            for &p in rev.get(&b).into_iter().flatten() {
                if let std::collections::hash_map::Entry::Vacant(e) = dist.entry(p) {
                    e.insert(d + 1);
                    queue.push_back(p);
                }
            }
        }
        for (b, d) in dist {
            if cfg.func_of.get(&b) == Some(&f) {
                out.insert(b, d);
            }
        }
    }
    out
}

struct Queued {
    key: (u32, u32, u64),
    state: Box<SymState>,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.key == other.key
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key.cmp(&other.key)
    }
}

/// Lane identity and the reads recorded before its start state.
pub struct LaneSpec {
    pub name: String,
    pub label: Label,
    pub group_index: usize,
    /// Group reads materialized before the start state.
    pub prefix: Vec<SymRead>,
    pub stop_on_first: bool,
}

fn group_values(spec: &LaneSpec, st: &SymState) -> Vec<Option<u32>> {
    let mut out = Vec::new();
    let own = |r: &&SymRead| r.addr == spec.label.reg && r.isr == spec.label.isr;
    for r in spec.prefix.iter().chain(&st.reads).filter(|r| r.group_pos.is_some() || (r.role == ReadRole::Symbolic && own(r))) {
        out.push(match r.role {
            ReadRole::Symbolic if r.value.vars() & st.cvars == 0 => None,
            _ => Some(r.value.eval(&st.model)),
        });
    }
    out
}

/// Explores from `start` until the wanted set is empty or a budget ends.
/// Witnessed blocks are removed from `wanted`.
pub fn explore(
    cx: &ExecCtx,
    spec: &LaneSpec,
    start: SymState,
    wanted: &mut BTreeSet<u32>,
    cfg: &DseConfig,
    deadline: Instant,
) -> LaneOutcome {
    let mut out = LaneOutcome {
        name: spec.name.clone(),
        dequeued: 0,
        ends: BTreeMap::new(),
        witnesses: Vec::new(),
        rejected: 0,
        termination: Termination::Exhausted,
    };
    if wanted.is_empty() {
        return out;
    }
    let origin = start.clone();
    let mut dist = wanted_distances(&cx.program.cfg, wanted);
    let priority = |s: &SymState, dist: &HashMap<u32, u32>| -> (u32, u32, u64) {
        if !cfg.heuristics {
            return (0, 0, s.seq);
        }
        let d = cx.program.cfg.block_containing(s.pc).and_then(|b| dist.get(&b).copied()).unwrap_or(u32::MAX);
        (s.sym_count(), d, s.seq)
    };
    let mut seq = 0u64;
    let mut heap: BinaryHeap<Reverse<Queued>> = BinaryHeap::new();
    let mut s0 = start;
    s0.seq = seq;
    heap.push(Reverse(Queued { key: priority(&s0, &dist), state: Box::new(s0) }));
    let mut first_hit: Option<usize> = None;
    let mut idle = 0usize;

    while let Some(Reverse(Queued { mut state, .. })) = heap.pop() {
        if out.dequeued >= cfg.state_cap {
            out.termination = Termination::StateCap;
            return out;
        }
        if Instant::now() >= deadline {
            out.termination = Termination::Timeout;
            return out;
        }
        out.dequeued += 1;
        let mut productive = false;
        loop {
            let mut entered = None;
            let step = state.step(cx, &mut entered);
            if let Some(bb) = entered {
                if wanted.contains(&bb) {
                    let start_model = state.model;
                    let w = Witness {
                        label: spec.label,
                        group_index: spec.group_index,
                        lane: spec.name.clone(),
                        reached_bb: bb,
                        values: group_values(spec, &state),
                        start: Arc::new(origin.concretize(&start_model)),
                        reads: state.reads.iter().map(|r| (r.addr, r.pc, r.value.eval(&state.model))).collect(),
                    };
                    if replay_witness(cx, &w) {
                        wanted.remove(&bb);
                        out.witnesses.push(w);
                        productive = true;
                        dist = wanted_distances(&cx.program.cfg, wanted);
                        if spec.stop_on_first {
                            out.termination = Termination::FirstWitness;
                            return out;
                        }
                    } else {
                        out.rejected += 1;
                    }
                }
            }
            match step {
                Step::Continue => {}
                Step::End(e) => {
                    *out.ends.entry(e.name()).or_default() += 1;
                    break;
                }
                Step::Branch { constraint, taken, fallthrough } => {
                    for (c, target) in [(constraint.clone(), taken), (constraint.negated(), fallthrough)] {
                        let mut child = (*state).clone();
                        let model = if c.holds(&child.model) {
                            None
                        } else {
                            let mut all = child.constraints.clone();
                            all.push(c.clone());
                            match solve(&all, &child.model, cfg.eval_budget) {
                                SolveResult::Sat(m) => Some(m),
                                SolveResult::Unsat => {
                                    *out.ends.entry(End::Pruned(Prune::Infeasible).name()).or_default() += 1;
                                    continue;
                                }
                                SolveResult::Incomplete => {
                                    *out.ends.entry(End::Pruned(Prune::Incomplete).name()).or_default() += 1;
                                    continue;
                                }
                            }
                        };
                        child.add_constraint(c, model);
                        child.follow(target);
                        seq += 1;
                        child.seq = seq;
                        heap.push(Reverse(Queued { key: priority(&child, &dist), state: Box::new(child) }));
                    }
                    break;
                }
            }
        }
        if productive {
            first_hit.get_or_insert(out.dequeued);
            idle = 0;
        } else if let Some(p) = first_hit {
            idle += 1;
            if cfg.idle_stop && idle >= p {
                out.termination = Termination::IdleLimit;
                return out;
            }
        }
        if wanted.is_empty() {
            return out;
        }
    }
    out
}

struct ReplayHooks<'a> {
    reads: &'a [(u32, u32, u32)],
    next: usize,
    mismatch: bool,
    target: u32,
    reached: bool,
}

impl Hooks for ReplayHooks<'_> {
    fn mmio_read(&mut self, _st: &MachineState, pc: u32, addr: u32, _size: u32) -> u32 {
        match self.reads.get(self.next) {
            Some(&(a, p, v)) if a == addr && p == pc => {
                self.next += 1;
                v
            }
            _ => {
                self.mismatch = true;
                0
            }
        }
    }

    fn bb_enter(&mut self, st: &MachineState) {
        if st.pc == self.target && self.next == self.reads.len() {
            self.reached = true;
        }
    }
}

/// Runs the concrete machine from the witness start with its read values
/// and checks that it enters the reached block.
pub fn replay_witness(cx: &ExecCtx, w: &Witness) -> bool {
    let mut m = Machine { program: Arc::clone(&cx.target.program), state: (*w.start).clone(), config: cx.vm };
    let mut hooks = ReplayHooks { reads: &w.reads, next: 0, mismatch: false, target: w.reached_bb, reached: false };
    while !hooks.reached && !hooks.mismatch {
        if m.step(&mut hooks).is_some() {
            break;
        }
    }
    hooks.reached && !hooks.mismatch
}
