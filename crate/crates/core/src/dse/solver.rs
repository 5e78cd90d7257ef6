//! Finite-domain solver over symbolic input bytes.
//!
//! Every symbol ranges over 0..=255. Equalities are split into byte lanes,
//! single-symbol constraints filter domains up front, and a depth-first
//! search with forward checking assigns the remaining symbols. Expressions
//! are evaluated concretely, so any form is supported; a search that exceeds
//! its evaluation budget ends `Incomplete`.

use super::expr::{Constraint, Val, MAX_SYMBOLS};
use crate::isa::Cond;

pub const DEFAULT_EVAL_BUDGET: u64 = 4_000_000;

pub type Model = [u8; MAX_SYMBOLS];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SolveResult {
    Sat(Model),
    Unsat,
    Incomplete,
}

#[derive(Clone, Copy, PartialEq, Eq)]
struct Domain([u64; 4]);

impl Domain {
    const FULL: Domain = Domain([u64::MAX; 4]);

    fn contains(&self, v: u8) -> bool {
        self.0[(v >> 6) as usize] >> (v & 63) & 1 == 1
    }

    fn len(&self) -> u32 {
        self.0.iter().map(|w| w.count_ones()).sum()
    }

    fn values(&self) -> impl Iterator<Item = u8> + '_ {
        (0..=255u8).filter(|&v| self.contains(v))
    }

    fn only(v: u8) -> Domain {
        let mut d = Domain([0; 4]);
        d.0[(v >> 6) as usize] = 1 << (v & 63);
        d
    }

    fn insert(&mut self, v: u8) {
        self.0[(v >> 6) as usize] |= 1 << (v & 63);
    }
}

/// Splits equalities into byte lanes; each lane is an 8-bit comparison.
fn normalize(constraints: &[Constraint]) -> Option<Vec<Constraint>> {
    let mut out = Vec::new();
    for c in constraints {
        if c.vars() == 0 {
            if !c.holds(&[0; MAX_SYMBOLS]) {
                return None;
            }
            continue;
        }
        if c.cond == Cond::Eq {
            for i in 0..4 {
                let a = Val::sym(super::expr::zext(c.a.byte(i), 32));
                let b = Val::sym(super::expr::zext(c.b.byte(i), 32));
                let lane = Constraint { cond: Cond::Eq, a, b };
                if lane.vars() == 0 {
                    if !lane.holds(&[0; MAX_SYMBOLS]) {
                        return None;
                    }
                } else {
                    out.push(lane);
                }
            }
        } else {
            out.push(c.clone());
        }
    }
    Some(out)
}

struct Search<'a> {
    cs: &'a [Constraint],
    vars: Vec<u128>,
    by_var: Vec<Vec<usize>>,
    model: Model,
    hint: &'a Model,
    evals: u64,
    budget: u64,
}

enum Step {
    Found,
    Fail,
    Budget,
}

impl Search<'_> {
    /// Filters `dom[u]` by constraint `ci`, where `u` is its last free symbol.
    fn filter(&mut self, ci: usize, u: usize, dom: &mut [Domain]) -> bool {
        let mut keep = Domain([0; 4]);
        let saved = self.model[u];
        for v in dom[u].values() {
            self.model[u] = v;
            self.evals += 1;
            if self.cs[ci].holds(&self.model) {
                keep.insert(v);
            }
        }
        self.model[u] = saved;
        dom[u] = keep;
        keep.len() > 0
    }

    fn dfs(&mut self, assigned: u128, all: u128, dom: &mut [Domain]) -> Step {
        if self.evals > self.budget {
            return Step::Budget;
        }
        let free = all & !assigned;
        if free == 0 {
            return Step::Found;
        }
        // Smallest domain first.
        let mut best = usize::MAX;
        let mut best_len = u32::MAX;
        let mut f = free;
        while f != 0 {
            let k = f.trailing_zeros() as usize;
            f &= f - 1;
            let l = dom[k].len();
            if l < best_len {
                best = k;
                best_len = l;
            }
        }
        let hint = self.hint[best];
        let order: Vec<u8> = std::iter::once(hint)
            .filter(|&h| dom[best].contains(h))
            .chain(dom[best].values().filter(|&v| v != hint))
            .collect();
        let now = assigned | 1 << best;
        for v in order {
            self.model[best] = v;
            let mut next = dom.to_vec();
            next[best] = Domain::only(v);
            let mut ok = true;
            for k in 0..self.by_var[best].len() {
                let ci = self.by_var[best][k];
                let rest = self.vars[ci] & !now;
                if rest == 0 {
                    self.evals += 1;
                    if !self.cs[ci].holds(&self.model) {
                        ok = false;
                        break;
                    }
                } else if rest.count_ones() == 1 {
                    let u = rest.trailing_zeros() as usize;
                    if !self.filter(ci, u, &mut next) {
                        ok = false;
                        break;
                    }
                }
            }
            if ok {
                match self.dfs(now, all, &mut next) {
                    Step::Fail => {}
                    s => return s,
                }
            }
            if self.evals > self.budget {
                return Step::Budget;
            }
        }
        Step::Fail
    }
}

/// Finds an assignment satisfying every constraint. Symbols not mentioned
/// keep their `hint` value.
pub fn solve(constraints: &[Constraint], hint: &Model, budget: u64) -> SolveResult {
    if constraints.iter().all(|c| c.holds(hint)) {
        return SolveResult::Sat(*hint);
    }
    let Some(cs) = normalize(constraints) else {
        return SolveResult::Unsat;
    };
    let vars: Vec<u128> = cs.iter().map(Constraint::vars).collect();
    let all = vars.iter().fold(0, |a, v| a | v);
    let mut by_var = vec![Vec::new(); MAX_SYMBOLS];
    for (i, v) in vars.iter().enumerate() {
        let mut f = *v;
        while f != 0 {
            by_var[f.trailing_zeros() as usize].push(i);
            f &= f - 1;
        }
    }
    let mut s = Search { cs: &cs, vars, by_var, model: *hint, hint, evals: 0, budget };
    let mut dom = vec![Domain::FULL; MAX_SYMBOLS];
    for ci in 0..cs.len() {
        if s.vars[ci].count_ones() == 1 {
            let u = s.vars[ci].trailing_zeros() as usize;
            if !s.filter(ci, u, &mut dom) {
                return SolveResult::Unsat;
            }
        }
    }
    match s.dfs(0, all, &mut dom) {
        Step::Found => SolveResult::Sat(s.model),
        Step::Fail => SolveResult::Unsat,
        Step::Budget => SolveResult::Incomplete,
    }
}
