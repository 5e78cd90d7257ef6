//! Trace-guided symbolic execution of data chunks.
//!
//! Exploration starts from a concrete snapshot taken when the firmware first
//! reads a group's data. Reads of the group become fresh symbolic bytes;
//! every other read returns the value recorded at the matching position of
//! the trace. States are prioritized by the number of symbols in their path
//! constraint, then by CFG distance to an uncovered block, then by age.
//! Reaching an uncovered block yields a witness, which is checked by
//! replaying it on the concrete machine.

pub mod explore;
pub mod expr;
pub mod plan;
pub mod solver;
pub mod state;

pub use explore::{explore, replay_witness, wanted_distances, DseConfig, LaneOutcome, LaneSpec, Termination, Witness};
pub use expr::{Constraint, Sym, SymExpr, Val};
pub use plan::{run_dse, DseReport, DseRun, GroupAttempt};
pub use solver::{solve, Model, SolveResult};
pub use state::{End, ExecCtx, Prune, ReadPlan, SymState, TraceIndex};
