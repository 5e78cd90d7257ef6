//! Coverage-guided fuzzing over the MiniMCU VM.

pub mod campaign;
pub mod exec;
pub mod harness;
pub mod model;
pub mod mutate;

pub use campaign::{bbs_text, parse_bbs, Campaign, CampaignConfig, LogRow, StepOutcome, TestCase};
pub use exec::{execute, ExecResult, Executor, Verdict};
pub use harness::{Resolution, Resolver};
pub use model::BaselineModel;
