//! Coverage-guided fuzzing of MiniMCU firmware with stateful MMIO models.
//!
//! The fuzzer resolves every MMIO read through stateless baseline models
//! declared per target. When coverage stagnates, a model-generation pipeline
//! replays a test case under taint tracking, groups MMIO reads into data
//! chunks, runs trace-guided symbolic execution to find chunk contents that
//! reach uncovered blocks, and deploys the results as stateful models the
//! fuzzer selects from with input bytes.

pub mod cluster;
pub mod corpus;
pub mod dse;
pub mod fuzz;
pub mod isa;
pub mod modelgen;
pub mod orchestrator;
pub mod taint;
pub mod vm;
