//! One model-generation run: trace, group, explore, build entries.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::cluster::{cluster_trace, identify_strings, label_of, ReadGroup};
use crate::corpus::Target;
use crate::dse::{run_dse, DseConfig, DseReport, DseRun, Witness};
use crate::modelgen::{build_entry, Label, ModelEntry, ModelStore, PriorRead, Provenance};
use crate::taint::{record_trace, DetailedTrace, MmioSource};

/// Inputs of a run; everything is owned so the run can move to a thread.
#[derive(Clone)]
pub struct PipelineJob {
    pub run: u64,
    pub target: Arc<Target>,
    pub models: Arc<ModelStore>,
    pub testcase: u64,
    pub input: Vec<u8>,
    pub p_skip: f64,
    pub wanted: BTreeSet<u32>,
    pub dse: DseConfig,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub run: u64,
    pub testcase: u64,
    pub groups: usize,
    pub skipped_groups: usize,
    pub report: DseReport,
    pub entries: Vec<(Label, ModelEntry)>,
    pub errors: Vec<String>,
}

impl PipelineOutput {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "run {}\ntestcase {}\ngroups {}\nskipped groups {}\nentries {}\n",
            self.run,
            self.testcase,
            self.groups,
            self.skipped_groups,
            self.entries.len()
        );
        for e in &self.errors {
            s.push_str(&format!("error {e}\n"));
        }
        s.push_str(&self.report.to_text());
        s
    }
}

/// Highest group index with a deployed entry, per label.
pub fn covered_groups(models: &ModelStore) -> BTreeMap<Label, usize> {
    let mut out: BTreeMap<Label, usize> = BTreeMap::new();
    for r in &models.manifest {
        let e = out.entry(r.label).or_default();
        *e = (*e).max(r.provenance.group_index);
    }
    out
}

/// Recorded reads of the witness label before its group, followed by the
/// witness values.
pub fn entry_for_witness(
    trace: &DetailedTrace,
    groups: &[ReadGroup],
    w: &Witness,
    run: u64,
    witness_id: u64,
) -> Result<ModelEntry, String> {
    let group = groups
        .iter()
        .find(|g| g.label == w.label && g.index == w.group_index)
        .ok_or_else(|| format!("witness group {} #{} not found", w.label, w.group_index))?;
    let size_of: BTreeMap<MmioSource, usize> =
        groups.iter().flat_map(|g| g.reads.iter().map(move |r| (r.source, g.reads.len()))).collect();
    let first = group.first_read().time;
    let prior: Vec<PriorRead> = trace
        .mmio()
        .filter(|m| m.time < first && label_of(&m.source()) == w.label)
        .map(|m| PriorRead { value: m.value, singleton: size_of.get(&m.source()).is_none_or(|&n| n == 1) })
        .collect();
    build_entry(w.label, w.label, &prior, &w.values, Provenance { run, witness: witness_id, group_index: w.group_index })
        .map_err(|e| e.to_string())
}

/// Runs the whole pipeline on one test case. Groups already covered by
/// deployed entries are skipped.
pub fn run_pipeline(job: &PipelineJob) -> PipelineOutput {
    let trace = record_trace(&job.target, &job.models, &job.input, job.p_skip);
    let strings = identify_strings(job.target.image());
    let all = cluster_trace(&trace, &strings);
    let covered = covered_groups(&job.models);
    let groups: Vec<ReadGroup> =
        all.iter().filter(|g| g.index > covered.get(&g.label).copied().unwrap_or(0)).cloned().collect();
    let run = DseRun {
        target: &job.target,
        models: &job.models,
        input: &job.input,
        p_skip: job.p_skip,
        trace: &trace,
        groups: &groups,
    };
    let report = run_dse(&run, &job.wanted, &job.dse);
    let mut entries = Vec::new();
    let mut errors = Vec::new();
    for (i, w) in report.witnesses.iter().enumerate() {
        match entry_for_witness(&trace, &all, w, job.run, i as u64) {
            Ok(e) => entries.push((w.label, e)),
            Err(e) => errors.push(e),
        }
    }
    PipelineOutput {
        run: job.run,
        testcase: job.testcase,
        groups: all.len(),
        skipped_groups: all.len() - groups.len(),
        report,
        entries,
        errors,
    }
}
