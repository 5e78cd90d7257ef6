//! Closed loop of fuzzing and model generation.
//!
//! The campaign runs in slices of executions. Between slices the loop checks
//! for stagnation: no new block and no new model within the window. On
//! stagnation it picks the queue entry covering the most blocks not covered
//! by entries used before and runs the pipeline on it, either inline or on a
//! worker thread while fuzzing continues. New entries are deployed between
//! executions.
//!
//! Extra files in the run directory:
//!
//! ```text
//! models/<label>.model, models/manifest.csv
//! esfuzz/run-<n>.txt    pipeline report per run
//! ```

mod pipeline;
pub mod report;

pub use pipeline::{covered_groups, entry_for_witness, run_pipeline, PipelineJob, PipelineOutput};

use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::dse::DseConfig;
use crate::fuzz::{Campaign, TestCase};

pub const DEFAULT_WINDOW_EXECS: u64 = 50_000;
pub const DEFAULT_WINDOW_TIME: Duration = Duration::from_secs(30);
pub const DEFAULT_SLICE: u64 = 1_000;

/// Stagnation window; it elapses when either bound is reached.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub execs: Option<u64>,
    pub time: Option<Duration>,
}

impl Default for Window {
    fn default() -> Self {
        Window { execs: Some(DEFAULT_WINDOW_EXECS), time: Some(DEFAULT_WINDOW_TIME) }
    }
}

impl Window {
    pub fn elapsed(&self, execs_since: u64, time_since: Duration) -> bool {
        self.execs.is_some_and(|n| execs_since >= n) || self.time.is_some_and(|t| time_since >= t)
    }
}

/// True when the window has passed since the last progress and a test case
/// is available.
pub fn should_trigger(window: &Window, execs_since: u64, time_since: Duration, candidate: bool) -> bool {
    candidate && window.elapsed(execs_since, time_since)
}

/// Queue position of the entry with the most blocks outside `used_union`,
/// requiring at least one; ties go to the smallest id.
pub fn pick_testcase(queue: &[TestCase], used: &BTreeSet<u64>, used_union: &BTreeSet<u32>) -> Option<usize> {
    let mut best: Option<(usize, usize)> = None;
    for (i, tc) in queue.iter().enumerate() {
        if used.contains(&tc.id) {
            continue;
        }
        let gain = tc.bbs.iter().filter(|b| !used_union.contains(b)).count();
        let better = match best {
            None => true,
            Some((bg, bi)) => gain > bg || (gain == bg && tc.id < queue[bi].id),
        };
        if gain >= 1 && better {
            best = Some((gain, i));
        }
    }
    best.map(|(_, i)| i)
}

#[derive(Debug, Clone)]
pub struct OrchestratorConfig {
    pub window: Window,
    pub dse: DseConfig,
    /// Run the pipeline on a worker thread while fuzzing continues.
    pub concurrent: bool,
    /// Executions between stagnation checks.
    pub slice: u64,
    /// Disable model generation entirely.
    pub enabled: bool,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        OrchestratorConfig {
            window: Window::default(),
            dse: DseConfig::default(),
            concurrent: false,
            slice: DEFAULT_SLICE,
            enabled: true,
        }
    }
}

/// Summary of one finished pipeline run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunRecord {
    pub run: u64,
    pub testcase: u64,
    pub started_at: u64,
    pub finished_at: u64,
    pub witnesses: usize,
    pub deployed: usize,
}

struct Pending {
    started_at: u64,
    handle: JoinHandle<PipelineOutput>,
}

pub struct Orchestrator {
    pub campaign: Campaign,
    pub config: OrchestratorConfig,
    pub used: BTreeSet<u64>,
    pub used_union: BTreeSet<u32>,
    pub runs: Vec<RunRecord>,
    pub outputs: Vec<PipelineOutput>,
    last_deploy: u64,
    last_progress: Instant,
    seen_bbs: usize,
    pending: Option<Pending>,
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Budget {
    pub execs: Option<u64>,
    pub time: Option<Duration>,
}

impl Orchestrator {
    pub fn new(campaign: Campaign, config: OrchestratorConfig) -> Orchestrator {
        Orchestrator {
            campaign,
            config,
            used: BTreeSet::new(),
            used_union: BTreeSet::new(),
            runs: Vec::new(),
            outputs: Vec::new(),
            last_deploy: 0,
            last_progress: Instant::now(),
            seen_bbs: 0,
            pending: None,
            out: None,
        }
    }

    /// Writes models and run reports under `dir` (the campaign's run dir).
    pub fn with_output(mut self, dir: &Path) -> io::Result<Orchestrator> {
        fs::create_dir_all(dir.join("esfuzz"))?;
        self.campaign.models().write_dir(&dir.join("models"))?;
        self.out = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn running(&self) -> bool {
        self.pending.is_some()
    }

    fn execs_since_progress(&self) -> u64 {
        self.campaign.execs - self.campaign.last_new_bb.max(self.last_deploy)
    }

    fn candidate(&self) -> Option<usize> {
        pick_testcase(&self.campaign.queue, &self.used, &self.used_union)
    }

    pub fn should_trigger(&self) -> bool {
        self.config.enabled
            && self.pending.is_none()
            && self.campaign.global.len() < self.campaign.target().program.cfg.blocks.len()
            && should_trigger(
                &self.config.window,
                self.execs_since_progress(),
                self.last_progress.elapsed(),
                self.candidate().is_some(),
            )
    }

    /// Marks the best candidate used and returns its job.
    fn next_job(&mut self) -> Option<PipelineJob> {
        let i = self.candidate()?;
        let tc = &self.campaign.queue[i];
        self.used.insert(tc.id);
        self.used_union.extend(tc.bbs.iter().copied());
        let target = std::sync::Arc::clone(self.campaign.target());
        let wanted = target.program.cfg.blocks.difference(&self.campaign.global).copied().collect();
        Some(PipelineJob {
            run: self.runs.len() as u64 + 1,
            target,
            models: std::sync::Arc::clone(self.campaign.models()),
            testcase: tc.id,
            input: tc.input.clone(),
            p_skip: self.campaign.config.p_skip,
            wanted,
            dse: self.config.dse.clone(),
        })
    }

    /// Runs the pipeline once on the best candidate, blocking. Returns the
    /// number of new entries, or `None` without a candidate.
    pub fn run_once(&mut self) -> io::Result<Option<usize>> {
        let Some(job) = self.next_job() else { return Ok(None) };
        let started = self.campaign.execs;
        let out = run_pipeline(&job);
        self.finish(started, out).map(Some)
    }

    fn start(&mut self) -> io::Result<()> {
        if !self.config.concurrent {
            return self.run_once().map(|_| ());
        }
        if let Some(job) = self.next_job() {
            let handle = std::thread::spawn(move || run_pipeline(&job));
            self.pending = Some(Pending { started_at: self.campaign.execs, handle });
        }
        Ok(())
    }

    fn finish(&mut self, started_at: u64, out: PipelineOutput) -> io::Result<usize> {
        let mut store = (**self.campaign.models()).clone();
        let added = store.deploy(out.entries.clone(), self.campaign.timestamp());
        if !added.is_empty() {
            if let Some(dir) = &self.out {
                store.write_dir(&dir.join("models"))?;
            }
            self.campaign.set_models(std::sync::Arc::new(store))?;
            self.last_deploy = self.campaign.execs;
            self.last_progress = Instant::now();
        }
        for e in &out.errors {
            log::warn!("run {}: {e}", out.run);
        }
        log::info!(
            "run {} on testcase {}: {} witnesses, {} new entries",
            out.run,
            out.testcase,
            out.report.witnesses.len(),
            added.len()
        );
        if let Some(dir) = &self.out {
            fs::write(dir.join(format!("esfuzz/run-{:03}.txt", out.run)), out.to_text())?;
        }
        self.runs.push(RunRecord {
            run: out.run,
            testcase: out.testcase,
            started_at,
            finished_at: self.campaign.execs,
            witnesses: out.report.witnesses.len(),
            deployed: added.len(),
        });
        self.outputs.push(out);
        Ok(added.len())
    }

    /// Deploys a finished background run, or waits for it when `block`.
    fn poll(&mut self, block: bool) -> io::Result<()> {
        if self.pending.as_ref().is_some_and(|p| block || p.handle.is_finished()) {
            let p = self.pending.take().unwrap();
            let out = p.handle.join().unwrap_or_else(|_| PipelineOutput {
                run: self.runs.len() as u64 + 1,
                testcase: 0,
                groups: 0,
                skipped_groups: 0,
                report: Default::default(),
                entries: Vec::new(),
                errors: vec!["pipeline panicked".to_string()],
            });
            self.finish(p.started_at, out)?;
        }
        Ok(())
    }

    /// Fuzzes until the budget runs out, running the pipeline on stagnation.
    pub fn run(&mut self, budget: Budget) -> io::Result<()> {
        let start = Instant::now();
        let first = self.campaign.execs;
        loop {
            let done_execs = self.campaign.execs - first;
            if budget.execs.is_some_and(|n| done_execs >= n) || budget.time.is_some_and(|t| start.elapsed() >= t) {
                break;
            }
            let n = budget.execs.map_or(self.config.slice, |b| self.config.slice.min(b - done_execs));
            self.campaign.run_execs(n)?;
            if self.campaign.global.len() != self.seen_bbs {
                self.seen_bbs = self.campaign.global.len();
                self.last_progress = Instant::now();
            }
            self.poll(false)?;
            if self.should_trigger() {
                self.start()?;
            }
        }
        self.poll(true)?;
        self.campaign.record()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fuzz::Verdict;

    fn tc(id: u64, bbs: &[u32]) -> TestCase {
        TestCase { id, input: Vec::new(), bbs: bbs.to_vec(), verdict: Verdict::Ok, favored: false, found_at: 0 }
    }

    #[test]
    fn trigger_window() {
        let w = Window { execs: Some(10), time: None };
        assert!(!should_trigger(&w, 1, Duration::ZERO, true));
        assert!(should_trigger(&w, 11, Duration::ZERO, true));
        assert!(!should_trigger(&w, 11, Duration::ZERO, false));
        let t = Window { execs: Some(1000), time: Some(Duration::from_secs(10)) };
        assert!(should_trigger(&t, 0, Duration::from_secs(11), true));
    }

    #[test]
    fn pick_most_new() {
        let q = vec![tc(0, &[1, 2, 3]), tc(1, &[1, 2, 3, 4, 5]), tc(2, &[9])];
        let used = BTreeSet::new();
        assert_eq!(pick_testcase(&q, &used, &BTreeSet::new()), Some(1));
        let union: BTreeSet<u32> = [1, 2, 3, 4].into();
        assert_eq!(pick_testcase(&q, &BTreeSet::from([1]), &union), Some(2));
        let union: BTreeSet<u32> = [1, 2, 3, 4, 5, 9].into();
        assert_eq!(pick_testcase(&q, &BTreeSet::from([1]), &union), None);
    }

    #[test]
    fn pick_ties_to_smallest_id() {
        let q = vec![tc(4, &[7, 8]), tc(2, &[5, 6]), tc(3, &[1])];
        assert_eq!(pick_testcase(&q, &BTreeSet::new(), &BTreeSet::new()), Some(1));
    }
}
