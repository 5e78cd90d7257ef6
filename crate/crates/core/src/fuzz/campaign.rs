//! Coverage-guided campaign with a FIFO queue.
//!
//! Inputs that reach a new block or a new verdict are kept. Entries that
//! found new blocks are favored and receive three times the base energy.
//! All randomness comes from one seeded generator, so a campaign bounded by
//! executions is reproducible byte for byte.
//!
//! Run directory layout:
//!
//! ```text
//! queue/<id>.bin        kept inputs
//! coverage/<id>.bbs     blocks covered by each kept input, one 0x%08x per line
//! coverage/global.bbs   union over the campaign
//! log.csv               timestamp,execs,bb_count,models_deployed
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::exec::{ExecResult, Executor, Verdict};
use super::mutate::havoc;
use crate::corpus::Target;
use crate::modelgen::{ModelStore, DEFAULT_P_SKIP};

pub const MAX_INPUT: usize = 1024;
pub const BASE_ENERGY: u32 = 16;
pub const FAVORED_FACTOR: u32 = 3;
/// Executions between periodic log rows.
pub const LOG_INTERVAL: u64 = 10_000;
pub const LOG_HEADER: &str = "timestamp,execs,bb_count,models_deployed";

#[derive(Debug, Clone)]
pub struct CampaignConfig {
    pub seed: u64,
    pub p_skip: f64,
    pub max_input: usize,
    /// Use the execution count as the log timestamp instead of wall-clock
    /// milliseconds, making the log reproducible.
    pub exec_clock: bool,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig { seed: 0, p_skip: DEFAULT_P_SKIP, max_input: MAX_INPUT, exec_clock: false }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestCase {
    pub id: u64,
    pub input: Vec<u8>,
    pub bbs: Vec<u32>,
    pub verdict: Verdict,
    pub favored: bool,
    /// Execution count when the input was found.
    pub found_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LogRow {
    pub timestamp: u64,
    pub execs: u64,
    pub bb_count: usize,
    pub models_deployed: usize,
}

impl LogRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{}", self.timestamp, self.execs, self.bb_count, self.models_deployed)
    }
}

/// Outcome of one fuzzing step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepOutcome {
    pub new_bbs: usize,
    pub kept: Option<u64>,
}

pub struct Campaign {
    pub config: CampaignConfig,
    executor: Executor,
    pub queue: Vec<TestCase>,
    pub global: BTreeSet<u32>,
    verdicts: BTreeSet<Verdict>,
    rng: ChaCha8Rng,
    pub execs: u64,
    /// Execution count of the last new block.
    pub last_new_bb: u64,
    pub log: Vec<LogRow>,
    pending_seeds: Vec<Vec<u8>>,
    cursor: usize,
    energy: u32,
    start: Instant,
    out: Option<PathBuf>,
}

pub fn bbs_text<'a>(bbs: impl IntoIterator<Item = &'a u32>) -> String {
    bbs.into_iter().map(|b| format!("{b:#010x}\n")).collect()
}

pub fn parse_bbs(text: &str) -> Option<BTreeSet<u32>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| u32::from_str_radix(l.strip_prefix("0x").unwrap_or(l), 16).ok())
        .collect()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)
}

impl Campaign {
    pub fn new(target: Arc<Target>, models: Arc<ModelStore>, config: CampaignConfig) -> Campaign {
        let executor = Executor::new(target, models, config.p_skip);
        Campaign {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            executor,
            queue: Vec::new(),
            global: BTreeSet::new(),
            verdicts: BTreeSet::new(),
            execs: 0,
            last_new_bb: 0,
            log: Vec::new(),
            pending_seeds: vec![Vec::new()],
            cursor: 0,
            energy: 0,
            start: Instant::now(),
            out: None,
        }
    }

    /// Writes kept inputs, coverage and the log under `dir` as they change.
    pub fn with_output(mut self, dir: &Path) -> io::Result<Campaign> {
        fs::create_dir_all(dir.join("queue"))?;
        fs::create_dir_all(dir.join("coverage"))?;
        fs::write(dir.join("log.csv"), format!("{LOG_HEADER}\n"))?;
        write_atomic(&dir.join("coverage/global.bbs"), b"")?;
        self.out = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn add_seed(&mut self, input: Vec<u8>) {
        self.pending_seeds.push(input);
    }

    pub fn target(&self) -> &Arc<Target> {
        &self.executor.target
    }

    pub fn models(&self) -> &Arc<ModelStore> {
        &self.executor.models
    }

    /// Swaps the deployed models and logs the change.
    pub fn set_models(&mut self, models: Arc<ModelStore>) -> io::Result<()> {
        self.executor.models = models;
        self.record()
    }

    /// Log clock: executions or wall-clock milliseconds.
    pub fn timestamp(&self) -> u64 {
        if self.config.exec_clock {
            self.execs
        } else {
            self.start.elapsed().as_millis() as u64
        }
    }

    /// Appends a log row for the current state.
    pub fn record(&mut self) -> io::Result<()> {
        let row = LogRow {
            timestamp: self.timestamp(),
            execs: self.execs,
            bb_count: self.global.len(),
            models_deployed: self.executor.models.entry_total(),
        };
        if self.log.last().is_some_and(|r| (r.execs, r.bb_count, r.models_deployed) == (row.execs, row.bb_count, row.models_deployed)) {
            return Ok(());
        }
        self.log.push(row);
        if let Some(dir) = &self.out {
            let mut f = fs::OpenOptions::new().append(true).create(true).open(dir.join("log.csv"))?;
            writeln!(f, "{}", row.csv())?;
        }
        Ok(())
    }

    pub fn log_csv(&self) -> String {
        let mut s = format!("{LOG_HEADER}\n");
        for r in &self.log {
            s.push_str(&r.csv());
            s.push('\n');
        }
        s
    }

    fn next_input(&mut self) -> Vec<u8> {
        if let Some(s) = self.pending_seeds.pop() {
            return s;
        }
        if self.energy == 0 {
            self.cursor = (self.cursor + 1) % self.queue.len();
            let e = &self.queue[self.cursor];
            self.energy = BASE_ENERGY * if e.favored { FAVORED_FACTOR } else { 1 };
        }
        self.energy -= 1;
        let other = self.rng.random_range(0..self.queue.len());
        let parent = &self.queue[self.cursor].input;
        havoc(parent, &self.queue[other].input, self.config.max_input, &mut self.rng)
    }

    /// Executes one input and keeps it if interesting.
    pub fn step(&mut self) -> io::Result<StepOutcome> {
        let input = self.next_input();
        let result = self.executor.run(&input);
        self.execs += 1;
        let outcome = self.absorb(input, result)?;
        if self.execs.is_multiple_of(LOG_INTERVAL) {
            self.record()?;
        }
        Ok(outcome)
    }

    /// Runs `n` steps.
    pub fn run_execs(&mut self, n: u64) -> io::Result<()> {
        for _ in 0..n {
            self.step()?;
        }
        Ok(())
    }

    fn absorb(&mut self, input: Vec<u8>, result: ExecResult) -> io::Result<StepOutcome> {
        let new: Vec<u32> = result.bbs.iter().copied().filter(|b| !self.global.contains(b)).collect();
        let new_verdict = self.verdicts.insert(result.verdict);
        if new.is_empty() && !new_verdict {
            return Ok(StepOutcome { new_bbs: 0, kept: None });
        }
        let id = self.queue.len() as u64;
        self.global.extend(new.iter().copied());
        let tc = TestCase {
            id,
            input,
            bbs: result.bbs,
            verdict: result.verdict,
            favored: !new.is_empty(),
            found_at: self.execs,
        };
        if let Some(dir) = &self.out {
            fs::write(dir.join(format!("queue/{id:06}.bin")), &tc.input)?;
            write_atomic(&dir.join(format!("coverage/{id:06}.bbs")), bbs_text(&tc.bbs).as_bytes())?;
            if !new.is_empty() {
                write_atomic(&dir.join("coverage/global.bbs"), bbs_text(&self.global).as_bytes())?;
            }
        }
        self.queue.push(tc);
        if !new.is_empty() {
            self.last_new_bb = self.execs;
            self.record()?;
        }
        Ok(StepOutcome { new_bbs: new.len(), kept: Some(id) })
    }

    /// Executes an input outside the queue without touching campaign state.
    pub fn probe(&mut self, input: &[u8]) -> ExecResult {
        self.executor.run(input)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_target;

    fn campaign(name: &str, seed: u64) -> Campaign {
        let t = Arc::new(build_target(name).unwrap());
        Campaign::new(t, Arc::new(ModelStore::default()), CampaignConfig { seed, exec_clock: true, ..Default::default() })
    }

    #[test]
    fn same_seed_same_log() {
        let mut a = campaign("toy3", 7);
        let mut b = campaign("toy3", 7);
        a.run_execs(3000).unwrap();
        b.run_execs(3000).unwrap();
        a.record().unwrap();
        b.record().unwrap();
        assert_eq!(a.log_csv(), b.log_csv());
        assert_eq!(a.global, b.global);
        assert_eq!(a.queue, b.queue);
    }

    #[test]
    fn queue_entries_replay_their_coverage() {
        let mut c = campaign("toy3", 3);
        c.run_execs(2000).unwrap();
        assert!(c.queue.len() > 1);
        for tc in c.queue.clone() {
            assert_eq!(c.probe(&tc.input).bbs, tc.bbs);
        }
        let union: BTreeSet<u32> = c.queue.iter().flat_map(|t| t.bbs.iter().copied()).collect();
        assert_eq!(union, c.global);
    }

    #[test]
    fn finds_easy_toy3_leaves() {
        let mut c = campaign("toy3", 1);
        c.run_execs(20_000).unwrap();
        let leaf = c.target().image().symbol("leaf_x").unwrap();
        assert!(c.global.contains(&leaf));
    }

    #[test]
    fn run_dir_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = campaign("doorlock", 5).with_output(dir.path()).unwrap();
        c.run_execs(500).unwrap();
        c.record().unwrap();
        let global = parse_bbs(&fs::read_to_string(dir.path().join("coverage/global.bbs")).unwrap()).unwrap();
        assert_eq!(global, c.global);
        assert_eq!(fs::read_to_string(dir.path().join("log.csv")).unwrap(), c.log_csv());
        for tc in &c.queue {
            assert_eq!(fs::read(dir.path().join(format!("queue/{:06}.bin", tc.id))).unwrap(), tc.input);
        }
    }
}
