use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use chunkfuzz::cluster::{cluster_trace, groups_report, identify_strings};
use chunkfuzz::corpus::{list_targets, target_files, Target};
use chunkfuzz::dse::DseConfig;
use chunkfuzz::fuzz::{parse_bbs, Campaign, CampaignConfig, TestCase, Verdict};
use chunkfuzz::modelgen::{ModelStore, DEFAULT_P_SKIP};
use chunkfuzz::orchestrator::report::{compare, coverage_csv, parse_log, svg};
use chunkfuzz::orchestrator::{pick_testcase, run_pipeline, Budget, Orchestrator, OrchestratorConfig, PipelineJob, Window};
use chunkfuzz::taint::{record_trace, DetailedTrace};

#[derive(Parser)]
#[command(name = "chunkfuzz", version, about = "Firmware fuzzing with stateful MMIO models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a fuzzing campaign.
    Fuzz {
        /// Corpus name or target config file.
        target: String,
        /// Wall-clock budget in seconds.
        #[arg(long)]
        time: Option<u64>,
        /// Execution budget.
        #[arg(long)]
        execs: Option<u64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Models to start from; reloaded whenever its manifest changes.
        #[arg(long)]
        models_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Run model generation in-process on stagnation.
        #[arg(long)]
        esfuzz: bool,
        /// Stagnation window in seconds (with --esfuzz).
        #[arg(long)]
        window: Option<u64>,
        /// Per-group exploration timeout in seconds (with --esfuzz).
        #[arg(long)]
        dse_timeout: Option<u64>,
        /// Timestamp log rows with the execution count.
        #[arg(long)]
        exec_clock: bool,
        #[arg(long, default_value_t = DEFAULT_P_SKIP)]
        p_skip: f64,
    },
    /// Generate models for a campaign running in another process.
    EsfuzzRun {
        campaign_dir: PathBuf,
        /// Run the pipeline once on the best test case and exit.
        #[arg(long)]
        once: bool,
        /// Plain symbolic execution without trace guidance.
        #[arg(long)]
        no_heuristics: bool,
        /// Stagnation window in seconds.
        #[arg(long, default_value_t = 30)]
        window: u64,
        /// Per-group exploration timeout in seconds.
        #[arg(long, default_value_t = 60)]
        dse_timeout: u64,
    },
    /// Print the detailed execution trace of an input.
    Trace {
        target: String,
        input: PathBuf,
        #[arg(long)]
        models_dir: Option<PathBuf>,
    },
    /// Group the MMIO reads of a trace.
    Cluster {
        trace: PathBuf,
        /// Target whose constant strings are matched against the groups.
        #[arg(long)]
        target: Option<String>,
    },
    /// Coverage CSV of a campaign.
    Report {
        campaign_dir: PathBuf,
        /// Also write report.svg into the campaign directory.
        #[arg(long)]
        svg: bool,
        /// Second campaign to compare against.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Inspect the built-in corpus.
    Corpus {
        #[command(subcommand)]
        cmd: CorpusCmd,
    },
}

#[derive(Subcommand)]
enum CorpusCmd {
    List,
    /// Write `.mmcu` images, sources and configs.
    Build {
        /// Target names; all when empty.
        names: Vec<String>,
        #[arg(long, default_value = "corpus-out")]
        out: PathBuf,
    },
}

const TARGET_FILE: &str = "target";
const DONE_FILE: &str = "done";
const USED_FILE: &str = "esfuzz/used.txt";

fn load_target(spec: &str) -> Result<Arc<Target>> {
    Ok(Arc::new(Target::load(spec).with_context(|| format!("loading target {spec}"))?))
}

fn target_spec(spec: &str) -> String {
    match fs::canonicalize(spec) {
        Ok(p) if Path::new(spec).is_file() => p.display().to_string(),
        _ => spec.to_string(),
    }
}

fn load_models(dir: Option<&Path>) -> Result<ModelStore> {
    match dir {
        Some(d) => ModelStore::load_dir(d).with_context(|| format!("loading models from {}", d.display())),
        None => Ok(ModelStore::default()),
    }
}

#[allow(clippy::too_many_arguments)]
fn fuzz(
    target: &str,
    time: Option<u64>,
    execs: Option<u64>,
    seed: u64,
    models_dir: Option<PathBuf>,
    out: &Path,
    esfuzz: bool,
    window: Option<u64>,
    dse_timeout: Option<u64>,
    exec_clock: bool,
    p_skip: f64,
) -> Result<()> {
    if time.is_none() && execs.is_none() {
        bail!("give --time or --execs");
    }
    let t = load_target(target)?;
    let models = load_models(models_dir.as_deref())?;
    fs::create_dir_all(out)?;
    fs::write(out.join(TARGET_FILE), target_spec(target))?;
    let _ = fs::remove_file(out.join(DONE_FILE));
    let campaign = Campaign::new(Arc::clone(&t), Arc::new(models), CampaignConfig { seed, p_skip, exec_clock, ..Default::default() })
        .with_output(out)?;
    let budget = Budget { execs, time: time.map(Duration::from_secs) };
    let start = Instant::now();
    let campaign = if esfuzz {
        let mut dse = DseConfig::default();
        if let Some(s) = dse_timeout {
            dse.timeout = Duration::from_secs(s);
        }
        let mut w = Window::default();
        if let Some(s) = window {
            w.time = Some(Duration::from_secs(s));
        }
        let cfg = OrchestratorConfig { window: w, dse, concurrent: true, ..Default::default() };
        let mut o = Orchestrator::new(campaign, cfg).with_output(out)?;
        o.run(budget)?;
        for r in &o.runs {
            log::info!("run {} testcase {}: {} witnesses, {} deployed", r.run, r.testcase, r.witnesses, r.deployed);
        }
        o.campaign
    } else {
        run_plain(campaign, budget, models_dir.as_deref())?
    };
    fs::write(out.join(DONE_FILE), "")?;
    println!(
        "{} execs in {:.1}s, {} blocks of {}, {} queue entries, {} model entries",
        campaign.execs,
        start.elapsed().as_secs_f64(),
        campaign.global.len(),
        t.program.cfg.blocks.len(),
        campaign.queue.len(),
        campaign.models().entry_total()
    );
    Ok(())
}

/// Fuzzes without in-process model generation, picking up models another
/// process deploys into `models_dir`.
fn run_plain(mut campaign: Campaign, budget: Budget, models_dir: Option<&Path>) -> Result<Campaign> {
    let start = Instant::now();
    let mut version = campaign.models().version;
    loop {
        if budget.execs.is_some_and(|n| campaign.execs >= n) || budget.time.is_some_and(|t| start.elapsed() >= t) {
            break;
        }
        let n = budget.execs.map_or(1000, |b| (b - campaign.execs).min(1000));
        campaign.run_execs(n)?;
        if let Some(dir) = models_dir {
            if ModelStore::dir_version(dir) > version {
                let m = ModelStore::load_dir(dir)?;
                version = m.version;
                log::info!("loaded model version {version}");
                campaign.set_models(Arc::new(m))?;
            }
        }
    }
    campaign.record()?;
    Ok(campaign)
}

fn load_queue(dir: &Path) -> Result<Vec<TestCase>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir.join("queue"))? {
        let p = e?.path();
        let Some(id) = p.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse::<u64>().ok()) else { continue };
        let Ok(bbs) = fs::read_to_string(dir.join(format!("coverage/{id:06}.bbs"))) else { continue };
        let bbs = parse_bbs(&bbs).with_context(|| format!("coverage of {id}"))?;
        out.push(TestCase {
            id,
            input: fs::read(&p)?,
            bbs: bbs.into_iter().collect(),
            verdict: Verdict::Ok,
            favored: false,
            found_at: 0,
        });
    }
    out.sort_by_key(|t| t.id);
    Ok(out)
}

fn mtime(p: &Path) -> Option<SystemTime> {
    fs::metadata(p).and_then(|m| m.modified()).ok()
}

fn esfuzz_run(dir: &Path, once: bool, no_heuristics: bool, window: u64, dse_timeout: u64) -> Result<()> {
    let spec = fs::read_to_string(dir.join(TARGET_FILE)).context("campaign directory has no target file")?;
    let t = load_target(spec.trim())?;
    let models_dir = dir.join("models");
    fs::create_dir_all(dir.join("esfuzz"))?;
    let mut dse = if no_heuristics { DseConfig::vanilla() } else { DseConfig::default() };
    dse.timeout = Duration::from_secs(dse_timeout);
    let mut used: BTreeSet<u64> = fs::read_to_string(dir.join(USED_FILE))
        .unwrap_or_default()
        .lines()
        .filter_map(|l| l.trim().parse().ok())
        .collect();
    let window = Duration::from_secs(window);
    let mut run = fs::read_dir(dir.join("esfuzz"))?.count() as u64;
    loop {
        let queue = load_queue(dir)?;
        let used_union: BTreeSet<u32> =
            queue.iter().filter(|t| used.contains(&t.id)).flat_map(|t| t.bbs.iter().copied()).collect();
        let last_change = [dir.join("coverage/global.bbs"), models_dir.join("manifest.csv")]
            .iter()
            .filter_map(|p| mtime(p))
            .max()
            .unwrap_or(SystemTime::UNIX_EPOCH);
        let stagnant = SystemTime::now().duration_since(last_change).unwrap_or_default() >= window;
        let pick = pick_testcase(&queue, &used, &used_union);
        if let (Some(i), true) = (pick, once || stagnant) {
            let tc = &queue[i];
            used.insert(tc.id);
            let ids: Vec<String> = used.iter().map(|u| u.to_string()).collect();
            fs::write(dir.join(USED_FILE), ids.join("\n") + "\n")?;
            let models = Arc::new(ModelStore::load_dir(&models_dir)?);
            let global = parse_bbs(&fs::read_to_string(dir.join("coverage/global.bbs"))?).context("global coverage")?;
            run += 1;
            let job = PipelineJob {
                run,
                target: Arc::clone(&t),
                models: Arc::clone(&models),
                testcase: tc.id,
                input: tc.input.clone(),
                p_skip: DEFAULT_P_SKIP,
                wanted: t.program.cfg.blocks.difference(&global).copied().collect(),
                dse: dse.clone(),
            };
            let out = run_pipeline(&job);
            fs::write(dir.join(format!("esfuzz/run-{run:03}.txt")), out.to_text())?;
            let mut store = (*models).clone();
            let stamp = SystemTime::now().duration_since(SystemTime::UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64);
            let added = store.deploy(out.entries, stamp);
            if !added.is_empty() {
                store.write_dir(&models_dir)?;
            }
            println!(
                "run {run} on testcase {}: {} states, {} witnesses, {} new entries",
                tc.id,
                out.report.states_explored(),
                out.report.witnesses.len(),
                added.len()
            );
        } else if once {
            println!("no test case covers blocks beyond those already used");
        }
        if once || dir.join(DONE_FILE).exists() {
            return Ok(());
        }
        std::thread::sleep(Duration::from_secs(1));
    }
}

fn report(dir: &Path, want_svg: bool, other: Option<&Path>) -> Result<()> {
    let read = |d: &Path| -> Result<_> {
        let text = fs::read_to_string(d.join("log.csv")).with_context(|| format!("reading {}/log.csv", d.display()))?;
        Ok(parse_log(&text)?)
    };
    let rows = read(dir)?;
    let csv = coverage_csv(&rows);
    fs::write(dir.join("report.csv"), &csv)?;
    print!("{csv}");
    let name = |d: &Path| d.file_name().map_or("campaign".to_string(), |n| n.to_string_lossy().into_owned());
    let mut series = vec![(name(dir), rows)];
    if let Some(o) = other {
        let rows_b = read(o)?;
        print!("{}", compare(&series[0].0, &series[0].1, &name(o), &rows_b));
        series.push((name(o), rows_b));
    }
    if want_svg {
        let s: Vec<(&str, &[_])> = series.iter().map(|(n, r)| (n.as_str(), r.as_slice())).collect();
        fs::write(dir.join("report.svg"), svg(&s))?;
    }
    Ok(())
}

fn corpus_build(names: &[String], out: &Path) -> Result<()> {
    let names: Vec<String> = if names.is_empty() { list_targets().iter().map(|s| s.to_string()).collect() } else { names.to_vec() };
    fs::create_dir_all(out)?;
    for n in &names {
        let t = load_target(n)?;
        let (src, cfg) = target_files(n).with_context(|| format!("{n} is not a corpus target"))?;
        fs::write(out.join(format!("{n}.mmcu")), t.image().to_container())?;
        fs::write(out.join(format!("{n}.s")), src)?;
        let cfg: String = cfg
            .lines()
            .map(|l| if l.trim_start().starts_with("source") { format!("source = {n}.mmcu") } else { l.to_string() })
            .collect::<Vec<_>>()
            .join("\n");
        fs::write(out.join(format!("{n}.cfg")), cfg + "\n")?;
        println!("{n}: {} code bytes, {} blocks", t.image().code.len(), t.program.cfg.blocks.len());
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().cmd {
        Cmd::Fuzz { target, time, execs, seed, models_dir, out, esfuzz, window, dse_timeout, exec_clock, p_skip } => {
            fuzz(&target, time, execs, seed, models_dir, &out, esfuzz, window, dse_timeout, exec_clock, p_skip)
        }
        Cmd::EsfuzzRun { campaign_dir, once, no_heuristics, window, dse_timeout } => {
            esfuzz_run(&campaign_dir, once, no_heuristics, window, dse_timeout)
        }
        Cmd::Trace { target, input, models_dir } => {
            let t = load_target(&target)?;
            let models = Arc::new(load_models(models_dir.as_deref())?);
            let input = fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
            print!("{}", record_trace(&t, &models, &input, 0.0).to_text());
            Ok(())
        }
        Cmd::Cluster { trace, target } => {
            let text = fs::read_to_string(&trace).with_context(|| format!("reading {}", trace.display()))?;
            let trace = DetailedTrace::parse(&text)?;
            let strings = match target {
                Some(t) => identify_strings(load_target(&t)?.image()),
                None => Vec::new(),
            };
            print!("{}", groups_report(&cluster_trace(&trace, &strings)));
            Ok(())
        }
        Cmd::Report { campaign_dir, svg, compare } => report(&campaign_dir, svg, compare.as_deref()),
        Cmd::Corpus { cmd: CorpusCmd::List } => {
            for n in list_targets() {
                let t = load_target(n)?;
                let gt: Vec<&String> = t.ground_truth.keys().collect();
                println!("{n}\t{} blocks\tground truth: {}", t.program.cfg.blocks.len(), gt.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(","));
            }
            Ok(())
        }
        Cmd::Corpus { cmd: CorpusCmd::Build { names, out } } => corpus_build(&names, &out),
    }
}
