use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Duration;

use chunkfuzz::corpus::build_target;
use chunkfuzz::fuzz::{Campaign, CampaignConfig};
use chunkfuzz::modelgen::ModelStore;
use chunkfuzz::orchestrator::{Budget, Orchestrator, OrchestratorConfig, Window};

fn orchestrator(name: &str, seed: u64, enabled: bool, concurrent: bool) -> Orchestrator {
    let t = Arc::new(build_target(name).unwrap());
    let c = Campaign::new(t, Arc::new(ModelStore::default()), CampaignConfig { seed, exec_clock: true, ..Default::default() });
    let cfg = OrchestratorConfig {
        window: Window { execs: Some(20_000), time: None },
        enabled,
        concurrent,
        ..Default::default()
    };
    Orchestrator::new(c, cfg)
}

fn covered(o: &Orchestrator, gt: &str) -> bool {
    let t = o.campaign.target();
    t.ground_truth.get(gt).is_some_and(|bs| bs.iter().all(|b| o.campaign.global.contains(b)))
}

#[test]
fn steering_end_to_end() {
    let mut o = orchestrator("steering", 1, true, false);
    let start = std::time::Instant::now();
    o.run(Budget { execs: Some(400_000), time: Some(Duration::from_secs(120)) }).unwrap();
    eprintln!("{} execs in {:?}", o.campaign.execs, start.elapsed());
    for out in &o.outputs {
        eprintln!("{}", out.to_text());
    }
    for m in o.campaign.models().models.values() {
        eprintln!("{}", m.serialize());
    }
    assert!(covered(&o, "steer_branch") && covered(&o, "motor_branch"));
    assert!(covered(&o, "val_gt_180"));
}

#[test]
fn doorlock_end_to_end() {
    let mut o = orchestrator("doorlock", 2, true, false);
    o.run(Budget { execs: Some(400_000), time: Some(Duration::from_secs(120)) }).unwrap();
    for out in &o.outputs {
        eprintln!("{}", out.to_text());
    }
    assert!(covered(&o, "post_ok"));
    let ok: Vec<Option<u32>> = b"OK\r\n".iter().map(|&b| Some(b as u32)).collect();
    assert!(o.campaign.models().models.values().flat_map(|m| &m.entries).any(|e| e.values == ok));
}

#[test]
fn baseline_never_reaches_commands() {
    let mut o = orchestrator("steering", 1, false, false);
    o.run(Budget { execs: Some(200_000), time: None }).unwrap();
    assert!(o.runs.is_empty());
    assert!(!covered(&o, "steer_branch") && !covered(&o, "motor_branch"));
}

#[test]
fn status_poll_yields_no_models() {
    let mut o = orchestrator("status-poll", 3, true, false);
    o.run(Budget { execs: Some(100_000), time: None }).unwrap();
    assert!(o.campaign.models().is_empty());
    assert_eq!(o.campaign.execs, 100_000);
}

#[test]
fn fuzzing_continues_during_a_run() {
    let mut o = orchestrator("steering", 4, true, true);
    o.run(Budget { execs: Some(200_000), time: None }).unwrap();
    assert!(!o.runs.is_empty());
    for r in &o.runs {
        assert!(r.finished_at >= r.started_at);
    }
    assert!(o.runs.iter().any(|r| r.finished_at > r.started_at), "{:?}", o.runs);
}

#[test]
fn used_testcases_never_repeat() {
    let mut o = orchestrator("doorlock", 5, true, false);
    o.run(Budget { execs: Some(200_000), time: None }).unwrap();
    let ids: Vec<u64> = o.runs.iter().map(|r| r.testcase).collect();
    let set: BTreeSet<u64> = ids.iter().copied().collect();
    assert_eq!(ids.len(), set.len());
}

#[test]
fn run_dir_has_models_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let t = Arc::new(build_target("steering").unwrap());
    let c = Campaign::new(t, Arc::new(ModelStore::default()), CampaignConfig { seed: 1, exec_clock: true, ..Default::default() })
        .with_output(dir.path())
        .unwrap();
    let cfg = OrchestratorConfig { window: Window { execs: Some(20_000), time: None }, ..Default::default() };
    let mut o = Orchestrator::new(c, cfg).with_output(dir.path()).unwrap();
    o.run(Budget { execs: Some(100_000), time: None }).unwrap();
    let back = ModelStore::load_dir(&dir.path().join("models")).unwrap();
    assert_eq!(&back, o.campaign.models().as_ref());
    assert!(dir.path().join("esfuzz/run-001.txt").exists());
}

