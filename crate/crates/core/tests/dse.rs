use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Duration;

use chunkfuzz::cluster::{cluster_trace, identify_strings};
use chunkfuzz::corpus::{build_target, Target};
use chunkfuzz::dse::{run_dse, DseConfig, DseReport, DseRun};
use chunkfuzz::fuzz::execute;
use chunkfuzz::modelgen::ModelStore;
use chunkfuzz::taint::record_trace;

fn run(t: &Arc<Target>, input: &[u8], cfg: &DseConfig) -> (DseReport, BTreeSet<u32>) {
    let models = Arc::new(ModelStore::default());
    let covered: BTreeSet<u32> = execute(t, &models, input, 0.0).bbs.into_iter().collect();
    let wanted: BTreeSet<u32> = t.program.cfg.blocks.difference(&covered).copied().collect();
    let trace = record_trace(t, &models, input, 0.0);
    let groups = cluster_trace(&trace, &identify_strings(t.image()));
    let run = DseRun { target: t, models: &models, input, p_skip: 0.0, trace: &trace, groups: &groups };
    (run_dse(&run, &wanted, cfg), wanted)
}

fn reached(r: &DseReport) -> BTreeSet<u32> {
    r.witnesses.iter().map(|w| w.reached_bb).collect()
}

fn sym(t: &Target, name: &str) -> u32 {
    t.image().symbol(name).unwrap()
}

#[test]
fn steering_commands_from_strings() {
    let t = Arc::new(build_target("steering").unwrap());
    let (r, _) = run(&t, b"hello,1\n", &DseConfig::default());
    // Each string lane stops at its first witness.
    let texts: BTreeSet<Vec<u8>> =
        r.witnesses.iter().map(|w| w.values.iter().map(|v| v.unwrap_or(0) as u8).collect()).collect();
    for cmd in [&b"steer"[..], b"motor"] {
        assert!(texts.iter().any(|t| t.starts_with(cmd)), "{}", r.to_text());
    }
    // Replaying the witness values as input reaches the command handlers.
    let models = Arc::new(ModelStore::default());
    for (cmd, block) in [(&b"steer,1\n"[..], "do_steer"), (b"motor,1\n", "do_motor")] {
        assert!(execute(&t, &models, cmd, 0.0).bbs.contains(&sym(&t, block)));
    }
    assert!(!reached(&r).is_empty());
}

#[test]
fn doorlock_word_compare() {
    let t = Arc::new(build_target("doorlock").unwrap());
    let (r, _) = run(&t, b"AB\r\n", &DseConfig::default());
    let w = r.witnesses.iter().find(|w| w.reached_bb == sym(&t, "unlocked")).unwrap_or_else(|| panic!("{}", r.to_text()));
    let bytes: Vec<u8> = w.values.iter().map(|v| v.unwrap_or(0) as u8).collect();
    assert!(bytes.starts_with(b"OK\r\n"), "{bytes:?}");
}

#[test]
fn interrupt_driven_group() {
    let t = Arc::new(build_target("uart-irq-echo").unwrap());
    let (r, _) = run(&t, b"abcdefghijklmnop", &DseConfig::default());
    let w = r.witnesses.iter().find(|w| w.reached_bb == sym(&t, "got_ping")).unwrap_or_else(|| panic!("{}", r.to_text()));
    let bytes: Vec<u8> = w.values.iter().map(|v| v.unwrap_or(0) as u8).collect();
    assert!(bytes.windows(4).any(|x| x == b"ping"), "{bytes:?}\n{}", r.to_text());
}

#[test]
fn empty_wanted_returns_at_once() {
    let t = Arc::new(build_target("toy3").unwrap());
    let models = Arc::new(ModelStore::default());
    let trace = record_trace(&t, &models, b"abc", 0.0);
    let groups = cluster_trace(&trace, &[]);
    let run = DseRun { target: &t, models: &models, input: b"abc", p_skip: 0.0, trace: &trace, groups: &groups };
    let r = run_dse(&run, &BTreeSet::new(), &DseConfig::default());
    assert_eq!(r.states_explored(), 0);
    assert!(r.witnesses.is_empty());
}

#[test]
fn vanilla_explores_far_more() {
    let t = Arc::new(build_target("steering").unwrap());
    let (h, _) = run(&t, b"hello,1\n", &DseConfig::default());
    let cfg = DseConfig { timeout: Duration::from_secs(120), ..DseConfig::vanilla() };
    let (v, _) = run(&t, b"hello,1\n", &cfg);
    eprintln!("heuristic {} vanilla {}\n{}", h.states_explored(), v.states_explored(), v.to_text());
    assert!(v.states_explored() > 20 * h.states_explored());
}

#[test]
fn toy3_witnesses_match_exhaustive_enumeration() {
    let t = Arc::new(build_target("toy3").unwrap());
    let cfg = DseConfig { idle_stop: false, ..DseConfig::default() };
    let (r, wanted) = run(&t, b"abc", &cfg);
    let models = Arc::new(ModelStore::default());
    let threads = std::thread::available_parallelism().map_or(4, |n| n.get()).min(16);
    let reachable: BTreeSet<u32> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|k| {
                let (t, models) = (&t, &models);
                s.spawn(move || {
                    let mut seen = BTreeSet::new();
                    for a in (k..256).step_by(threads) {
                        for b in 0..256usize {
                            for c in 0..256usize {
                                seen.extend(execute(t, models, &[a as u8, b as u8, c as u8], 0.0).bbs);
                            }
                        }
                    }
                    seen
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
    });
    let expected: BTreeSet<u32> = reachable.intersection(&wanted).copied().collect();
    assert!(!expected.contains(&sym(&t, "leaf_never")));
    assert_eq!(reached(&r), expected, "{}", r.to_text());
}
