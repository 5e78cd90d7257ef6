use std::collections::BTreeSet;
use std::sync::Arc;

use chunkfuzz::cluster::{cluster_trace, groups_report, identify_strings, merge_intervals, partition_reads};
use chunkfuzz::corpus::{build_target, Target, TargetConfig};
use chunkfuzz::modelgen::{Label, ModelStore};
use chunkfuzz::taint::record_trace;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod oracles;

use oracles::merge::quadratic_merge;

fn no_models() -> Arc<ModelStore> {
    Arc::new(ModelStore::default())
}

#[test]
fn random_merges_equal_quadratic_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    for _ in 0..1000 {
        let n = rng.random_range(0..40);
        let iv: Vec<(u64, u64)> = (0..n)
            .map(|_| {
                let s = rng.random_range(0..200);
                (s, s + rng.random_range(0..30))
            })
            .collect();
        let got: BTreeSet<BTreeSet<usize>> =
            merge_intervals(&iv).into_iter().map(|(m, _)| m.into_iter().collect()).collect();
        assert_eq!(got, quadratic_merge(&iv));
    }
}

proptest! {
    #[test]
    fn merged_spans_disjoint_and_complete(iv in proptest::collection::vec((0u64..500, 0u64..50), 0..60)) {
        let iv: Vec<(u64, u64)> = iv.into_iter().map(|(s, d)| (s, s + d)).collect();
        let m = merge_intervals(&iv);
        for w in m.windows(2) {
            prop_assert!(w[0].1 .1 < w[1].1 .0);
        }
        let all: BTreeSet<usize> = m.iter().flat_map(|(ms, _)| ms.iter().copied()).collect();
        prop_assert_eq!(all.len(), iv.len());
    }
}

#[test]
fn steering_groups_match_commands() {
    let t = Arc::new(build_target("steering").unwrap());
    let trace = record_trace(&t, &no_models(), b"hello,1\nsteer,5\n", 0.0);
    let strings = identify_strings(t.image());
    let groups = cluster_trace(&trace, &strings);
    let first = &groups[0];
    assert_eq!(first.label, Label::new(0, 0x4000_0818));
    assert_eq!(first.index, 1);
    // "hello" plus the ',' delimiter
    assert_eq!(first.reads.len(), 6, "{}", groups_report(&groups));
    let texts: BTreeSet<String> = first.matches.iter().map(|m| m.string.text()).collect();
    assert_eq!(texts, BTreeSet::from(["steer".to_string(), "motor".to_string()]));
    for m in &first.matches {
        assert_eq!(m.anchors, vec![first.reads[0].source]);
    }
    for w in groups.windows(2) {
        if w[0].label == w[1].label {
            assert!(w[0].interval.1 < w[1].interval.0);
        }
    }
}

#[test]
fn status_poll_has_no_partitions() {
    let t = Arc::new(build_target("status-poll").unwrap());
    let trace = record_trace(&t, &no_models(), &[7; 16], 0.0);
    assert!(partition_reads(&trace).is_empty());
}

#[test]
fn concatenation_suppresses_match() {
    let t = Arc::new(build_target("concat-prefix").unwrap());
    let trace = record_trace(&t, &no_models(), b"ab", 0.0);
    let groups = cluster_trace(&trace, &identify_strings(t.image()));
    assert!(!groups.is_empty());
    assert!(groups.iter().all(|g| g.matches.is_empty()), "{}", groups_report(&groups));
}

fn inline_target(src: &str) -> Arc<Target> {
    let cfg = TargetConfig::parse("name = inline\nsource = inline.s\nirq = 3,7\nmax_bbs = 5000\nstateless_model.0x40000814 = constant:0x1\n").unwrap();
    Arc::new(Target::build(cfg, src).unwrap())
}

#[test]
fn same_register_in_isr_and_main_partitions_twice() {
    let t = inline_target(
        "
        .vector 3, isr
        LI r8, 0x20000000
        LDI r9, #6
    loop:
        CALL getc
        STB r1, [r8+0]
        ADD r8, r8, #1
        SUB r9, r9, #1
        CMP r9, #0
        BNE loop
        LI r8, 0x20000000
        LDB r2, [r8+0]
        CMP r2, #'a'
        LI r8, 0x20000100
        LDB r2, [r8+0]
        CMP r2, #'b'
        HALT
    getc:
        LI r4, 0x40000818
        LDW r1, [r4+0]
        RET
    isr:
        LI r6, 0x40000818
        LDW r7, [r6+0]
        LI r6, 0x20000100
        STB r7, [r6+0]
        IRET
    ",
    );
    let trace = record_trace(&t, &no_models(), b"abcdefghijklmnop", 0.0);
    let parts = partition_reads(&trace);
    let isr = t.image().symbol("isr").unwrap();
    let labels: BTreeSet<Label> = parts.keys().copied().collect();
    assert_eq!(labels, BTreeSet::from([Label::new(0, 0x4000_0818), Label::new(isr, 0x4000_0818)]));
}

#[test]
fn match_trimmed_to_first_used_byte() {
    let t = inline_target(
        "
        LI r8, 0x20000000
        LDI r9, #4
    loop:
        LI r4, 0x40000818
        LDW r1, [r4+0]
        STB r1, [r8+0]
        ADD r8, r8, #1
        SUB r9, r9, #1
        CMP r9, #0
        BNE loop
        CALL cmp
        HALT
    cmp:
        LI r1, 0x20000000
        LA r2, text
        LDW r3, [r1+0]
        LDW r4, [r2+1]
        CMP r3, r4
        RET
    .align 4
    .byte 1, 1, 1
    text: .ascii \"Xsteer\"
    ",
    );
    let trace = record_trace(&t, &no_models(), b"stee", 0.0);
    let groups = cluster_trace(&trace, &identify_strings(t.image()));
    let m = &groups[0].matches;
    assert_eq!(m.len(), 1, "{}", groups_report(&groups));
    assert_eq!(m[0].string.text(), "steer");
    assert_eq!(m[0].anchors, vec![groups[0].reads[0].source]);
}
