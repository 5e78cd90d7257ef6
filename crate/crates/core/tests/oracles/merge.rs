use std::collections::BTreeSet;

/// Repeatedly merges any two overlapping sets until none overlap.
pub fn quadratic_merge(iv: &[(u64, u64)]) -> BTreeSet<BTreeSet<usize>> {
    let mut sets: Vec<(BTreeSet<usize>, u64, u64)> =
        iv.iter().enumerate().map(|(i, &(s, e))| (BTreeSet::from([i]), s, e)).collect();
    loop {
        let mut merged = false;
        'outer: for a in 0..sets.len() {
            for b in a + 1..sets.len() {
                if sets[a].1 <= sets[b].2 && sets[b].1 <= sets[a].2 {
                    let (bs, s, e) = sets.remove(b);
                    sets[a].0.extend(bs);
                    sets[a].1 = sets[a].1.min(s);
                    sets[a].2 = sets[a].2.max(e);
                    merged = true;
                    break 'outer;
                }
            }
        }
        if !merged {
            return sets.into_iter().map(|s| s.0).collect();
        }
    }
}
