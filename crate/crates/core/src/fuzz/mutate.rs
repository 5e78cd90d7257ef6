//! Byte-level mutation operators.

use rand::Rng;

const INTERESTING: [u8; 9] = [0, 1, 0x7f, 0x80, 0xff, b'\n', b'\r', b',', b' '];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    BitFlip,
    ByteReplace,
    Splice,
    Insert,
    Delete,
    Arith,
    Clone,
}

const ALL: [Mutation; 7] = [
    Mutation::BitFlip,
    Mutation::ByteReplace,
    Mutation::Splice,
    Mutation::Insert,
    Mutation::Delete,
    Mutation::Arith,
    Mutation::Clone,
];

/// Applies one operator in place. `other` is the splice partner.
pub fn apply<R: Rng>(op: Mutation, data: &mut Vec<u8>, other: &[u8], rng: &mut R) {
    match op {
        Mutation::BitFlip if !data.is_empty() => {
            let i = rng.random_range(0..data.len());
            data[i] ^= 1 << rng.random_range(0..8);
        }
        Mutation::ByteReplace if !data.is_empty() => {
            let i = rng.random_range(0..data.len());
            data[i] = if rng.random_bool(0.5) { INTERESTING[rng.random_range(0..INTERESTING.len())] } else { rng.random() };
        }
        Mutation::Splice if !other.is_empty() => {
            let cut = rng.random_range(0..=data.len());
            let from = rng.random_range(0..other.len());
            data.truncate(cut);
            data.extend_from_slice(&other[from..]);
        }
        Mutation::Delete if !data.is_empty() => {
            let i = rng.random_range(0..data.len());
            let n = rng.random_range(1..=(data.len() - i).min(8));
            data.drain(i..i + n);
        }
        Mutation::Arith if !data.is_empty() => {
            let i = rng.random_range(0..data.len());
            let d = rng.random_range(1..=16u8);
            data[i] = if rng.random_bool(0.5) { data[i].wrapping_add(d) } else { data[i].wrapping_sub(d) };
        }
        Mutation::Clone if !data.is_empty() => {
            let i = rng.random_range(0..data.len());
            let n = rng.random_range(1..=(data.len() - i).min(16));
            let chunk: Vec<u8> = data[i..i + n].to_vec();
            let at = rng.random_range(0..=data.len());
            data.splice(at..at, chunk);
        }
        // Insertion doubles as the fallback for operators that need bytes.
        _ => {
            let at = rng.random_range(0..=data.len());
            let n = rng.random_range(1..=8);
            let fill: Vec<u8> = (0..n).map(|_| rng.random()).collect();
            data.splice(at..at, fill);
        }
    }
}

/// A stacked havoc round of 1 to 16 operators, truncated to `max_len`.
pub fn havoc<R: Rng>(parent: &[u8], other: &[u8], max_len: usize, rng: &mut R) -> Vec<u8> {
    let mut data = parent.to_vec();
    let rounds = 1usize << rng.random_range(0..5);
    for _ in 0..rounds {
        let op = ALL[rng.random_range(0..ALL.len())];
        apply(op, &mut data, other, rng);
    }
    data.truncate(max_len);
    data
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_input_grows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for op in ALL {
            let mut d = Vec::new();
            apply(op, &mut d, &[], &mut rng);
            assert!(!d.is_empty(), "{op:?}");
        }
    }

    #[test]
    fn bitflip_changes_one_bit() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut d = vec![0u8; 16];
        apply(Mutation::BitFlip, &mut d, &[], &mut rng);
        assert_eq!(d.iter().map(|b| b.count_ones()).sum::<u32>(), 1);
    }

    proptest! {
        #[test]
        fn havoc_respects_max(parent in proptest::collection::vec(any::<u8>(), 0..64), seed: u64, max in 1usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = havoc(&parent, b"steer,", max, &mut rng);
            prop_assert!(out.len() <= max);
        }

        #[test]
        fn havoc_is_deterministic(parent in proptest::collection::vec(any::<u8>(), 0..64), seed: u64) {
            let a = havoc(&parent, b"x", 1024, &mut ChaCha8Rng::seed_from_u64(seed));
            let b = havoc(&parent, b"x", 1024, &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(a, b);
        }
    }
}
