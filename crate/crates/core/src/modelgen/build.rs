//! Model entries from recorded history plus a witness.

use std::collections::BTreeSet;

use super::{Label, ModelEntry, Provenance};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BuildError {
    #[error("witness label {0} does not match model label {1}")]
    LabelMismatch(Label, Label),
    #[error("entry would be empty")]
    Empty,
}

/// A recorded read of the label that precedes the witnessed group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PriorRead {
    pub value: u32,
    /// The read formed a group on its own (or no group at all).
    pub singleton: bool,
}

/// Recorded values of earlier reads followed by the witness values, where
/// `None` marks reads the witness leaves unconstrained.
pub fn build_entry(
    model_label: Label,
    witness_label: Label,
    prior: &[PriorRead],
    witness: &[Option<u32>],
    provenance: Provenance,
) -> Result<ModelEntry, BuildError> {
    if model_label != witness_label {
        return Err(BuildError::LabelMismatch(witness_label, model_label));
    }
    let mut values: Vec<Option<u32>> = prior.iter().map(|p| Some(p.value)).collect();
    values.extend_from_slice(witness);
    if values.is_empty() {
        return Err(BuildError::Empty);
    }
    let singletons: BTreeSet<usize> = prior.iter().enumerate().filter(|(_, p)| p.singleton).map(|(i, _)| i).collect();
    Ok(ModelEntry { values, singletons, provenance: Some(provenance) })
}

#[cfg(test)]
mod tests {
    use super::*;

    const L: Label = Label { isr: 0, reg: 0x4000_0818 };

    fn bytes(s: &[u8]) -> Vec<Option<u32>> {
        s.iter().map(|&b| Some(b as u32)).collect()
    }

    #[test]
    fn first_group_witness() {
        let e = build_entry(L, L, &[], &bytes(b"steer,\n"), Provenance::default()).unwrap();
        assert_eq!(e.values, bytes(b"steer,\n"));
        assert!(e.singletons.is_empty());
    }

    #[test]
    fn later_group_extends_history() {
        let prior: Vec<PriorRead> = b"steer,".iter().map(|&b| PriorRead { value: b as u32, singleton: false }).collect();
        let e = build_entry(L, L, &prior, &bytes(b"585\n"), Provenance::default()).unwrap();
        assert_eq!(e.values, bytes(b"steer,585\n"));
    }

    #[test]
    fn unconstrained_positions() {
        let e = build_entry(L, L, &[], &[Some(7), None, None], Provenance::default()).unwrap();
        assert_eq!(e.values, vec![Some(7), None, None]);
    }

    #[test]
    fn singletons_and_errors() {
        let prior = [PriorRead { value: 1, singleton: true }, PriorRead { value: 2, singleton: false }];
        let e = build_entry(L, L, &prior, &[Some(3)], Provenance::default()).unwrap();
        assert_eq!(e.singletons, BTreeSet::from([0]));
        let other = Label::new(4, 5);
        assert!(matches!(build_entry(L, other, &[], &[Some(1)], Provenance::default()), Err(BuildError::LabelMismatch(..))));
        assert_eq!(build_entry(L, L, &[], &[], Provenance::default()), Err(BuildError::Empty));
    }
}
