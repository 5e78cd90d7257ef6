//! Fuzzer-side selection and consumption of stateful models.

use rand::Rng;

use super::StatefulModel;

pub const DEFAULT_P_SKIP: f64 = 0.125;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSelection {
    pub z: usize,
    pub cursor: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Next {
    Value(u32),
    /// Use the baseline model for this read.
    Undef,
    /// The selection is used up; reselect with a fresh input byte.
    Exhausted,
}

/// Selects entry `Z mod entry_count`.
pub fn select_model(model: &StatefulModel, z_byte: u8) -> ModelSelection {
    ModelSelection { z: z_byte as usize % model.entry_count(), cursor: 0, skipped: 0 }
}

/// Next value of the selected entry. The dummy entry covers exactly one read.
/// A singleton position at the cursor is skipped with probability `p_skip`.
pub fn next_value<R: Rng>(sel: &mut ModelSelection, model: &StatefulModel, rng: &mut R, p_skip: f64) -> Next {
    let Some(entry) = model.entry(sel.z) else {
        if sel.cursor == 0 {
            sel.cursor = 1;
            return Next::Undef;
        }
        return Next::Exhausted;
    };
    if p_skip > 0.0 && entry.singletons.contains(&sel.cursor) && rng.random_bool(p_skip) {
        sel.cursor += 1;
        sel.skipped += 1;
    }
    match entry.values.get(sel.cursor) {
        None => Next::Exhausted,
        Some(v) => {
            sel.cursor += 1;
            match v {
                Some(x) => Next::Value(*x),
                None => Next::Undef,
            }
        }
    }
}
