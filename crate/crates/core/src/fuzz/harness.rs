//! Translation of fuzzer input bytes into MMIO read values.
//!
//! Each read of register `R` in context `I` is resolved as follows. If a
//! stateful model exists for `(I, R)`, the current selection for that label
//! supplies the next value; a fresh selection consumes one input byte `Z`
//! and picks entry `Z mod n`. Exhausted selections are replaced. Undefined
//! values and the dummy entry fall back to the baseline model, which consumes
//! `size` bytes for bit-extract models and nothing otherwise. Input past the
//! end reads as zero.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::BaselineModel;
use crate::corpus::Target;
use crate::modelgen::{next_value, select_model, Label, ModelSelection, ModelStore, Next};
use crate::vm::MachineState;

/// How one read was resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Resolution {
    pub value: u32,
    pub baseline: BaselineModel,
    /// The value came from a stateful model entry.
    pub stateful: bool,
    /// Input bytes consumed by this read.
    pub consumed: usize,
}

impl Resolution {
    /// Bytes of the value that carry input data under the baseline model.
    pub fn data_mask(&self) -> u32 {
        match self.baseline {
            BaselineModel::BitExtract { mask, left_shift, .. } => mask.checked_shl(left_shift as u32).unwrap_or(0),
            _ => 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Resolver {
    target: Arc<Target>,
    models: Arc<ModelStore>,
    input: Arc<Vec<u8>>,
    pub cursor: usize,
    selections: Vec<(Label, ModelSelection)>,
    rng: ChaCha8Rng,
    p_skip: f64,
}

/// FNV-1a of the input; seeds the skip decisions so replays are exact.
fn input_seed(input: &[u8]) -> u64 {
    input.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl Resolver {
    pub fn new(target: Arc<Target>, models: Arc<ModelStore>, input: Arc<Vec<u8>>, p_skip: f64) -> Resolver {
        let rng = ChaCha8Rng::seed_from_u64(input_seed(&input));
        Resolver { target, models, input, cursor: 0, selections: Vec::new(), rng, p_skip }
    }

    pub fn input(&self) -> &[u8] {
        &self.input
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.input.get(self.cursor).copied().unwrap_or(0);
        self.cursor += 1;
        b
    }

    pub fn baseline(&self, addr: u32, size: u32) -> BaselineModel {
        self.target.baseline_model(addr, size)
    }

    fn resolve_baseline(&mut self, st: &MachineState, m: BaselineModel, addr: u32) -> (u32, usize) {
        match m {
            BaselineModel::Constant(v) => (v, 0),
            BaselineModel::Passthrough => (st.latch(addr), 0),
            BaselineModel::BitExtract { mask, left_shift, size } => {
                let mut b = 0u32;
                for i in 0..size as u32 {
                    b |= (self.next_byte() as u32) << (8 * i);
                }
                ((b & mask).checked_shl(left_shift as u32).unwrap_or(0), size as usize)
            }
        }
    }

    pub fn resolve(&mut self, st: &MachineState, addr: u32, size: u32) -> Resolution {
        let baseline = self.baseline(addr, size);
        let start = self.cursor;
        let label = Label::new(st.irq_context, addr);
        let models = Arc::clone(&self.models);
        if let Some(model) = models.models.get(&label) {
            loop {
                let pos = self.selections.iter().position(|(l, _)| *l == label);
                let idx = match pos {
                    Some(i) => i,
                    None => {
                        let z = self.next_byte();
                        self.selections.push((label, select_model(model, z)));
                        self.selections.len() - 1
                    }
                };
                let sel = &mut self.selections[idx].1;
                match next_value(sel, model, &mut self.rng, self.p_skip) {
                    Next::Value(v) => {
                        let v = if size == 1 { v & 0xff } else { v };
                        return Resolution { value: v, baseline, stateful: true, consumed: self.cursor - start };
                    }
                    Next::Undef => {
                        let (v, _) = self.resolve_baseline(st, baseline, addr);
                        return Resolution { value: v, baseline, stateful: false, consumed: self.cursor - start };
                    }
                    Next::Exhausted => {
                        self.selections.swap_remove(idx);
                    }
                }
            }
        }
        let (value, consumed) = self.resolve_baseline(st, baseline, addr);
        Resolution { value, baseline, stateful: false, consumed }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_target;
    use crate::modelgen::{ModelEntry, StatefulModel};

    fn resolver(models: ModelStore, input: &[u8]) -> (Resolver, MachineState) {
        let t = Arc::new(build_target("steering").unwrap());
        let st = t.program.initial_state();
        (Resolver::new(t, Arc::new(models), Arc::new(input.to_vec()), 0.0), st)
    }

    #[test]
    fn bitextract_consumes_one_byte() {
        let (mut r, st) = resolver(ModelStore::default(), &[0x73, 0x74]);
        let res = r.resolve(&st, 0x4000_0818, 4);
        assert_eq!((res.value, res.consumed), (0x73, 1));
        assert_eq!(r.cursor, 1);
    }

    #[test]
    fn constant_consumes_nothing() {
        let (mut r, st) = resolver(ModelStore::default(), &[9]);
        let res = r.resolve(&st, 0x4000_0814, 4);
        assert_eq!((res.value, res.consumed), (1, 0));
        assert_eq!(res.data_mask(), 0);
    }

    #[test]
    fn zero_extension_and_default_model() {
        let (mut r, st) = resolver(ModelStore::default(), &[0xaa]);
        assert_eq!(r.resolve(&st, 0x4000_0100, 4).value, 0xaa);
        assert_eq!(r.resolve(&st, 0x4000_0100, 4).value, 0);
        assert_eq!(r.cursor, 8);
    }

    #[test]
    fn stateful_entry_then_reselect() {
        let mut m = StatefulModel::new(Label::new(0, 0x4000_0818));
        m.entries.push(ModelEntry::new(vec![Some(0x73), None, Some(0x65)]));
        let mut store = ModelStore::default();
        store.models.insert(m.label, m);
        // Z=1 selects entry 1; the undef read consumes one baseline byte; then
        // Z=2 selects the dummy (2 mod 2 = 0) which defers one read.
        let (mut r, st) = resolver(store, &[1, 0x41, 2, 0x42]);
        let vals: Vec<Resolution> = (0..4).map(|_| r.resolve(&st, 0x4000_0818, 4)).collect();
        assert_eq!(vals.iter().map(|v| v.value).collect::<Vec<_>>(), vec![0x73, 0x41, 0x65, 0x42]);
        assert_eq!(vals.iter().map(|v| v.consumed).collect::<Vec<_>>(), vec![1, 1, 0, 2]);
        assert!(vals[0].stateful && !vals[1].stateful);
    }
}
