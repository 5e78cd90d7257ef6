//! Versioned model store and its on-disk form.
//!
//! A models directory holds `<label>.model` files and `manifest.csv` with one
//! row per deployed entry:
//!
//! ```text
//! version,time,label,index,run,witness,group,singletons
//! 1,52000,ctx0_mmio_40000818,1,1,0,1,
//! ```
//!
//! `singletons` lists `;`-separated positions of one-read groups in the entry.
//! The manifest is written last, so a reader that sees a version also sees
//! its model files.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use super::{Label, ModelEntry, ParseError, Provenance, StatefulModel};

pub const MANIFEST: &str = "manifest.csv";
const MANIFEST_HEADER: &str = "version,time,label,index,run,witness,group,singletons";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("{file}: {err}")]
    Model { file: String, err: ParseError },
    #[error("manifest line {0}: {1}")]
    Manifest(usize, String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub version: u64,
    pub time: u64,
    pub label: Label,
    pub index: usize,
    pub provenance: Provenance,
    pub singletons: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ModelStore {
    pub version: u64,
    pub models: BTreeMap<Label, StatefulModel>,
    pub manifest: Vec<ManifestRecord>,
}

impl ModelStore {
    pub fn get(&self, isr: u32, reg: u32) -> Option<&StatefulModel> {
        self.models.get(&Label::new(isr, reg))
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    /// Deployed entries across all labels, dummies excluded.
    pub fn entry_total(&self) -> usize {
        self.models.values().map(|m| m.entries.len()).sum()
    }

    /// Adds entries as one new version. Duplicates are dropped; the version
    /// only advances when something new was added. Returns the new indices.
    pub fn deploy(&mut self, entries: Vec<(Label, ModelEntry)>, time: u64) -> Vec<(Label, usize)> {
        let mut added = Vec::new();
        let version = self.version + 1;
        for (label, entry) in entries {
            let model = self.models.entry(label).or_insert_with(|| StatefulModel::new(label));
            let singletons: Vec<usize> = entry.singletons.iter().copied().collect();
            let provenance = entry.provenance.clone().unwrap_or_default();
            let (index, new) = model.push(entry);
            if new {
                self.manifest.push(ManifestRecord { version, time, label, index, provenance, singletons });
                added.push((label, index));
            }
        }
        if !added.is_empty() {
            self.version = version;
        }
        added
    }

    pub fn manifest_text(&self) -> String {
        let mut out = format!("{MANIFEST_HEADER}\n");
        for r in &self.manifest {
            let s: Vec<String> = r.singletons.iter().map(|x| x.to_string()).collect();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.version,
                r.time,
                r.label.key(),
                r.index,
                r.provenance.run,
                r.provenance.witness,
                r.provenance.group_index,
                s.join(";")
            ));
        }
        out
    }

    pub fn write_dir(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        for (label, m) in &self.models {
            write_atomic(&dir.join(format!("{}.model", label.key())), m.serialize().as_bytes())?;
        }
        write_atomic(&dir.join(MANIFEST), self.manifest_text().as_bytes())
    }

    /// Version recorded in a directory's manifest, 0 when absent.
    pub fn dir_version(dir: &Path) -> u64 {
        fs::read_to_string(dir.join(MANIFEST))
            .ok()
            .and_then(|t| t.lines().skip(1).filter_map(|l| l.split(',').next()?.parse::<u64>().ok()).max())
            .unwrap_or(0)
    }

    pub fn load_dir(dir: &Path) -> Result<ModelStore, StoreError> {
        let mut store = ModelStore::default();
        if !dir.exists() {
            return Ok(store);
        }
        let mut names: Vec<_> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "model"))
            .collect();
        names.sort();
        for p in names {
            let text = fs::read_to_string(&p)?;
            let m = StatefulModel::parse(&text)
                .map_err(|err| StoreError::Model { file: p.display().to_string(), err })?;
            store.models.insert(m.label, m);
        }
        if let Ok(text) = fs::read_to_string(dir.join(MANIFEST)) {
            for (i, l) in text.lines().enumerate().skip(1) {
                if l.trim().is_empty() {
                    continue;
                }
                let bad = |m: &str| StoreError::Manifest(i + 1, m.to_string());
                let f: Vec<&str> = l.split(',').collect();
                if f.len() != 8 {
                    return Err(bad("expected 8 fields"));
                }
                let num = |s: &str| s.parse::<u64>().map_err(|_| bad("bad number"));
                let label = Label::parse_key(f[2]).ok_or_else(|| bad("bad label"))?;
                let singletons = if f[7].is_empty() {
                    Vec::new()
                } else {
                    f[7].split(';').map(|s| num(s).map(|x| x as usize)).collect::<Result<_, _>>()?
                };
                let rec = ManifestRecord {
                    version: num(f[0])?,
                    time: num(f[1])?,
                    label,
                    index: num(f[3])? as usize,
                    provenance: Provenance { run: num(f[4])?, witness: num(f[5])?, group_index: num(f[6])? as usize },
                    singletons,
                };
                if let Some(e) = store.models.get_mut(&label).and_then(|m| m.entries.get_mut(rec.index.wrapping_sub(1))) {
                    e.singletons = rec.singletons.iter().copied().collect();
                    e.provenance = Some(rec.provenance.clone());
                }
                store.version = store.version.max(rec.version);
                store.manifest.push(rec);
            }
        }
        Ok(store)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(v: &[u32], group: usize) -> ModelEntry {
        ModelEntry {
            values: v.iter().map(|&x| Some(x)).collect(),
            singletons: [0usize].into_iter().collect(),
            provenance: Some(Provenance { run: 1, witness: 2, group_index: group }),
        }
    }

    #[test]
    fn deploy_versions_and_dedup() {
        let mut s = ModelStore::default();
        let l = Label::new(0, 0x4000_0818);
        assert_eq!(s.deploy(vec![(l, entry(b"OK\r\n".map(u32::from).as_slice(), 1))], 10), vec![(l, 1)]);
        assert_eq!(s.version, 1);
        assert!(s.deploy(vec![(l, entry(b"OK\r\n".map(u32::from).as_slice(), 1))], 20).is_empty());
        assert_eq!(s.version, 1);
        s.deploy(vec![(l, entry(&[1], 2))], 30);
        assert_eq!(s.version, 2);
        assert_eq!(s.entry_total(), 2);
    }

    #[test]
    fn dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ModelStore::default();
        s.deploy(vec![(Label::new(0, 0x4000_0818), entry(&[0x73, 0x74], 1))], 5);
        s.deploy(vec![(Label::new(0x80, 0x4000_0818), entry(&[1], 3))], 9);
        s.write_dir(dir.path()).unwrap();
        assert_eq!(ModelStore::dir_version(dir.path()), 2);
        let back = ModelStore::load_dir(dir.path()).unwrap();
        assert_eq!(back, s);
    }
}
