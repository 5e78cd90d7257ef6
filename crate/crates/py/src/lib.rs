//! Python bindings: targets, single executions, traces, read groups,
//! stateful models and closed-loop campaigns.

use std::sync::Arc;

use pyo3::exceptions::{PyKeyError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use chunkfuzz_core::cluster::{cluster_trace, groups_report, identify_strings};
use chunkfuzz_core::corpus;
use chunkfuzz_core::dse::{run_dse, DseConfig, DseRun};
use chunkfuzz_core::fuzz::{execute, Campaign, CampaignConfig};
use chunkfuzz_core::modelgen::{self, ModelStore};
use chunkfuzz_core::orchestrator::{Budget, Orchestrator as Loop, OrchestratorConfig, Window};
use chunkfuzz_core::taint::record_trace;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A firmware image with its target configuration.
#[pyclass(frozen)]
struct Target {
    inner: Arc<corpus::Target>,
}

#[pymethods]
impl Target {
    /// Corpus name or path to a target config file.
    #[new]
    fn new(spec: &str) -> PyResult<Self> {
        Ok(Target { inner: Arc::new(corpus::Target::load(spec).map_err(value_err)?) })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name().to_string()
    }

    /// Block addresses of the static CFG.
    fn blocks(&self) -> Vec<u32> {
        self.inner.program.cfg.blocks.iter().copied().collect()
    }

    fn symbol(&self, name: &str) -> PyResult<u32> {
        self.inner.image().symbol(name).ok_or_else(|| PyKeyError::new_err(name.to_string()))
    }

    /// Ground-truth name to block addresses.
    fn ground_truth(&self) -> Vec<(String, Vec<u32>)> {
        self.inner.ground_truth.iter().map(|(k, v)| (k.clone(), v.iter().copied().collect())).collect()
    }

    /// Runs one input; returns the verdict and covered blocks.
    #[pyo3(signature = (input, models=None))]
    fn execute(&self, input: &[u8], models: Option<&Models>) -> (String, Vec<u32>) {
        let m = models.map_or_else(|| Arc::new(ModelStore::default()), |m| Arc::new(m.inner.clone()));
        let r = execute(&self.inner, &m, input, 0.0);
        (format!("{:?}", r.verdict).to_lowercase(), r.bbs)
    }

    /// Detailed execution trace in text form.
    fn trace(&self, input: &[u8]) -> String {
        record_trace(&self.inner, &Arc::new(ModelStore::default()), input, 0.0).to_text()
    }

    /// Read groups of an input's trace, with string matches.
    fn groups(&self, input: &[u8]) -> String {
        let trace = record_trace(&self.inner, &Arc::new(ModelStore::default()), input, 0.0);
        groups_report(&cluster_trace(&trace, &identify_strings(self.inner.image())))
    }

    /// Explores the groups of an input's trace towards uncovered blocks.
    /// Returns `(label, group, block, values)` per witness, `None` marking
    /// unconstrained reads.
    #[pyo3(signature = (input, heuristics=true, timeout=60.0))]
    fn explore(&self, input: &[u8], heuristics: bool, timeout: f64) -> Vec<(String, usize, u32, Vec<Option<u32>>)> {
        let models = Arc::new(ModelStore::default());
        let covered = execute(&self.inner, &models, input, 0.0).bbs;
        let wanted = self.inner.program.cfg.blocks.iter().copied().filter(|b| covered.binary_search(b).is_err()).collect();
        let trace = record_trace(&self.inner, &models, input, 0.0);
        let groups = cluster_trace(&trace, &identify_strings(self.inner.image()));
        let run = DseRun { target: &self.inner, models: &models, input, p_skip: 0.0, trace: &trace, groups: &groups };
        let mut cfg = if heuristics { DseConfig::default() } else { DseConfig::vanilla() };
        cfg.timeout = std::time::Duration::from_secs_f64(timeout);
        run_dse(&run, &wanted, &cfg)
            .witnesses
            .into_iter()
            .map(|w| (w.label.key(), w.group_index, w.reached_bb, w.values))
            .collect()
    }

    /// The firmware image as a `.mmcu` container.
    fn container<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.image().to_container())
    }
}

/// A set of stateful MMIO models.
#[pyclass]
#[derive(Clone, Default)]
struct Models {
    inner: ModelStore,
}

#[pymethods]
impl Models {
    #[new]
    fn new() -> Self {
        Models::default()
    }

    #[staticmethod]
    fn load(dir: &str) -> PyResult<Self> {
        Ok(Models { inner: ModelStore::load_dir(std::path::Path::new(dir)).map_err(value_err)? })
    }

    /// Adds a model in its text form, replacing any model of the same label.
    fn add_text(&mut self, text: &str) -> PyResult<()> {
        let m = modelgen::StatefulModel::parse(text).map_err(value_err)?;
        self.inner.models.insert(m.label, m);
        Ok(())
    }

    fn labels(&self) -> Vec<String> {
        self.inner.models.keys().map(|l| l.key()).collect()
    }

    fn text(&self, label: &str) -> PyResult<String> {
        let l = modelgen::Label::parse_key(label).ok_or_else(|| value_err(format!("bad label {label}")))?;
        self.inner.models.get(&l).map(|m| m.serialize()).ok_or_else(|| PyKeyError::new_err(label.to_string()))
    }

    /// Entry index a selection byte picks for a label.
    fn select(&self, label: &str, z: u8) -> PyResult<usize> {
        let l = modelgen::Label::parse_key(label).ok_or_else(|| value_err(format!("bad label {label}")))?;
        let m = self.inner.models.get(&l).ok_or_else(|| PyKeyError::new_err(label.to_string()))?;
        Ok(modelgen::select_model(m, z).z)
    }

    fn entry_total(&self) -> usize {
        self.inner.entry_total()
    }
}

/// A fuzzing campaign, optionally generating models on stagnation.
#[pyclass(unsendable)]
struct Fuzzer {
    inner: Loop,
}

#[pymethods]
impl Fuzzer {
    #[new]
    #[pyo3(signature = (target, seed=0, esfuzz=true, window=50_000))]
    fn new(target: &Target, seed: u64, esfuzz: bool, window: u64) -> Self {
        let c = Campaign::new(
            Arc::clone(&target.inner),
            Arc::new(ModelStore::default()),
            CampaignConfig { seed, exec_clock: true, ..Default::default() },
        );
        let cfg = OrchestratorConfig { window: Window { execs: Some(window), time: None }, enabled: esfuzz, ..Default::default() };
        Fuzzer { inner: Loop::new(c, cfg) }
    }

    fn run(&mut self, execs: u64) -> PyResult<()> {
        self.inner.run(Budget { execs: Some(execs), time: None }).map_err(value_err)
    }

    #[getter]
    fn execs(&self) -> u64 {
        self.inner.campaign.execs
    }

    fn coverage(&self) -> Vec<u32> {
        self.inner.campaign.global.iter().copied().collect()
    }

    fn queue_len(&self) -> usize {
        self.inner.campaign.queue.len()
    }

    fn models(&self) -> Models {
        Models { inner: (**self.inner.campaign.models()).clone() }
    }

    fn log_csv(&self) -> String {
        self.inner.campaign.log_csv()
    }

    /// Pipeline runs so far as `(run, testcase, witnesses, deployed)`.
    fn runs(&self) -> Vec<(u64, u64, usize, usize)> {
        self.inner.runs.iter().map(|r| (r.run, r.testcase, r.witnesses, r.deployed)).collect()
    }
}

#[pyfunction]
fn list_targets() -> Vec<&'static str> {
    corpus::list_targets()
}

#[pymodule]
fn chunkfuzz(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Target>()?;
    m.add_class::<Models>()?;
    m.add_class::<Fuzzer>()?;
    m.add_function(wrap_pyfunction!(list_targets, m)?)?;
    Ok(())
}
