//! Sample firmware with target configs and ground truth.
//!
//! Target config files are `key = value` lines; `#` starts a comment.
//!
//! | key | value |
//! |-----|-------|
//! | `name` | target name |
//! | `source` | assembly or `.mmcu` container file, relative to the config |
//! | `ram_size` | RAM bytes (default `0x1000`) |
//! | `stack_size` | bytes below the initial SP treated as stack (default `0x400`) |
//! | `max_bbs` | block budget per execution (default 2^20) |
//! | `irq` | `<id>,<K>`: raise IRQ `id` every `K` block entries |
//! | `stateless_model.<addr>` | `passthrough`, `constant:<v>` or `bitextract:<mask>,<shift>,<size>` |
//! | `reg.<addr>` | `dr`, `sr` or `cr` |
//! | `ground_truth.<name>` | comma-separated labels of wanted blocks |
//! | `chunk.<name>` | an expected data chunk, as text |

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use crate::fuzz::model::parse_u32;
use crate::fuzz::BaselineModel;
use crate::isa::image::DEFAULT_RAM_SIZE;
use crate::isa::{assemble, AsmError, FirmwareImage};
use crate::vm::{Program, VmConfig, DEFAULT_IRQ_PERIOD, DEFAULT_MAX_BBS};

pub const DEFAULT_STACK_SIZE: u32 = 0x400;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("unknown target `{0}`")]
    Unknown(String),
    #[error("{0}: {1}")]
    Assembly(String, AsmError),
    #[error("config line {0}: {1}")]
    Config(usize, String),
    #[error("ground truth `{0}` names `{1}`, which is not a block")]
    GroundTruth(String, String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RegKind {
    Data,
    Status,
    Control,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetConfig {
    pub name: String,
    pub source: String,
    pub ram_size: u32,
    pub stack_size: u32,
    pub max_bbs: u64,
    pub irq: Option<(u8, u64)>,
    pub stateless_models: BTreeMap<u32, BaselineModel>,
    pub reg_kinds: BTreeMap<u32, RegKind>,
    pub ground_truth: BTreeMap<String, Vec<String>>,
    pub chunks: BTreeMap<String, Vec<u8>>,
}

impl Default for TargetConfig {
    fn default() -> Self {
        TargetConfig {
            name: String::new(),
            source: String::new(),
            ram_size: DEFAULT_RAM_SIZE,
            stack_size: DEFAULT_STACK_SIZE,
            max_bbs: DEFAULT_MAX_BBS,
            irq: None,
            stateless_models: BTreeMap::new(),
            reg_kinds: BTreeMap::new(),
            ground_truth: BTreeMap::new(),
            chunks: BTreeMap::new(),
        }
    }
}

impl TargetConfig {
    pub fn parse(text: &str) -> Result<TargetConfig, CorpusError> {
        let mut c = TargetConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |m: String| CorpusError::Config(line, m);
            let l = raw.split('#').next().unwrap().trim();
            if l.is_empty() {
                continue;
            }
            let Some((k, v)) = l.split_once('=') else {
                return Err(err(format!("expected key = value, got `{l}`")));
            };
            let (k, v) = (k.trim(), v.trim());
            match k {
                "name" => c.name = v.to_string(),
                "source" => c.source = v.to_string(),
                "ram_size" => c.ram_size = parse_u32(v).map_err(err)?,
                "stack_size" => c.stack_size = parse_u32(v).map_err(err)?,
                "max_bbs" => c.max_bbs = parse_u32(v).map_err(err)? as u64,
                "irq" => {
                    let (id, k) = v.split_once(',').unwrap_or((v, ""));
                    let id = parse_u32(id).map_err(err)?;
                    if id >= 16 {
                        return Err(err(format!("irq {id} out of range")));
                    }
                    let k = if k.trim().is_empty() { DEFAULT_IRQ_PERIOD } else { parse_u32(k).map_err(err)? as u64 };
                    c.irq = Some((id as u8, k));
                }
                _ => {
                    if let Some(a) = k.strip_prefix("stateless_model.") {
                        let addr = parse_u32(a).map_err(err)?;
                        c.stateless_models.insert(addr, v.parse().map_err(err)?);
                    } else if let Some(a) = k.strip_prefix("reg.") {
                        let addr = parse_u32(a).map_err(err)?;
                        let kind = match v {
                            "dr" => RegKind::Data,
                            "sr" => RegKind::Status,
                            "cr" => RegKind::Control,
                            _ => return Err(err(format!("unknown register kind `{v}`"))),
                        };
                        c.reg_kinds.insert(addr, kind);
                    } else if let Some(n) = k.strip_prefix("ground_truth.") {
                        let labels = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty());
                        c.ground_truth.insert(n.to_string(), labels.collect());
                    } else if let Some(n) = k.strip_prefix("chunk.") {
                        c.chunks.insert(n.to_string(), v.as_bytes().to_vec());
                    } else {
                        return Err(err(format!("unknown key `{k}`")));
                    }
                }
            }
        }
        Ok(c)
    }

    pub fn vm_config(&self) -> VmConfig {
        VmConfig { irq: self.irq, max_bbs: self.max_bbs }
    }
}

/// An assembled target ready to execute.
#[derive(Debug, Clone)]
pub struct Target {
    pub config: TargetConfig,
    pub program: Arc<Program>,
    /// Ground-truth block sets, resolved to addresses.
    pub ground_truth: BTreeMap<String, BTreeSet<u32>>,
}

impl Target {
    pub fn build(config: TargetConfig, source: &str) -> Result<Target, CorpusError> {
        let mut image: FirmwareImage =
            assemble(source).map_err(|e| CorpusError::Assembly(config.name.clone(), e))?;
        image.ram_size = config.ram_size;
        if image.initial_sp() == crate::isa::image::RAM_BASE + DEFAULT_RAM_SIZE {
            let sp = image.ram_end();
            image.code[0..4].copy_from_slice(&sp.to_le_bytes());
        }
        image.stateless_models = config.stateless_models.clone();
        Target::from_image(config, image)
    }

    pub fn from_image(config: TargetConfig, image: FirmwareImage) -> Result<Target, CorpusError> {
        let program = Program::new(image);
        let mut ground_truth = BTreeMap::new();
        for (name, labels) in &config.ground_truth {
            let mut set = BTreeSet::new();
            for l in labels {
                match program.image.symbol(l) {
                    Some(a) if program.cfg.blocks.contains(&a) => {
                        set.insert(a);
                    }
                    _ => return Err(CorpusError::GroundTruth(name.clone(), l.clone())),
                }
            }
            ground_truth.insert(name.clone(), set);
        }
        Ok(Target { config, program, ground_truth })
    }

    /// Loads a config file and the assembly source it names.
    pub fn from_config_file(path: &Path) -> Result<Target, CorpusError> {
        let text = std::fs::read_to_string(path)?;
        let mut config = TargetConfig::parse(&text)?;
        let src_path = path.parent().unwrap_or(Path::new(".")).join(&config.source);
        if config.name.is_empty() {
            config.name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        }
        if src_path.extension().is_some_and(|x| x == "mmcu") {
            let image = FirmwareImage::from_container(&std::fs::read(&src_path)?)
                .map_err(|e| CorpusError::Config(0, format!("{}: {e}", src_path.display())))?;
            return Target::from_image(config, image);
        }
        let source = std::fs::read_to_string(src_path)?;
        Target::build(config, &source)
    }

    /// A corpus name or a path to a target config file.
    pub fn load(spec: &str) -> Result<Target, CorpusError> {
        if list_targets().contains(&spec) {
            build_target(spec)
        } else if Path::new(spec).is_file() {
            Target::from_config_file(Path::new(spec))
        } else {
            Err(CorpusError::Unknown(spec.to_string()))
        }
    }

    pub fn name(&self) -> &str {
        &self.config.name
    }

    pub fn image(&self) -> &FirmwareImage {
        &self.program.image
    }

    /// Lowest address of the stack region.
    pub fn stack_limit(&self) -> u32 {
        self.image().initial_sp().saturating_sub(self.config.stack_size)
    }

    pub fn baseline_model(&self, addr: u32, size: u32) -> BaselineModel {
        self.config.stateless_models.get(&addr).copied().unwrap_or_else(|| BaselineModel::default_for(size))
    }

    pub fn ground_truth_union(&self) -> BTreeSet<u32> {
        self.ground_truth.values().flatten().copied().collect()
    }
}

const CORPUS: &[(&str, &str, &str)] = &[
    ("steering", include_str!("../../corpus/steering.s"), include_str!("../../corpus/steering.cfg")),
    ("doorlock", include_str!("../../corpus/doorlock.s"), include_str!("../../corpus/doorlock.cfg")),
    ("uart-irq-echo", include_str!("../../corpus/uart-irq-echo.s"), include_str!("../../corpus/uart-irq-echo.cfg")),
    ("status-poll", include_str!("../../corpus/status-poll.s"), include_str!("../../corpus/status-poll.cfg")),
    ("infinite-loop", include_str!("../../corpus/infinite-loop.s"), include_str!("../../corpus/infinite-loop.cfg")),
    ("concat-prefix", include_str!("../../corpus/concat-prefix.s"), include_str!("../../corpus/concat-prefix.cfg")),
    ("toy3", include_str!("../../corpus/toy3.s"), include_str!("../../corpus/toy3.cfg")),
    (
        "packet-checksum",
        include_str!("../../corpus/packet-checksum.s"),
        include_str!("../../corpus/packet-checksum.cfg"),
    ),
    ("nested-calls", include_str!("../../corpus/nested-calls.s"), include_str!("../../corpus/nested-calls.cfg")),
    ("two-uarts", include_str!("../../corpus/two-uarts.s"), include_str!("../../corpus/two-uarts.cfg")),
];

pub fn list_targets() -> Vec<&'static str> {
    CORPUS.iter().map(|(n, _, _)| *n).collect()
}

/// Assembly source and config text of a corpus target.
pub fn target_files(name: &str) -> Option<(&'static str, &'static str)> {
    CORPUS.iter().find(|(n, _, _)| *n == name).map(|(_, s, c)| (*s, *c))
}

pub fn build_target(name: &str) -> Result<Target, CorpusError> {
    let (src, cfg) = target_files(name).ok_or_else(|| CorpusError::Unknown(name.to_string()))?;
    let config = TargetConfig::parse(cfg)?;
    Target::build(config, src)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parsing() {
        let c = TargetConfig::parse(
            "name = t\nirq = 3, 50\nstateless_model.0x40000818 = bitextract:0xff,0,1\nreg.0x40000818 = dr\n\
             ground_truth.a = x, y\nchunk.s = steer # comment\n",
        )
        .unwrap();
        assert_eq!(c.irq, Some((3, 50)));
        assert_eq!(c.reg_kinds[&0x4000_0818], RegKind::Data);
        assert_eq!(c.ground_truth["a"], vec!["x", "y"]);
        assert_eq!(c.chunks["s"], b"steer");
        assert!(matches!(TargetConfig::parse("bogus = 1"), Err(CorpusError::Config(1, _))));
        assert!(matches!(TargetConfig::parse("reg.0x1 = zz"), Err(CorpusError::Config(1, _))));
    }

    #[test]
    fn unknown_target() {
        assert!(matches!(build_target("nope"), Err(CorpusError::Unknown(_))));
    }
}
