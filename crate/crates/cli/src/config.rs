use std::path::{Path, PathBuf};

use alnk_core::analysis::MissingPolicy;
use alnk_core::evaluate::EvalConfig;
use alnk_core::heuristics::MfConfig;
use alnk_core::ranker::RankerConfig;
use alnk_core::splits::SplitMode;
use alnk_core::synthetic::PlantedConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub nodes: PathBuf,
    pub edges: PathBuf,
    pub embeddings: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { nodes: "nodes.jsonl".into(), edges: "edges.jsonl".into(), embeddings: "embeddings.bin".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub settings: Vec<SplitMode>,
    pub test: f64,
    pub dev: f64,
    /// Fraction of eligible models held out in the inductive setting.
    pub held_out_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { settings: vec![SplitMode::Transductive, SplitMode::Inductive], test: 0.2, dev: 0.1, held_out_fraction: 0.2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    RankScore,
    AttrOnly,
    LinkOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscoveryConfig {
    pub budget: usize,
    pub oracle: Option<PathBuf>,
    pub score: ScoreKind,
    /// Which trained model ranks candidates.
    pub setting: SplitMode,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self { budget: 10, oracle: None, score: ScoreKind::RankScore, setting: SplitMode::Transductive }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub missing_policy: MissingPolicy,
    /// Fixed metric for matrix cells; each dataset's most frequent otherwise.
    pub metric: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run_id: String,
    pub out_dir: PathBuf,
    /// Single source of randomness: splits, negatives, initialisation and
    /// dropout all derive from it.
    pub seed: u64,
    pub data: DataConfig,
    pub split: SplitConfig,
    pub ranker: RankerConfig,
    pub mf: MfConfig,
    pub eval: EvalConfig,
    pub discovery: DiscoveryConfig,
    pub analysis: AnalysisConfig,
    pub synth: PlantedConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            out_dir: "out".into(),
            seed: 42,
            data: DataConfig::default(),
            split: SplitConfig::default(),
            ranker: RankerConfig::default(),
            mf: MfConfig::default(),
            eval: EvalConfig::default(),
            discovery: DiscoveryConfig::default(),
            analysis: AnalysisConfig::default(),
            synth: PlantedConfig::default(),
        }
    }
}

fn pointer(path: &str) -> String {
    if path == "." || path.is_empty() {
        return String::new();
    }
    path.split('.').map(|seg| format!("/{seg}")).collect()
}

/// Applies `a.b.c=value`; the value is parsed as JSON, else taken as a string.
fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config { pointer: String::new(), msg: format!("--set {assignment:?}: expected KEY=VALUE") })?;
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let segs: Vec<&str> = key.split('.').collect();
    for (i, seg) in segs.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| CliError::Config {
            pointer: pointer(&segs[..i].join(".")),
            msg: "not an object".into(),
        })?;
        if i + 1 == segs.len() {
            obj.insert(seg.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(seg.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Parses a config document, reporting the offending key as a JSON pointer.
pub fn from_value(doc: Value) -> Result<RunConfig, CliError> {
    let cfg: RunConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
        let mut p = pointer(&e.path().to_string());
        let msg = e.inner().to_string();
        if let Some(rest) = msg.strip_prefix("unknown field `") {
            // Some deserializer paths already end at the unknown key.
            if let Some(name) = rest.split('`').next().filter(|n| !p.ends_with(&format!("/{n}"))) {
                p.push('/');
                p.push_str(name);
            }
        }
        CliError::Config { pointer: p, msg }
    })?;
    cfg.ranker.validate().map_err(|e| CliError::Config { pointer: "/ranker".into(), msg: e.to_string() })?;
    if cfg.split.settings.is_empty() {
        return Err(CliError::Config { pointer: "/split/settings".into(), msg: "at least one setting".into() });
    }
    if cfg.discovery.budget == 0 {
        return Err(CliError::Config { pointer: "/discovery/budget".into(), msg: "budget must be at least 1".into() });
    }
    Ok(cfg)
}

fn absolutize(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

/// Loads the config file (or defaults), applies overrides and resolves
/// relative data paths against the config's directory.
pub fn resolve(
    path: Option<&Path>,
    sets: &[String],
    out: Option<&Path>,
    seed: Option<u64>,
) -> Result<RunConfig, CliError> {
    let (mut doc, base) = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|_| CliError::MissingArtifact(p.to_path_buf()))?;
            let doc: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Config { pointer: String::new(), msg: format!("{}: {e}", p.display()) })?;
            (doc, p.parent().map(Path::to_path_buf).unwrap_or_default())
        }
        None => (Value::Object(Default::default()), PathBuf::new()),
    };
    for s in sets {
        apply_override(&mut doc, s)?;
    }
    let mut cfg = from_value(doc)?;
    if let Some(o) = out {
        cfg.out_dir = o.to_path_buf();
    } else {
        absolutize(&base, &mut cfg.out_dir);
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.ranker.train.seed = cfg.seed;
    for p in [&mut cfg.data.nodes, &mut cfg.data.edges, &mut cfg.data.embeddings] {
        absolutize(&base, p);
    }
    if let Some(o) = cfg.discovery.oracle.as_mut() {
        absolutize(&base, o);
    }
    Ok(cfg)
}
