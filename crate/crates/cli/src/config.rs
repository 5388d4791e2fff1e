use std::path::{Path, PathBuf};

use epiforge::cleirnet::CleirConfig;
use epiforge::dependency::MiConfig;
use epiforge::seir::{MixParams, ParamRanges};
use epiforge::tdefsi::{Arm, TdefsiConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config {path} is not valid TOML: {message}")]
    Syntax { path: PathBuf, message: String },
    #[error("unknown config keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error("invalid config: {}", .0.join("; "))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Simulate,
    GenCorpus,
    TrainCleirnet,
    TrainTdefsi,
    Forecast,
    Evaluate,
    Dependency,
    Select,
    SweepDelta,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Simulate,
        Stage::GenCorpus,
        Stage::TrainCleirnet,
        Stage::TrainTdefsi,
        Stage::Forecast,
        Stage::Evaluate,
        Stage::Dependency,
        Stage::Select,
        Stage::SweepDelta,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::GenCorpus => "gen-corpus",
            Stage::TrainCleirnet => "train-cleirnet",
            Stage::TrainTdefsi => "train-tdefsi",
            Stage::Forecast => "forecast",
            Stage::Evaluate => "evaluate",
            Stage::Dependency => "dependency",
            Stage::Select => "select",
            Stage::SweepDelta => "sweep-delta",
            Stage::Report => "report",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    CountyFeatures,
    Jhu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// County table; a synthetic table is generated when absent.
    pub counties: Option<PathBuf>,
    pub format: DataFormat,
    /// Feature CSV joined onto a JHU county table.
    pub features: Option<PathBuf>,
    /// Cumulative cases in JHU layout; defaults to the simulated series.
    pub cases: Option<PathBuf>,
    /// `fips_a,fips_b` edge list; defaults to nearest neighbours.
    pub adjacency: Option<PathBuf>,
    /// Defaults to true for JHU input.
    pub drop_aggregated_nyc: Option<bool>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            counties: None,
            format: DataFormat::CountyFeatures,
            features: None,
            cases: None,
            adjacency: None,
            drop_aggregated_nyc: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_counties: usize,
    pub n_states: usize,
    pub population: (f64, f64),
    pub density: (f64, f64),
    /// Neighbours per county in the generated adjacency.
    pub neighbors: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_counties: 20,
            n_states: 4,
            population: (1e4, 1e5),
            density: (80.0, 125.0),
            neighbors: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub days: usize,
    pub h: f64,
    /// First date label of the simulated series, `YYYY-MM-DD`.
    pub start_date: String,
    pub params: MixParams,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            days: 150,
            h: 0.25,
            start_date: "2020-01-22".into(),
            params: MixParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_train: usize,
    pub n_valid: usize,
    pub days: usize,
    pub h: f64,
    pub ranges: ParamRanges,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_train: 32,
            n_valid: 8,
            days: 100,
            h: 0.25,
            ranges: ParamRanges {
                mu_spread: (300.0, 3000.0),
                ..ParamRanges::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CleirSection {
    /// `n_c` is taken from the data.
    pub model: CleirConfig,
    /// Ensemble size.
    pub members: usize,
    /// Train with the county mask written by `select`.
    pub use_mask: bool,
}

impl Default for CleirSection {
    fn default() -> Self {
        Self {
            model: CleirConfig {
                n_tf: 3,
                n_d: 16,
                ..CleirConfig::default()
            },
            members: 5,
            use_mask: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TdefsiSection {
    /// `n_counties` is taken from the corpus.
    pub model: TdefsiConfig,
    pub arms: Vec<Arm>,
    /// Arm used by `forecast`.
    pub forecast_arm: Arm,
}

impl Default for TdefsiSection {
    fn default() -> Self {
        Self {
            model: TdefsiConfig::default(),
            arms: Arm::ALL.to_vec(),
            forecast_arm: Arm::DropoutNonnegSpatial,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DependencySection {
    pub mi: MiConfig,
    /// Threshold used by `select`.
    pub delta: f64,
    /// Thresholds visited by `sweep-delta`, ascending.
    pub deltas: Vec<f64>,
}

impl Default for DependencySection {
    fn default() -> Self {
        Self {
            mi: MiConfig::default(),
            delta: 0.2,
            deltas: (0..=8).map(|i| i as f64 / 10.0).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Stages executed by `run`, in order.
    pub stages: Vec<Stage>,
    pub data: DataConfig,
    pub synthetic: SyntheticConfig,
    pub simulate: SimulateConfig,
    pub corpus: CorpusConfig,
    pub cleirnet: CleirSection,
    pub tdefsi: TdefsiSection,
    pub dependency: DependencySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out: PathBuf::from("epiforge-out"),
            stages: Stage::ALL.to_vec(),
            data: DataConfig::default(),
            synthetic: SyntheticConfig::default(),
            simulate: SimulateConfig::default(),
            corpus: CorpusConfig::default(),
            cleirnet: CleirSection::default(),
            tdefsi: TdefsiSection::default(),
            dependency: DependencySection::default(),
        }
    }
}

/// Dotted paths of keys in `user` that the schema in `known` does not have.
fn overlay(base: &mut serde_json::Value, user: serde_json::Value) {
    match (base, user) {
        (serde_json::Value::Object(b), serde_json::Value::Object(u)) => {
            for (k, v) in u {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn unknown_keys(user: &toml::Table, known: &serde_json::Value, prefix: &str, out: &mut Vec<String>) {
    let Some(known) = known.as_object() else { return };
    for (k, v) in user {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match known.get(k) {
            None => out.push(path),
            Some(schema) => {
                if let (toml::Value::Table(t), serde_json::Value::Object(_)) = (v, schema) {
                    unknown_keys(t, schema, &path, out);
                }
            }
        }
    }
}

impl RunConfig {
    pub fn parse_str(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let schema = serde_json::to_value(RunConfig::default()).expect("config serializes");
        let mut unknown = Vec::new();
        unknown_keys(&table, &schema, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(ConfigError::UnknownKeys(unknown));
        }
        // Typed first pass for located error messages.
        toml::from_str::<RunConfig>(text).map_err(|e| ConfigError::Syntax {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        // Nested tables override section defaults key by key.
        let mut merged = schema;
        overlay(&mut merged, serde_json::to_value(&table).expect("toml converts"));
        serde_json::from_value(merged).map_err(|e| ConfigError::Syntax {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Reads, checks and resolves data paths relative to the config file.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::parse_str(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut config.data.counties,
            &mut config.data.features,
            &mut config.data.cases,
            &mut config.data.adjacency,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if config.out.is_relative() {
            config.out = base.join(&config.out);
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut problems = Vec::new();
        let mut check = |what: &str, r: epiforge::Result<()>| {
            if let Err(e) = r {
                problems.push(format!("{what}: {e}"));
            }
        };
        check("simulate.params", self.simulate.params.validate());
        check("corpus.ranges", self.corpus.ranges.validate());
        check("tdefsi.model", self.tdefsi.model.validate());
        check("dependency.mi", self.dependency.mi.validate());
        let cleir = CleirConfig { n_c: 1, ..self.cleirnet.model.clone() };
        check("cleirnet.model", cleir.validate());
        if self.cleirnet.model.n_x > epiforge::geo::FEATURE_NAMES.len() {
            problems.push(format!(
                "cleirnet.model.n_x: at most {} county features are available",
                epiforge::geo::FEATURE_NAMES.len()
            ));
        }
        if self.cleirnet.members == 0 {
            problems.push("cleirnet.members must be at least 1".into());
        }
        if self.synthetic.n_counties == 0 || self.synthetic.n_states == 0 {
            problems.push("synthetic.n_counties and synthetic.n_states must be at least 1".into());
        }
        if self.simulate.days < 2 {
            problems.push("simulate.days must be at least 2".into());
        }
        for (what, h) in [("simulate.h", self.simulate.h), ("corpus.h", self.corpus.h)] {
            let steps = 1.0 / h;
            if !(h > 0.0 && h <= 1.0 && (steps - steps.round()).abs() < 1e-9) {
                problems.push(format!("{what} must be 1/m for a positive integer m, got {h}"));
            }
        }
        if start_date(&self.simulate.start_date).is_none() {
            problems.push(format!("simulate.start_date `{}` is not YYYY-MM-DD", self.simulate.start_date));
        }
        if self.corpus.n_train == 0 {
            problems.push("corpus.n_train must be at least 1".into());
        }
        if self.corpus.days < 2 {
            problems.push("corpus.days must be at least 2".into());
        }
        if self.tdefsi.arms.is_empty() {
            problems.push("tdefsi.arms must not be empty".into());
        }
        if !(0.0..=1.0).contains(&self.dependency.delta) {
            problems.push("dependency.delta must lie in [0, 1]".into());
        }
        if self.dependency.deltas.windows(2).any(|w| w[0] > w[1])
            || self.dependency.deltas.iter().any(|d| !(0.0..=1.0).contains(d))
        {
            problems.push("dependency.deltas must be ascending values in [0, 1]".into());
        }
        if self.data.format == DataFormat::Jhu && self.data.counties.is_some() && self.data.features.is_none() {
            problems.push("data.features is required for a JHU county table".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(problems))
        }
    }

    /// Hash of the fully defaulted config, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

pub fn start_date(s: &str) -> Option<chrono::NaiveDate> {
    chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d").ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        RunConfig::parse_str(text, Path::new("test.toml"))
    }

    #[test]
    fn empty_config_is_all_defaults() {
        assert_eq!(parse("").unwrap(), RunConfig::default());
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn every_unknown_key_is_reported() {
        let err = parse("sed = 3\n[cleirnet.model]\nn_dd = 4\n[tdefsi]\nbogus = 1\n").unwrap_err();
        match err {
            ConfigError::UnknownKeys(keys) => {
                assert_eq!(keys.len(), 3);
                assert!(keys.contains(&"sed".to_string()));
                assert!(keys.contains(&"cleirnet.model.n_dd".to_string()));
                assert!(keys.contains(&"tdefsi.bogus".to_string()));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn partial_tables_keep_defaults() {
        let c = parse("seed = 9\n[cleirnet.model]\nn_d = 4\n[corpus.ranges]\nsigma = [0.2, 0.3]\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.cleirnet.model.n_d, 4);
        assert_eq!(c.cleirnet.model.n_tf, 3);
        assert_eq!(c.corpus.ranges.sigma, (0.2, 0.3));
        assert_eq!(c.corpus.ranges.gamma, ParamRanges::default().gamma);
    }

    #[test]
    fn validation_lists_all_problems() {
        let c = parse("[dependency]\ndelta = 2.0\ndeltas = [0.5, 0.1]\n[cleirnet]\nmembers = 0\n").unwrap();
        match c.validate().unwrap_err() {
            ConfigError::Invalid(p) => assert_eq!(p.len(), 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn hash_ignores_output_directory() {
        let a = parse("out = \"x\"").unwrap();
        let b = parse("out = \"y\"").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), parse("seed = 2").unwrap().hash());
    }

    #[test]
    fn readme_schema_matches_defaults() {
        let readme = include_str!("../../../README.md");
        let start = readme.find("```toml\n").expect("toml block") + 8;
        let len = readme[start..].find("```").unwrap();
        assert_eq!(parse(&readme[start..start + len]).unwrap(), RunConfig::default());
    }
}
