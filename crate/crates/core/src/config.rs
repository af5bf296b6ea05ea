//! Pipeline configuration: one JSON document drives a whole run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataengine::DistractorRule;
use crate::error::{Error, Result};
use crate::evalkit::DetectionWeighting;
use crate::expert::ExpertHyper;
use crate::fusion::AdapterHyper;
use crate::io::read_json;
use crate::synthgen::SynthConfig;

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "ILRKIT_CONFIG";

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Optional external inputs. Any view left unset is synthesized.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputPaths {
    pub general: Option<PathBuf>,
    pub raw: Option<PathBuf>,
    pub tokens: Option<PathBuf>,
    /// Precomputed expert embeddings; skips expert training when set.
    pub expert: Option<PathBuf>,
    /// JSONL of caption/image/reference embedding triples.
    pub captions: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionConfig {
    pub n_tasks: usize,
    pub positive_rate: f64,
    pub weighting: DetectionWeighting,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig {
            n_tasks: 500,
            positive_rate: 0.5,
            weighting: DetectionWeighting::SampleCount,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub inputs: InputPaths,
    pub synth: SynthConfig,
    pub test_fraction: f64,
    pub k: usize,
    pub tau: f64,
    pub taus: Vec<f64>,
    /// Gallery tasks per category and split.
    pub n_tasks: usize,
    pub distractor_rule: DistractorRule,
    pub detection: DetectionConfig,
    pub expert: ExpertHyper,
    pub adapter: AdapterHyper,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            output_dir: PathBuf::from("ilrkit-out"),
            inputs: InputPaths::default(),
            synth: SynthConfig::default(),
            test_fraction: 0.3,
            k: 5,
            tau: 0.5,
            taus: vec![0.2, 0.5, 0.8],
            n_tasks: 500,
            distractor_rule: DistractorRule::Uniform,
            detection: DetectionConfig::default(),
            expert: ExpertHyper::default(),
            adapter: AdapterHyper::default(),
        }
    }
}

fn tau_ok(t: f64) -> bool {
    (0.0..1.0).contains(&t)
}

impl PipelineConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.k < 2 {
            v.push(format!("k must be >= 2, got {} (use build-detection for single-image tasks)", self.k));
        }
        if !tau_ok(self.tau) {
            v.push(format!("tau must be in [0, 1), got {}", self.tau));
        }
        if self.taus.len() < 2 {
            v.push("taus needs at least two values".into());
        }
        for t in &self.taus {
            if !tau_ok(*t) {
                v.push(format!("taus entries must be in [0, 1), got {t}"));
            }
        }
        if self.n_tasks == 0 {
            v.push("n_tasks must be >= 1".into());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            v.push(format!("test_fraction must be in (0, 1), got {}", self.test_fraction));
        }
        if self.detection.n_tasks == 0 {
            v.push("detection.n_tasks must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.detection.positive_rate) {
            v.push("detection.positive_rate must be in [0, 1]".into());
        }
        if self.output_dir.as_os_str().is_empty() {
            v.push("output_dir must not be empty".into());
        }
        let i = &self.inputs;
        if i.general.is_some() != i.tokens.is_some() {
            v.push("inputs.general and inputs.tokens must be given together".into());
        }
        if i.general.is_some() && i.raw.is_none() && i.expert.is_none() {
            v.push("external inputs need inputs.raw (to train an expert) or inputs.expert".into());
        }
        if i.general.is_none() && (i.raw.is_some() || i.expert.is_some()) {
            v.push("inputs.raw / inputs.expert require inputs.general and inputs.tokens".into());
        }
        if i.general.is_none() {
            v.extend(self.synth.violations());
        }
        v.extend(self.expert.violations());
        v.extend(self.adapter.violations());
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))
    }

    /// Explicit path, else `$ILRKIT_CONFIG`, else defaults.
    pub fn resolve(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) if !p.is_empty() => Self::load(Path::new(&p)),
                _ => Ok(Self::default()),
            },
        }
    }

    /// The config with run-location fields cleared; outputs depend only on this.
    pub fn normalized(&self) -> Self {
        PipelineConfig {
            output_dir: PathBuf::new(),
            ..self.clone()
        }
    }

    /// SHA-256 of the canonical JSON serialization of [`Self::normalized`].
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(&self.normalized()).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Read any JSON config fragment with the config error class.
pub fn read_config_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    read_json(path).map_err(|e| match e {
        Error::Malformed { location, message } => Error::Config(vec![format!("{location}: {message}")]),
        other => other,
    })
}
