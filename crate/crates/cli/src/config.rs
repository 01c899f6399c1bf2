use std::path::{Path, PathBuf};

use gpaslab::schemes::{ModelConfig, SchemeConfig};
use gpaslab::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const RESOLVED_CONFIG: &str = "resolved-config.json";
pub const OUT_ENV: &str = "GPASLAB_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_name: String,
    /// Root under which `run_name` is created. `GPASLAB_OUT` overrides it.
    pub output_dir: PathBuf,
    pub data_path: PathBuf,
    /// Layer metrics are captured every this many steps.
    pub instrument_interval: usize,
    /// JSON array with one alpha per layer, loaded before training.
    pub gates_init: Option<PathBuf>,
    pub model: ModelConfig,
    pub scheme: SchemeConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_name: "run".into(),
            output_dir: "runs".into(),
            data_path: "data/sotu.txt".into(),
            instrument_interval: 10,
            gates_init: None,
            model: ModelConfig::default(),
            scheme: SchemeConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("config not found: {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    /// Fills derived defaults and checks everything before any compute.
    pub fn resolve(&mut self) -> Result<(), CliError> {
        self.model.resolve();
        self.scheme.resolve(self.model.n_layers);
        self.model.validate()?;
        self.scheme.validate(self.model.n_layers)?;
        self.train.validate()?;
        if self.instrument_interval == 0 {
            return Err(CliError::Usage("instrument_interval must be positive".into()));
        }
        if self.run_name.is_empty() || self.run_name.contains(['/', '\\']) {
            return Err(CliError::Usage(format!("invalid run_name {:?}", self.run_name)));
        }
        if self.train.seq_len > self.model.max_seq_len {
            return Err(CliError::Usage(format!(
                "seq_len {} exceeds max_seq_len {}",
                self.train.seq_len, self.model.max_seq_len
            )));
        }
        if self.gates_init.is_some() && !self.scheme.gpas_enabled {
            return Err(CliError::Usage("gates_init requires scheme.gpas_enabled".into()));
        }
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_name)
    }
}

/// Output root: explicit flag, then `GPASLAB_OUT`, then the fallback.
pub fn output_root(flag: Option<&Path>, fallback: &Path) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match std::env::var_os(OUT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => fallback.to_path_buf(),
    }
}

pub fn load_gates(path: &Path, n_layers: usize) -> Result<Vec<f64>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("gates file not found: {}: {e}", path.display())))?;
    let alphas: Vec<f64> = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("gates file {} must be a JSON array of numbers: {e}", path.display())))?;
    if alphas.len() != n_layers {
        return Err(CliError::Usage(format!(
            "gates file has {} values for {n_layers} layers",
            alphas.len()
        )));
    }
    if let Some(a) = alphas.iter().find(|a| !a.is_finite()) {
        return Err(CliError::Usage(format!("non-finite gate value {a}")));
    }
    Ok(alphas)
}

/// Parses an enum from its serialized name, e.g. "PreLN" or "f32".
pub fn parse_named<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

/// `SiLU`, `ReLU`, ... or `ScaledSiLU:<beta>`.
pub fn parse_activation(s: &str) -> Result<gpaslab::autodiff::GateActivation, String> {
    let v = match s.split_once(':') {
        Some((kind, beta)) => {
            let beta: f64 = beta.parse().map_err(|e| format!("bad beta {beta:?}: {e}"))?;
            serde_json::json!({ "kind": kind, "beta": beta })
        }
        None => serde_json::json!({ "kind": s }),
    };
    serde_json::from_value(v).map_err(|e| e.to_string())
}
