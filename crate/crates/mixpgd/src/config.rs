//! Run configuration: YAML or JSON files, `key.path=value` overrides, and a
//! content hash of the effective configuration. Unknown fields are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::AttackConfig;
use crate::audio::MelConfig;
use crate::losses::SinkhornConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training manifest (CSV with id,audio_path,transcript). When unset, a
    /// synthetic corpus of `synth_n` utterances is generated instead.
    pub manifest: Option<PathBuf>,
    /// Evaluation manifest; defaults to the training data when unset.
    pub eval_manifest: Option<PathBuf>,
    pub synth_seed: u64,
    pub synth_n: usize,
    pub mel: MelConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: None,
            eval_manifest: None,
            synth_seed: 0,
            synth_n: 32,
            mel: MelConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub batch_size: usize,
    pub attacks: Vec<AttackConfig>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            batch_size: 10,
            attacks: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Directory for checkpoints, logs, and reports.
    pub run_dir: Option<PathBuf>,
    /// Identifier used in report rows; defaults to the regime name.
    pub model_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sinkhorn: SinkhornConfig,
    pub eval: EvalSection,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate(crate::alphabet::Alphabet::default().len())?;
        self.train.validate()?;
        for a in &self.eval.attacks {
            a.validate()?;
        }
        if self.model.mel_bins != self.data.mel.mel_bins {
            return Err(Error::Config(format!(
                "model.mel_bins ({}) must match data.mel.mel_bins ({})",
                self.model.mel_bins, self.data.mel.mel_bins
            )));
        }
        Ok(())
    }

    pub fn model_id(&self) -> String {
        self.output
            .model_id
            .clone()
            .unwrap_or_else(|| self.train.regime.to_string())
    }

    /// SHA-256 (truncated) of the effective configuration; stable under
    /// serialize/reload round trips.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("run config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        format!("{:x}", hasher.finalize())[..16].to_string()
    }
}

fn file_to_json_value(path: &Path) -> Result<serde_json::Value> {
    let text = std::fs::read_to_string(path)?;
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    let value = match ext.as_str() {
        "json" => serde_json::from_str::<serde_json::Value>(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
        "yaml" | "yml" | "" => {
            let y: serde_yaml::Value = serde_yaml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            serde_json::to_value(y)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        other => {
            return Err(Error::Config(format!(
                "unsupported config extension '.{other}' (expected .yaml, .yml, or .json)"
            )))
        }
    };
    Ok(value)
}

/// Apply one `dotted.path=value` override in place. The value is parsed as
/// JSON when possible, falling back to a plain string.
pub fn apply_override(root: &mut serde_json::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' is not of the form key=value")))?;
    if path.is_empty() {
        return Err(Error::Config(format!("override '{spec}' has an empty key")));
    }
    let value: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cursor = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !cursor.is_object() {
            return Err(Error::Config(format!(
                "override '{path}': '{}' is not a section",
                parts[..i].join(".")
            )));
        }
        let map = cursor.as_object_mut().unwrap();
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        cursor = map
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!()
}

/// Load a run configuration, apply `key=value` overrides, and validate.
/// Unknown keys anywhere in the file or the overrides are errors.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let mut value = file_to_json_value(path)?;
    if !value.is_object() {
        return Err(Error::Config(format!(
            "{}: top level must be a mapping",
            path.display()
        )));
    }
    for spec in overrides {
        apply_override(&mut value, spec)?;
    }
    let cfg: RunConfig = serde_json::from_value(value)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// A configuration built purely from defaults plus overrides.
pub fn config_from_overrides(overrides: &[String]) -> Result<RunConfig> {
    let mut value = serde_json::to_value(RunConfig::default())?;
    for spec in overrides {
        apply_override(&mut value, spec)?;
    }
    let cfg: RunConfig = serde_json::from_value(value)
        .map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::Regime;

    #[test]
    fn defaults_validate() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.model_id(), "standard");
    }

    #[test]
    fn yaml_and_json_roundtrip_same_hash() {
        let cfg = RunConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let ypath = dir.path().join("run.yaml");
        let jpath = dir.path().join("run.json");
        std::fs::write(&ypath, serde_yaml::to_string(&cfg).unwrap()).unwrap();
        std::fs::write(&jpath, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        let y = load_config(&ypath, &[]).unwrap();
        let j = load_config(&jpath, &[]).unwrap();
        assert_eq!(y.hash(), cfg.hash());
        assert_eq!(j.hash(), cfg.hash());
    }

    #[test]
    fn overrides_change_nested_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.yaml");
        std::fs::write(&path, serde_yaml::to_string(&RunConfig::default()).unwrap()).unwrap();
        let cfg = load_config(
            &path,
            &[
                "train.epsilon=0.01".to_string(),
                "train.regime=mixpgd".to_string(),
                "model.rnn_hidden=32".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.epsilon, 0.01);
        assert_eq!(cfg.train.regime, Regime::Mixpgd);
        assert_eq!(cfg.model.rnn_hidden, 32);
        assert_ne!(cfg.hash(), RunConfig::default().hash());
    }

    #[test]
    fn unknown_keys_fail_closed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.yaml");
        std::fs::write(&path, "train:\n  lerning_rate: 0.1\n").unwrap();
        assert!(load_config(&path, &[]).is_err());
        // unknown key through an override fails too
        let ok = dir.path().join("ok.yaml");
        std::fs::write(&ok, serde_yaml::to_string(&RunConfig::default()).unwrap()).unwrap();
        assert!(load_config(&ok, &["train.nope=1".to_string()]).is_err());
    }

    #[test]
    fn malformed_override_rejected(){
        let mut v = serde_json::to_value(RunConfig::default()).unwrap();
        assert!(apply_override(&mut v, "no_equals_sign").is_err());
        assert!(apply_override(&mut v, "=5").is_err());
    }

    #[test]
    fn string_values_pass_through() {
        let cfg = config_from_overrides(&["output.model_id=baseline".to_string()]).unwrap();
        assert_eq!(cfg.model_id(), "baseline");
    }

    #[test]
    fn mel_bins_mismatch_rejected() {
        let r = config_from_overrides(&["model.mel_bins=32".to_string()]);
        assert!(r.is_err());
    }
}
