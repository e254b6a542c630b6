//! Experiment configuration: one TOML document composing the world, model,
//! protocol, and arm settings, plus output bookkeeping.
//!
//! Validation is strict — unknown keys anywhere in the document are
//! rejected — so a typo fails fast instead of silently running defaults.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use driftsel_core::model::ModelConfig;
use driftsel_core::protocol::{ArmSpec, ProtocolConfig};
use driftsel_core::stream::WorldConfig;
use driftsel_core::Error;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Environment variable prepended to relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "DRIFTSEL_OUTPUT_ROOT";

fn default_stream_file() -> String {
    "stream.jsonl".into()
}

/// Where and under which names a run writes its artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Output directory; relative paths resolve against the config file's
    /// directory, or against `DRIFTSEL_OUTPUT_ROOT` when that is set.
    pub dir: PathBuf,
    /// Event-stream file name inside the output directory.
    #[serde(default = "default_stream_file")]
    pub stream_file: String,
}

/// The generation window of the synthetic stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamWindow {
    pub start: NaiveDate,
    /// Defaults to the end of the last evaluation interval.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end: Option<NaiveDate>,
}

/// The full experiment document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub stream: StreamWindow,
    #[serde(default)]
    pub model: ModelConfig,
    pub protocol: ProtocolConfig,
    pub arms: Vec<ArmSpec>,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    /// Generation window end: explicit, or the protocol's final boundary.
    pub fn stream_end(&self) -> NaiveDate {
        self.stream
            .end
            .unwrap_or_else(|| self.protocol.boundary(self.protocol.horizon + 1))
    }

    /// Semantic checks beyond schema shape.
    pub fn validate(&self) -> Result<(), Error> {
        self.protocol.validate()?;
        for arm in &self.arms {
            arm.validate()?;
        }
        let mut names: Vec<&str> = self.arms.iter().map(|a| a.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.arms.len() {
            return Err(Error::config("arms: names must be unique"));
        }
        if self.stream.start >= self.protocol.pretrain_end {
            return Err(Error::config("stream.start must precede protocol.pretrain_end"));
        }
        if self.stream_end() < self.protocol.boundary(self.protocol.horizon + 1) {
            return Err(Error::config(
                "stream.end must cover the final evaluation interval",
            ));
        }
        Ok(())
    }

    /// Output directory resolved against the root env var or the config dir.
    pub fn output_dir(&self, config_dir: &Path) -> PathBuf {
        if self.output.dir.is_absolute() {
            return self.output.dir.clone();
        }
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) => PathBuf::from(root).join(&self.output.dir),
            None => config_dir.join(&self.output.dir),
        }
    }
}

/// Applies one `--set path.to.key=value` override to a parsed TOML tree.
///
/// The value is parsed as TOML when possible (numbers, booleans, arrays) and
/// falls back to a string, so `--set protocol.seed=7` and
/// `--set output.dir=out` both do what they look like.
fn apply_override(root: &mut toml::Value, spec: &str) -> Result<(), Error> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{spec}` is not of the form key=value")))?;
    // A bare scalar is not a TOML document; parse it behind a dummy key and
    // fall back to a plain string (e.g. dates, enum names, paths).
    let value: toml::Value = format!("v = {raw}")
        .parse::<toml::Value>()
        .ok()
        .and_then(|mut t| t.as_table_mut().and_then(|m| m.remove("v")))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));

    let mut node = root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        // Numeric segments index into arrays (e.g. arms.1.budget).
        if let Ok(idx) = seg.parse::<usize>() {
            let arr = node
                .as_array_mut()
                .ok_or_else(|| Error::config(format!("override `{path}`: `{seg}` indexes a non-array")))?;
            node = arr
                .get_mut(idx)
                .ok_or_else(|| Error::config(format!("override `{path}`: index {idx} out of range")))?;
        } else {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::config(format!("override `{path}`: `{seg}` is not a table")))?;
            node = table.entry(seg.to_string()).or_insert(toml::Value::Table(Default::default()));
        }
        if last {
            *node = value;
            return Ok(());
        }
    }
    Err(Error::config(format!("override `{spec}` has an empty key path")))
}

/// Loads, overrides, validates. Returns the config together with the exact
/// TOML text that produced it (the hash input for the manifest).
pub fn load_config(path: &Path, overrides: &[String]) -> Result<(ExperimentConfig, String), Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    let mut tree: toml::Value = text
        .parse()
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    for spec in overrides {
        apply_override(&mut tree, spec)?;
    }
    let effective = toml::to_string_pretty(&tree)
        .map_err(|e| Error::config(format!("cannot re-serialize config: {e}")))?;
    let cfg: ExperimentConfig = tree
        .try_into()
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok((cfg, effective))
}

/// Hex SHA-256 of the effective (post-override) config text.
pub fn config_hash(effective_toml: &str) -> String {
    let digest = Sha256::digest(effective_toml.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [world]
        num_users = 10
        initial_catalog = 40
        topics = 3
        drift_rate = 0.3
        new_items_per_month = 1
        new_users_per_month = 0
        events_per_user_per_month = 8.0
        seed = 1

        [stream]
        start = "2021-01-01"

        [protocol]
        pretrain_end = "2022-01-01"
        horizon = 2
        seed = 7

        [protocol.pretrain]
        epochs = 1
        learning_rate = 5e-4
        seed = 0

        [protocol.update]
        epochs = 1
        learning_rate = 1e-4
        seed = 0

        [[arms]]
        name = "none"
        mode = "none"

        [[arms]]
        name = "gradsim"
        mode = "select"
        repr = "grad_sim"
        strategy = "diverse_weighted"

        [output]
        dir = "out"
    "#;

    fn write_config(text: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(&path, text).unwrap();
        (dir, path)
    }

    #[test]
    fn minimal_config_parses_and_defaults() {
        let (_d, path) = write_config(MINIMAL);
        let (cfg, _) = load_config(&path, &[]).unwrap();
        assert_eq!(cfg.protocol.interval_months, 6);
        assert_eq!(cfg.protocol.ref_size, 100);
        assert_eq!(cfg.model.dim, 32);
        // End defaults to the final evaluation boundary: 3 intervals past cutoff.
        assert_eq!(cfg.stream_end(), NaiveDate::from_ymd_opt(2023, 7, 1).unwrap());
    }

    #[test]
    fn unknown_keys_are_rejected_with_a_path() {
        let bad = MINIMAL.replace("drift_rate", "drift_rte");
        let (_d, path) = write_config(&bad);
        let err = load_config(&path, &[]).unwrap_err().to_string();
        assert!(err.contains("drift_rte"), "{err}");
    }

    #[test]
    fn overrides_reach_nested_fields_and_arrays() {
        let (_d, path) = write_config(MINIMAL);
        let sets = vec![
            "protocol.seed=99".to_string(),
            "world.drift_rate=0.5".to_string(),
            "arms.1.strategy=top_k".to_string(),
            "output.dir=elsewhere".to_string(),
        ];
        let (cfg, _) = load_config(&path, &sets).unwrap();
        assert_eq!(cfg.protocol.seed, 99);
        assert_eq!(cfg.world.drift_rate, 0.5);
        assert_eq!(cfg.output.dir, PathBuf::from("elsewhere"));
    }

    #[test]
    fn override_changes_the_hash() {
        let (_d, path) = write_config(MINIMAL);
        let (_, a) = load_config(&path, &[]).unwrap();
        let (_, b) = load_config(&path, &["protocol.seed=99".into()]).unwrap();
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 64);
    }

    #[test]
    fn duplicate_arm_names_fail_validation() {
        let dup = MINIMAL.replace("name = \"gradsim\"", "name = \"none\"");
        let (_d, path) = write_config(&dup);
        assert!(load_config(&path, &[]).is_err());
    }

    #[test]
    fn env_var_roots_relative_output_dirs() {
        let (_d, path) = write_config(MINIMAL);
        let (cfg, _) = load_config(&path, &[]).unwrap();
        // With no env var the config directory is the anchor.
        std::env::remove_var(OUTPUT_ROOT_ENV);
        assert_eq!(cfg.output_dir(Path::new("/cfgs")), PathBuf::from("/cfgs/out"));
        std::env::set_var(OUTPUT_ROOT_ENV, "/data");
        assert_eq!(cfg.output_dir(Path::new("/cfgs")), PathBuf::from("/data/out"));
        std::env::remove_var(OUTPUT_ROOT_ENV);
    }
}
