//! JSON run configurations with `--set key=value` overrides.

use std::path::{Path, PathBuf};

use gaitmorph::autoencoder::TrainConfig;
use gaitmorph::gaitdata::GeneratorConfig;
use gaitmorph::{FitConfig, ModelConfig, VariationLabel};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{Map, Value};

use crate::CliError;

/// Reads a JSON object from `path` and applies `overrides` in order.
pub fn load_config<T: DeserializeOwned>(path: Option<&Path>, overrides: &[String]) -> Result<T, CliError> {
    let mut value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::usage(format!("config {} is not valid JSON: {e}", p.display())))?
        }
        None => Value::Object(Map::new()),
    };
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    serde_json::from_value(value).map_err(|e| CliError::usage(format!("invalid config: {e}")))
}

/// Sets a dotted key, creating intermediate objects. The value is parsed as
/// JSON and taken as a plain string when that fails.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::usage(format!("override `{assignment}` is not key=value")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::usage(format!("bad override key `{key}`")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::usage(format!("override `{key}` descends into a non-object")))?;
        if parts.peek().is_none() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("key has at least one part")
}

pub(crate) fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::usage(format!("{what} {} does not exist", path.display())))
    }
}

pub(crate) fn require_output(path: &Path, what: &str) -> Result<(), CliError> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    if path.file_name().is_none() || !parent.is_dir() {
        return Err(CliError::usage(format!(
            "{what} {} is not a writable file location",
            path.display()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenArgs {
    #[serde(default)]
    pub generator: GeneratorConfig,
    /// Walks per subject and variation held out for testing.
    #[serde(default = "one")]
    pub test_walks: u32,
    pub train_out: PathBuf,
    pub test_out: PathBuf,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainArgs {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub fit: FitConfig,
    /// Steps between metrics lines.
    #[serde(default = "one_u64")]
    pub log_every: u64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitMapsArgs {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub source: VariationLabel,
    pub target: VariationLabel,
    pub maps: PathBuf,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MorphArgs {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    /// Required unless `identity` is set.
    #[serde(default)]
    pub maps: Option<PathBuf>,
    /// Use maps that keep every token, which yields plain reconstructions.
    #[serde(default)]
    pub identity: bool,
    /// Sequences to morph; defaults to the maps' source variation, or every
    /// sequence with identity maps.
    #[serde(default)]
    pub source: Option<VariationLabel>,
    /// Seed for row sampling; argmax remapping when absent.
    #[serde(default)]
    pub sample_seed: Option<u64>,
    pub output: PathBuf,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FgdArgs {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub maps: PathBuf,
    /// Heuristic augmentations applied to the source walks as a baseline.
    #[serde(default)]
    pub augmentations: Vec<String>,
    #[serde(default)]
    pub augment_seed: u64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsArgs {
    pub checkpoint: PathBuf,
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub maps: Option<PathBuf>,
    /// Latent positions used for the bit count; the model's grid by default.
    #[serde(default)]
    pub positions: Option<u64>,
}

fn one() -> u32 {
    1
}

fn one_u64() -> u64 {
    1
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_nest_and_parse() {
        let mut v = json!({"fit": {"steps": 10}});
        apply_override(&mut v, "fit.steps=20").unwrap();
        apply_override(&mut v, "model.enc_channels=[4,8]").unwrap();
        apply_override(&mut v, "dataset=data/train.jsonl").unwrap();
        assert_eq!(
            v,
            json!({"fit": {"steps": 20}, "model": {"enc_channels": [4, 8]}, "dataset": "data/train.jsonl"})
        );
        assert!(apply_override(&mut v, "novalue").is_err());
        assert!(apply_override(&mut v, "dataset.x=1").is_err());
        assert!(apply_override(&mut v, "a..b=1").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = load_config::<StatsArgs>(None, &["checkpoint=a".into(), "colour=red".into()]).unwrap_err();
        assert_eq!(e.code, crate::EXIT_USAGE);
        let ok: StatsArgs = load_config(None, &["checkpoint=a".into(), "positions=144".into()]).unwrap();
        assert_eq!(ok.positions, Some(144));
    }
}
