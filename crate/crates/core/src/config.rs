//! Experiment configuration: a JSON file plus `--section.field value` overrides.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::augment::AugmentSpec;
use crate::error::{Error, Result};
use crate::nn::ModelConfig;
use crate::train::TrainConfig;

pub const SECTIONS: [&str; 4] = ["model", "train", "augment", "paths"];

/// `("train.lambda", "0.25")` pairs in command-line order.
pub type Overrides = Vec<(String, String)>;

/// Default file locations; command-line flags take precedence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentSpec,
    pub paths: Paths,
}

/// Deserializes `value`, naming the offending field on failure.
fn from_value<T: DeserializeOwned>(value: Value, origin: &str) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        Error::Config(format!("{origin}: field `{path}`: {}", e.into_inner()))
    })
}

/// Parses JSON text, reporting line and column for syntax errors and the
/// dotted field path for type or unknown-key errors.
pub fn parse_json<T: DeserializeOwned>(text: &str, origin: &str) -> Result<T> {
    let mut de = serde_json::Deserializer::from_str(text);
    let value: T = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let loc = format!("line {}, column {}", inner.line(), inner.column());
        if path.is_empty() || path == "." {
            Error::Config(format!("{origin}: {loc}: {inner}"))
        } else {
            Error::Config(format!("{origin}: field `{path}` ({loc}): {inner}"))
        }
    })?;
    de.end()
        .map_err(|e| Error::Config(format!("{origin}: line {}, column {}: {e}", e.line(), e.column())))?;
    Ok(value)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_json(&text, &path.display().to_string())
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => read_json(p),
            None => Ok(Self::default()),
        }
    }

    /// Applies `("train.lambda", "0.25")`-style overrides. Values are parsed
    /// as JSON, falling back to a plain string.
    pub fn with_overrides(self, overrides: &[(String, String)]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self);
        }
        let mut root = serde_json::to_value(&self).map_err(|e| Error::Runtime(e.to_string()))?;
        for (key, raw) in overrides {
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            let mut node = &mut root;
            let parts: Vec<&str> = key.split('.').collect();
            for (depth, part) in parts.iter().enumerate() {
                let obj = node
                    .as_object_mut()
                    .ok_or_else(|| Error::Config(format!("override `--{key}`: `{part}` is not a section")))?;
                if !obj.contains_key(*part) {
                    return Err(Error::Config(format!("override `--{key}`: unknown field `{part}`")));
                }
                let slot = obj.get_mut(*part).expect("checked");
                if depth + 1 == parts.len() {
                    *slot = value.clone();
                    break;
                }
                node = slot;
            }
        }
        from_value(root, "command-line override")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.augment.validate()?;
        Ok(())
    }
}

/// Pulls `--section.field value` and `--section.field=value` pairs out of
/// `args`, leaving everything else in order.
pub fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(body) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let is_override = body
            .split_once('.')
            .is_some_and(|(section, _)| SECTIONS.contains(&section));
        if !is_override {
            rest.push(arg);
            continue;
        }
        let (key, value) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Config(format!("override `{arg}` is missing a value")))?;
                (body.to_string(), v)
            }
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn overrides_are_extracted() {
        let (rest, o) = extract_overrides(s(&["adapt", "--train.lambda", "0.25", "--out", "x", "--train.epochs=3"])).unwrap();
        assert_eq!(rest, s(&["adapt", "--out", "x"]));
        assert_eq!(o, vec![("train.lambda".into(), "0.25".into()), ("train.epochs".into(), "3".into())]);
        assert!(extract_overrides(s(&["--train.lambda"])).is_err());
    }

    #[test]
    fn overrides_apply_and_reject_unknown_fields() {
        let cfg = ExperimentConfig::default()
            .with_overrides(&[
                ("train.lambda".into(), "0.25".into()),
                ("train.adapt_class_mode".into(), "off".into()),
                ("model.stage_dims".into(), "[8,16]".into()),
            ])
            .unwrap();
        assert_eq!(cfg.train.lambda, 0.25);
        assert_eq!(cfg.model.stage_dims, vec![8, 16]);
        let err = ExperimentConfig::default()
            .with_overrides(&[("train.lamda".into(), "1".into())])
            .unwrap_err();
        assert!(err.is_config() && err.to_string().contains("lamda"));
        let err = ExperimentConfig::default()
            .with_overrides(&[("train.epochs".into(), "many".into())])
            .unwrap_err();
        assert!(err.to_string().contains("train.epochs"), "{err}");
    }

    #[test]
    fn json_errors_name_field_and_line() {
        let err = parse_json::<ExperimentConfig>("{\n  \"train\": {\n    \"lamda\": 1\n  }\n}", "c.json").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("c.json") && msg.contains("lamda") && msg.contains("line 3"), "{msg}");
        let err = parse_json::<ExperimentConfig>("{\n  \"train\": {\n    \"lambda\": \"x\"\n  }\n}", "c.json").unwrap_err();
        assert!(err.to_string().contains("train.lambda"), "{err}");
        let err = parse_json::<ExperimentConfig>("{ \"train\": ", "c.json").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn partial_config_keeps_defaults() {
        let cfg: ExperimentConfig = parse_json("{\"train\": {\"epochs\": 2}}", "c").unwrap();
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.lambda, 0.5);
        assert_eq!(cfg.model, ModelConfig::default());
    }
}
