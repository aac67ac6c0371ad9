//! On-disk form of a batching config.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use batchiso::{BatchingConfig, InputSpec, OutputSpec};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InputEntry {
    Batched(BatchAxis),
    Shared(SharedFlag),
    ConstantLike(ConstantFlag),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OutputEntry {
    Batched(BatchAxis),
    Shared(SharedFlag),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchAxis {
    pub batch_axis: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharedFlag {
    pub shared: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantFlag {
    pub constant_like: bool,
}

fn default_true() -> bool {
    true
}

/// JSON config read by `check` and `oracle`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckConfigFile {
    pub batch_size: usize,
    #[serde(default)]
    pub dim_bindings: BTreeMap<String, usize>,
    pub inputs: BTreeMap<String, InputEntry>,
    pub outputs: BTreeMap<String, OutputEntry>,
    #[serde(default = "default_true")]
    pub allow_random_outputs: bool,
    #[serde(default)]
    pub fail_fast: bool,
}

impl CheckConfigFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).context("config does not match the schema")
    }

    pub fn to_config(&self) -> Result<BatchingConfig> {
        if self.batch_size == 0 {
            bail!("batch_size must be at least 1");
        }
        let mut c = BatchingConfig::new(self.batch_size);
        c.dim_bindings = self.dim_bindings.clone();
        c.allow_random_outputs = self.allow_random_outputs;
        c.fail_fast = self.fail_fast;
        for (name, e) in &self.inputs {
            let spec = match e {
                InputEntry::Batched(a) => InputSpec::Batched {
                    batch_axis: a.batch_axis,
                },
                InputEntry::Shared(SharedFlag { shared: true }) => InputSpec::Shared,
                InputEntry::ConstantLike(ConstantFlag { constant_like: true }) => InputSpec::ConstantLike,
                _ => bail!("input `{name}`: flags must be true"),
            };
            c.inputs.insert(name.clone(), spec);
        }
        for (name, e) in &self.outputs {
            let spec = match e {
                OutputEntry::Batched(a) => OutputSpec::Batched {
                    batch_axis: a.batch_axis,
                },
                OutputEntry::Shared(SharedFlag { shared: true }) => OutputSpec::Shared,
                _ => bail!("output `{name}`: flags must be true"),
            };
            c.outputs.insert(name.clone(), spec);
        }
        Ok(c)
    }
}

impl From<&BatchingConfig> for CheckConfigFile {
    fn from(c: &BatchingConfig) -> Self {
        let inputs = c
            .inputs
            .iter()
            .map(|(k, s)| {
                let e = match *s {
                    InputSpec::Batched { batch_axis } => InputEntry::Batched(BatchAxis { batch_axis }),
                    InputSpec::Shared => InputEntry::Shared(SharedFlag { shared: true }),
                    InputSpec::ConstantLike => InputEntry::ConstantLike(ConstantFlag { constant_like: true }),
                };
                (k.clone(), e)
            })
            .collect();
        let outputs = c
            .outputs
            .iter()
            .map(|(k, s)| {
                let e = match *s {
                    OutputSpec::Batched { batch_axis } => OutputEntry::Batched(BatchAxis { batch_axis }),
                    OutputSpec::Shared => OutputEntry::Shared(SharedFlag { shared: true }),
                };
                (k.clone(), e)
            })
            .collect();
        CheckConfigFile {
            batch_size: c.batch_size,
            dim_bindings: c.dim_bindings.clone(),
            inputs,
            outputs,
            allow_random_outputs: c.allow_random_outputs,
            fail_fast: c.fail_fast,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_entry_kind() {
        let f = CheckConfigFile::parse(
            r#"{"batch_size": 2, "dim_bindings": {"seq": 4},
                "inputs": {"x": {"batch_axis": 0}, "w": {"shared": true}, "pos": {"constant_like": true}},
                "outputs": {"y": {"batch_axis": 1}, "s": {"shared": true}}}"#,
        )
        .unwrap();
        let c = f.to_config().unwrap();
        assert_eq!(c.inputs["x"], InputSpec::Batched { batch_axis: 0 });
        assert_eq!(c.inputs["w"], InputSpec::Shared);
        assert_eq!(c.inputs["pos"], InputSpec::ConstantLike);
        assert_eq!(c.outputs["y"], OutputSpec::Batched { batch_axis: 1 });
        assert_eq!(c.outputs["s"], OutputSpec::Shared);
        assert_eq!(c.dim_bindings["seq"], 4);
        assert!(c.allow_random_outputs && !c.fail_fast);
    }

    #[test]
    fn rejects_unknown_and_missing_keys() {
        let bad = [
            r#"{"batch_size": 2, "inputs": {}, "outputs": {}, "extra": 1}"#,
            r#"{"inputs": {}, "outputs": {}}"#,
            r#"{"batch_size": 2, "inputs": {"x": {"batch_axis": 0, "other": 1}}, "outputs": {}}"#,
            r#"{"batch_size": 2, "inputs": {}, "outputs": {"y": {"constant_like": true}}}"#,
        ];
        for text in bad {
            assert!(CheckConfigFile::parse(text).is_err(), "{text}");
        }
        let f =
            CheckConfigFile::parse(r#"{"batch_size": 2, "inputs": {"x": {"shared": false}}, "outputs": {}}"#).unwrap();
        assert!(f.to_config().is_err());
    }

    #[test]
    fn round_trips_a_config() {
        let (_, c) = batchiso::fixtures::toy_attention();
        let f = CheckConfigFile::from(&c);
        let text = serde_json::to_string(&f).unwrap();
        assert_eq!(CheckConfigFile::parse(&text).unwrap().to_config().unwrap(), c);
    }
}
