//! Run configuration: preset defaults, an optional TOML file, and dotted-key
//! overrides, merged in that order and validated against the full schema.

use std::path::{Path, PathBuf};

use gencond::condense::{CodebookConfig, CondenseConfig, NetworksConfig};
use gencond::data::{load_dataset, make_toy_split, LabeledDataset, Split, ToyParams};
use gencond::eval::EvalConfig;
use gencond::losses::LossConfig;
use gencond::preset::Preset;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::CliError;

pub const DATA_ROOT_ENV: &str = "GENCOND_DATA_ROOT";
pub const DEFAULT_DATASET: &str = "toy-blobs";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub name: String,
    /// Falls back to `$GENCOND_DATA_ROOT`, then `./data`.
    pub root: Option<PathBuf>,
    /// Generator parameters when `name` is a toy dataset.
    pub toy: ToyParams,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            name: DEFAULT_DATASET.into(),
            root: None,
            toy: ToyParams::default(),
        }
    }
}

impl DatasetSection {
    pub fn is_toy(&self) -> bool {
        self.name.starts_with("toy")
    }

    pub fn resolved_root(&self) -> PathBuf {
        self.root
            .clone()
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"))
    }

    pub fn load(&self, split: Split) -> gencond::Result<LabeledDataset> {
        if self.is_toy() {
            make_toy_split(&self.toy, split)
        } else {
            load_dataset(&self.name, &self.resolved_root(), split)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisualizeSection {
    /// Real images drawn for the projection; capped at the split size.
    pub real_sample: usize,
    /// Synthetic images per class; `None` uses the whole codebook.
    pub ipc: Option<usize>,
}

impl Default for VisualizeSection {
    fn default() -> Self {
        Self {
            real_sample: 300,
            ipc: None,
        }
    }
}

/// The merged configuration tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub networks: NetworksConfig,
    pub codebook: CodebookConfig,
    pub losses: LossConfig,
    pub condense: CondenseConfig,
    pub eval: EvalConfig,
    pub visualize: VisualizeSection,
}

impl RunConfig {
    /// Defaults for a dataset: the toy preset for toy names, the standard
    /// one otherwise.
    pub fn defaults_for(dataset: &str) -> Self {
        let preset = Preset::for_dataset(dataset);
        Self {
            dataset: DatasetSection {
                name: dataset.into(),
                ..DatasetSection::default()
            },
            networks: preset.networks,
            codebook: preset.codebook,
            losses: preset.losses,
            condense: preset.condense,
            eval: preset.eval,
            visualize: VisualizeSection::default(),
        }
    }

    /// Condensation settings with the loss section attached.
    pub fn condense_config(&self) -> CondenseConfig {
        CondenseConfig {
            loss: self.losses,
            ..self.condense.clone()
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// One `key.path=value` override.
#[derive(Clone, Debug, PartialEq)]
pub struct Override {
    pub path: Vec<String>,
    pub raw: String,
}

impl Override {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let text = text.trim_start_matches("--");
        let (key, raw) = text
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("override `{text}` is not KEY=VALUE")))?;
        let path: Vec<String> = key.split('.').map(str::to_owned).collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(CliError::usage(format!("malformed override key `{key}`")));
        }
        Ok(Self {
            path,
            raw: raw.to_owned(),
        })
    }

    /// The value as TOML, falling back to a bare string.
    fn value(&self) -> Value {
        toml::from_str::<Table>(&format!("v = {}", self.raw))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(self.raw.clone()))
    }
}

fn set_path(table: &mut Table, path: &[String], value: Value) -> Result<(), CliError> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for (depth, key) in parents.iter().enumerate() {
        let entry = cur.entry(key.clone()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| {
            CliError::usage(format!("`{}` is not a section", path[..=depth].join(".")))
        })?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Resolves the configuration from defaults, an optional file, overrides
/// and the seed flag. `--seed` sets both the condensation seed and the first
/// evaluation seed.
pub fn resolve(file: Option<&Path>, overrides: &[Override], seed: Option<u64>) -> Result<RunConfig, CliError> {
    resolve_over(None, file, overrides, seed)
}

/// Like [`resolve`], with `base` (typically a config embedded in a
/// checkpoint) applied before the file.
pub fn resolve_over(
    base: Option<&RunConfig>,
    file: Option<&Path>,
    overrides: &[Override],
    seed: Option<u64>,
) -> Result<RunConfig, CliError> {
    let mut user = match base {
        Some(cfg) => Table::try_from(cfg).map_err(|e| CliError::config(format!("embedded config: {e}")))?,
        None => Table::new(),
    };
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::load(path, e.to_string()))?;
        let table = toml::from_str::<Table>(&text)
            .map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message())))?;
        merge(&mut user, table);
    }
    for o in overrides {
        set_path(&mut user, &o.path, o.value())?;
    }
    if let Some(seed) = seed {
        let s = Value::Integer(i64::try_from(seed).map_err(|_| CliError::usage("seed exceeds i64 range"))?);
        set_path(&mut user, &["condense".into(), "seed".into()], s.clone())?;
        set_path(&mut user, &["eval".into(), "seed_base".into()], s)?;
    }
    let dataset = user
        .get("dataset")
        .and_then(|d| d.get("name"))
        .and_then(Value::as_str)
        .unwrap_or(DEFAULT_DATASET)
        .to_owned();
    let mut merged = Table::try_from(RunConfig::defaults_for(&dataset))
        .map_err(|e| CliError::config(format!("default config: {e}")))?;
    merge(&mut merged, user);
    let cfg: RunConfig = merged
        .try_into()
        .map_err(|e: toml::de::Error| CliError::config(e.message().to_owned()))?;
    cfg.condense_config().validate()?;
    cfg.eval.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(s: &str) -> Override {
        Override::parse(s).unwrap()
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = resolve(None, &[], None).unwrap();
        assert_eq!(cfg, RunConfig::defaults_for(DEFAULT_DATASET));
    }

    #[test]
    fn overrides_take_typed_values() {
        let cfg = resolve(None, &[ov("--eval.runs=3"), ov("losses.weights.intra=0"), ov("eval.arch=mlp")], Some(9))
            .unwrap();
        assert_eq!(cfg.eval.runs, 3);
        assert_eq!(cfg.losses.weights.intra, 0.0);
        assert_eq!(cfg.eval.arch, "mlp");
        assert_eq!(cfg.condense.seed, 9);
        assert_eq!(cfg.eval.seed_base, 9);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in ["foo=1", "eval.foo=1", "condense.loss.tau=0.5", "losses.weights.bogus=1"] {
            let err = resolve(None, &[ov(bad)], None).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{bad}: {err:?}");
        }
    }

    #[test]
    fn dataset_name_selects_preset() {
        let cfg = resolve(None, &[ov("dataset.name=mnist")], None).unwrap();
        assert_eq!(cfg.networks, NetworksConfig::default());
        assert_eq!(cfg.eval.runs, EvalConfig::default().runs);
    }

    #[test]
    fn file_then_override() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[eval]\nruns = 4\nepochs = 7\n").unwrap();
        let cfg = resolve(Some(&path), &[ov("eval.runs=2")], None).unwrap();
        assert_eq!((cfg.eval.runs, cfg.eval.epochs), (2, 7));
    }
}
