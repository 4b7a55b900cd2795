//! Run configuration: one TOML file, one shared seed, flag overrides.
//!
//! All commands read the same config shape. Values resolve in three layers:
//! built-in defaults, then the `--config` file, then repeated
//! `--set section.key=value` overrides. The committed `config/default.toml`
//! spells out every default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::lstm::CellOutput;
use crate::model::ModelConfig;
use crate::train::TrainParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub levels: usize,
    pub stem_channels: usize,
    pub growth_rate: usize,
    pub block_layers: usize,
    pub compression: f64,
    /// Square input extent (H = W).
    pub input_size: usize,
    pub use_attention_gate: bool,
    pub use_lstm_attention: bool,
    pub use_bdlstm: bool,
    pub lstm_output_activation: CellOutput,
    pub attention_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            levels: m.levels,
            stem_channels: m.stem_channels,
            growth_rate: m.growth_rate,
            block_layers: m.block_layers,
            compression: m.compression,
            input_size: m.input_h,
            use_attention_gate: m.use_attention_gate,
            use_lstm_attention: m.use_lstm_attention,
            use_bdlstm: m.use_bdlstm,
            lstm_output_activation: m.lstm_output,
            attention_dim: m.attention_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n_train: usize,
    pub n_val: usize,
    pub size: usize,
    pub blobs_min: usize,
    pub blobs_max: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub contrast: f64,
    pub noise_sigma: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let d = DatasetSpec::default();
        DataSection {
            n_train: d.n_train,
            n_val: d.n_val,
            size: d.size,
            blobs_min: d.blobs_min,
            blobs_max: d.blobs_max,
            radius_min: d.radius_min,
            radius_max: d.radius_max,
            contrast: d.contrast,
            noise_sigma: d.noise_sigma,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub threshold: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainParams::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            threshold: t.threshold,
        }
    }
}

/// The whole run configuration. One `seed` drives dataset generation, model
/// initialization, and training-loop shuffling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            model: ModelSection::default(),
            data: DataSection::default(),
            train: TrainSection::default(),
        }
    }
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            levels: self.model.levels,
            stem_channels: self.model.stem_channels,
            growth_rate: self.model.growth_rate,
            block_layers: self.model.block_layers,
            compression: self.model.compression,
            input_h: self.model.input_size,
            input_w: self.model.input_size,
            use_attention_gate: self.model.use_attention_gate,
            use_lstm_attention: self.model.use_lstm_attention,
            use_bdlstm: self.model.use_bdlstm,
            lstm_output: self.model.lstm_output_activation,
            attention_dim: self.model.attention_dim,
            seed: self.seed,
        }
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            n_train: self.data.n_train,
            n_val: self.data.n_val,
            size: self.data.size,
            blobs_min: self.data.blobs_min,
            blobs_max: self.data.blobs_max,
            radius_min: self.data.radius_min,
            radius_max: self.data.radius_max,
            contrast: self.data.contrast,
            noise_sigma: self.data.noise_sigma,
            master_seed: self.seed,
        }
    }

    pub fn train_params(&self) -> TrainParams {
        TrainParams {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            momentum: self.train.momentum,
            threshold: self.train.threshold,
            seed: self.seed,
        }
    }

    /// Resolves defaults, an optional file, and `section.key=value`
    /// overrides, in that order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut value =
            toml::Value::try_from(RunConfig::default()).expect("defaults serialize to TOML");
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)?;
            let file_value: toml::Value = text
                .parse()
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut value, file_value);
        }
        for entry in overrides {
            apply_override(&mut value, entry)?;
        }
        value
            .try_into()
            .map_err(|e| Error::Config(format!("invalid configuration: {e}")))
    }
}

/// Recursively merges `patch` into `base`: tables merge key by key,
/// everything else overwrites.
fn merge(base: &mut toml::Value, patch: toml::Value) {
    match (base, patch) {
        (toml::Value::Table(base_map), toml::Value::Table(patch_map)) => {
            for (k, v) in patch_map {
                match base_map.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        base_map.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies one `section.key=value` override. The value is parsed as TOML;
/// values that do not parse are taken as strings.
fn apply_override(root: &mut toml::Value, entry: &str) -> Result<()> {
    let (path, raw) = entry
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {entry:?} is not key=value")))?;
    let parsed: toml::Value = format!("v = {raw}")
        .parse::<toml::Value>()
        .ok()
        .and_then(|mut t| t.as_table_mut().and_then(|m| m.remove("v")))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));

    let mut cursor = root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, segment) in segments.iter().enumerate() {
        let table = cursor
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path {path:?} crosses a non-table")))?;
        if i + 1 == segments.len() {
            table.insert((*segment).to_string(), parsed);
            return Ok(());
        }
        cursor = table
            .entry((*segment).to_string())
            .or_insert_with(|| toml::Value::Table(toml::map::Map::new()));
    }
    unreachable!("override paths have at least one segment")
}
