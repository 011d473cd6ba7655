use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use super::model::Model;
use super::train::TrainConfig;
use crate::data::Vocab;
use crate::encoders::Parameterized;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FORMAT_VERSION: u64 = 1;

/// A trained model with everything needed to evaluate it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub classes: usize,
    pub vocab: Vocab,
    pub best_epoch: usize,
    pub model: Model,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_json(&self) -> Value {
        let mut params = Map::new();
        for (name, t) in self.model.named_params() {
            params.insert(name, json!({"shape": t.shape(), "data": t.data()}));
        }
        json!({
            "format_version": FORMAT_VERSION,
            "config": self.config,
            "classes": self.classes,
            "vocab": self.vocab.tokens(),
            "best_epoch": self.best_epoch,
            "params": params,
        })
    }

    pub fn from_json(value: &Value) -> Result<Self> {
        let obj = value.as_object().ok_or_else(|| bad("document is not an object"))?;
        let field = |k: &str| obj.get(k).ok_or_else(|| bad(format!("missing field `{k}`")));
        match field("format_version")?.as_u64() {
            Some(FORMAT_VERSION) => {}
            other => {
                return Err(bad(format!(
                    "unsupported format_version {other:?}, expected {FORMAT_VERSION}"
                )))
            }
        }
        let config: TrainConfig =
            serde_json::from_value(field("config")?.clone()).map_err(|e| bad(format!("config: {e}")))?;
        let classes = field("classes")?.as_u64().ok_or_else(|| bad("`classes` is not an integer"))? as usize;
        let best_epoch = field("best_epoch")?.as_u64().ok_or_else(|| bad("`best_epoch` is not an integer"))? as usize;
        let tokens: Vec<String> =
            serde_json::from_value(field("vocab")?.clone()).map_err(|e| bad(format!("vocab: {e}")))?;
        let vocab = Vocab::from_tokens(tokens).map_err(|e| bad(format!("vocab: {e}")))?;
        let params = field("params")?.as_object().ok_or_else(|| bad("`params` is not an object"))?;

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::new(
            &mut rng,
            config.model,
            &config.dims,
            vocab.len(),
            config.max_seq_len,
            classes,
        )
        .map_err(|e| bad(e.to_string()))?;
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        if params.len() != names.len() {
            return Err(bad(format!(
                "expected {} parameter tensors, found {}",
                names.len(),
                params.len()
            )));
        }
        for (name, slot) in names.iter().zip(model.params_mut()) {
            let entry = params.get(name).ok_or_else(|| bad(format!("missing parameter `{name}`")))?;
            let shape: Vec<usize> = serde_json::from_value(entry.get("shape").cloned().unwrap_or(Value::Null))
                .map_err(|e| bad(format!("{name}.shape: {e}")))?;
            let data: Vec<f64> = serde_json::from_value(entry.get("data").cloned().unwrap_or(Value::Null))
                .map_err(|e| bad(format!("{name}.data: {e}")))?;
            if shape != slot.shape() {
                return Err(bad(format!("`{name}` has shape {shape:?}, expected {:?}", slot.shape())));
            }
            *slot = Tensor::new(shape, data).map_err(|e| bad(format!("`{name}`: {e}")))?;
        }
        Ok(Self {
            config,
            classes,
            vocab,
            best_epoch,
            model,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(&self.to_json())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path)?;
        let value: Value = serde_json::from_str(&raw).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        Self::from_json(&value)
    }
}
