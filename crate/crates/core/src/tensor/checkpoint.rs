//! Parameter checkpoints.
//!
//! A checkpoint is a JSON document
//! `{"format": "recground-checkpoint-v1", "params": [{"name", "shape", "values"}]}`
//! with parameters in store order and values row-major. Floats are written in
//! shortest round-trip form, so loading reproduces every value bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "recground-checkpoint-v1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    format: String,
    params: Vec<Entry>,
}

pub fn save_checkpoint(store: &ParamStore) -> String {
    let doc = Document {
        format: CHECKPOINT_FORMAT.into(),
        params: store
            .iter()
            .map(|(_, name, t)| Entry {
                name: name.into(),
                shape: t.shape().to_vec(),
                values: t.data().to_vec(),
            })
            .collect(),
    };
    let mut s = serde_json::to_string(&doc).expect("checkpoint serializes");
    s.push('\n');
    s
}

pub fn load_checkpoint(text: &str) -> Result<ParamStore> {
    let doc: Document = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if doc.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format '{}'", doc.format)));
    }
    let mut store = ParamStore::new();
    for e in doc.params {
        let t = Tensor::new(e.shape, e.values).map_err(|err| Error::Checkpoint(format!("{}: {err}", e.name)))?;
        store.add(e.name, t)?;
    }
    Ok(store)
}

pub fn write_checkpoint(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    crate::io::write_file(path, &save_checkpoint(store))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ParamStore> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    load_checkpoint(&text)
}
