//! Self-describing JSON checkpoints: vocabulary, model configuration and
//! named parameter tensors under a versioned header.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::transformer::TinySeq2Seq;
use super::vocab::Vocab;
use super::ModelConfig;
use crate::error::{Error, Result};

pub const FORMAT: &str = "genmodel-ckpt/1";

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    vocab: Vocab,
    config: ModelConfig,
    params: Vec<NamedTensor>,
}

pub(super) fn save(model: &TinySeq2Seq, path: &Path) -> Result<()> {
    let params = model
        .param_names()
        .zip(model.params())
        .map(|(name, t)| NamedTensor {
            name: name.to_string(),
            rows: t.rows,
            cols: t.cols,
            data: t.data.clone(),
        })
        .collect();
    let ckpt = Checkpoint {
        format: FORMAT.to_string(),
        vocab: model.vocab().clone(),
        config: model.config().clone(),
        params,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string(&ckpt)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TinySeq2Seq> {
    let text = fs::read_to_string(path)?;
    let ckpt: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if ckpt.format != FORMAT {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported format `{}` (expected `{FORMAT}`)",
            path.display(),
            ckpt.format
        )));
    }
    let model = TinySeq2Seq::uninitialized(ckpt.vocab.clone(), ckpt.config.clone())?;
    let mut tensors = Vec::with_capacity(ckpt.params.len());
    for (expected, t) in model.param_names().zip(&ckpt.params) {
        if expected != t.name {
            return Err(Error::Checkpoint(format!(
                "expected parameter `{expected}`, found `{}`",
                t.name
            )));
        }
        if t.rows * t.cols != t.data.len() {
            return Err(Error::Checkpoint(format!(
                "parameter `{}` has inconsistent shape",
                t.name
            )));
        }
        tensors.push(Tensor::from_vec(t.rows, t.cols, t.data.clone()));
    }
    TinySeq2Seq::from_parts(ckpt.vocab, ckpt.config, tensors)
}
