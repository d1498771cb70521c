//! Checkpoint directories:
//!
//! ```text
//! config.txt              effective settings
//! relations.json          relation type names, in id order
//! model.safetensors       main parameters (F64)
//! standalone.safetensors  standalone parser, when the variant has one
//! vocab.txt | tokenizer.json (+ emotions.txt)
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use crate::config::Settings;
use crate::data::RelationTypeSet;
use crate::error::{DamError, Result};
use crate::model::{DamModel, EncoderInit};
use crate::tensor::{Matrix, ParamStore};
use crate::tokenizer::Tokenizer;

pub const CONFIG_FILE: &str = "config.txt";
pub const RELATIONS_FILE: &str = "relations.json";
pub const WEIGHTS_FILE: &str = "model.safetensors";
pub const STANDALONE_FILE: &str = "standalone.safetensors";

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| DamError::io(path, e))
}

fn checkpoint_err(path: &Path, reason: impl Into<String>) -> DamError {
    DamError::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Serializes every parameter of `store` by name.
pub fn store_to_bytes(store: &ParamStore) -> Result<Vec<u8>> {
    let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = store
        .entries()
        .iter()
        .map(|e| {
            let bytes = e.value.iter().flat_map(|v| v.to_le_bytes()).collect();
            (e.name.clone(), vec![e.value.nrows(), e.value.ncols()], bytes)
        })
        .collect();
    let views: Vec<(&str, TensorView<'_>)> = buffers
        .iter()
        .map(|(n, shape, b)| {
            TensorView::new(Dtype::F64, shape.clone(), b)
                .map(|v| (n.as_str(), v))
                .map_err(|e| DamError::Internal(e.to_string()))
        })
        .collect::<Result<_>>()?;
    safetensors::serialize(views, &None::<HashMap<String, String>>).map_err(|e| DamError::Internal(e.to_string()))
}

/// Overwrites every parameter of `store` from serialized bytes; names and
/// shapes must match exactly.
pub fn load_store(store: &mut ParamStore, bytes: &[u8], path: &Path) -> Result<()> {
    let tensors = SafeTensors::deserialize(bytes).map_err(|e| checkpoint_err(path, e.to_string()))?;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let view = tensors
            .tensor(&name)
            .map_err(|_| checkpoint_err(path, format!("missing tensor `{name}`")))?;
        let dim = store.get(id).dim();
        if view.dtype() != Dtype::F64 || view.shape() != [dim.0, dim.1] {
            return Err(checkpoint_err(
                path,
                format!("tensor `{name}` is {:?} {:?}, expected F64 {dim:?}", view.dtype(), view.shape()),
            ));
        }
        let values = view
            .data()
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        *store.get_mut(id) = Matrix::from_shape_vec(dim, values).map_err(|e| checkpoint_err(path, e.to_string()))?;
    }
    if tensors.len() != store.len() {
        return Err(checkpoint_err(
            path,
            format!("{} tensors stored, model has {}", tensors.len(), store.len()),
        ));
    }
    Ok(())
}

pub fn save(dir: &Path, settings: &Settings, model: &DamModel) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| DamError::io(dir, e))?;
    let mut settings = settings.clone();
    settings.model.encoder = model.config.encoder.clone();
    write(&dir.join(CONFIG_FILE), settings.to_text().as_bytes())?;
    let names = serde_json::to_string(model.relations.names()).map_err(|e| DamError::Internal(e.to_string()))?;
    write(&dir.join(RELATIONS_FILE), names.as_bytes())?;
    write(&dir.join(WEIGHTS_FILE), &store_to_bytes(&model.store)?)?;
    if let Some(s) = &model.standalone {
        write(&dir.join(STANDALONE_FILE), &store_to_bytes(&s.store)?)?;
    }
    model.tokenizer().save(dir)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| DamError::io(path, e))
}

pub fn load(dir: &Path) -> Result<(Settings, DamModel)> {
    if !dir.is_dir() {
        return Err(DamError::MissingFile {
            path: dir.to_path_buf(),
        });
    }
    let config_path = dir.join(CONFIG_FILE);
    let text = String::from_utf8(read(&config_path)?).map_err(|e| checkpoint_err(&config_path, e.to_string()))?;
    let settings = Settings::from_text(&text)?;
    let rel_path = dir.join(RELATIONS_FILE);
    let names: Vec<String> = serde_json::from_slice(&read(&rel_path)?).map_err(|e| checkpoint_err(&rel_path, e.to_string()))?;
    let tokenizer = Tokenizer::load(dir)?;
    let mut model = DamModel::new(
        settings.model.clone(),
        &EncoderInit::Fresh(tokenizer),
        RelationTypeSet::from_stored(names),
        settings.train.seed,
    )?;
    let weights = dir.join(WEIGHTS_FILE);
    load_store(&mut model.store, &read(&weights)?, &weights)?;
    if let Some(s) = model.standalone.as_mut() {
        let path = dir.join(STANDALONE_FILE);
        load_store(&mut s.store, &read(&path)?, &path)?;
    }
    Ok((settings, model))
}
