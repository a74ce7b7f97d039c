//! Model checkpoints: exact f64 weights plus model/train configuration in
//! one container file.

use std::path::Path;

use hscat_core::tensois::{Model, TrainConfig};
use serde_json::json;

use crate::container::{Container, ContainerWriter, Role};
use crate::error::{HscatError, Result};
use crate::jsonrep::{ModelConfigRep, TrainConfigRep};

pub fn save_model(
    path: &Path,
    model: &Model,
    train: Option<&TrainConfig>,
    extra_meta: serde_json::Value,
) -> Result<()> {
    let mut meta = json!({
        "kind": "checkpoint",
        "model_config": ModelConfigRep::from(&model.config),
    });
    if let Some(t) = train {
        meta["train_config"] = serde_json::to_value(TrainConfigRep::from(t)).unwrap();
    }
    if let serde_json::Value::Object(extra) = extra_meta {
        for (k, v) in extra {
            meta[k] = v;
        }
    }
    let mut w = ContainerWriter::new(meta);
    for p in &model.params {
        w.add_f64(&p.name, Role::Param, &p.value.shape, &p.value.data);
    }
    w.write_to(path)
}

pub struct Checkpoint {
    pub model: Model,
    pub train: Option<TrainConfig>,
    pub meta: serde_json::Value,
}

pub fn load_model(path: &Path) -> Result<Checkpoint> {
    let c = Container::read_from(path)?;
    let meta = c.meta().clone();
    let rep: ModelConfigRep = serde_json::from_value(
        meta.get("model_config")
            .cloned()
            .ok_or_else(|| HscatError::Format("checkpoint missing model_config".into()))?,
    )
    .map_err(|e| HscatError::Format(format!("model_config decode: {e}")))?;
    let cfg = rep.to_core()?;
    let mut model = Model::init(cfg, 0)
        .map_err(|e| HscatError::Format(format!("model rebuild: {e}")))?;
    for p in model.params.iter_mut() {
        let sec = c.section(&p.name)?;
        if sec.shape != p.value.shape {
            return Err(HscatError::Format(format!(
                "param {} shape {:?} does not match model {:?}",
                p.name, sec.shape, p.value.shape
            )));
        }
        p.value.data = c.values(sec);
    }
    if c.header.sections.len() != model.params.len() {
        return Err(HscatError::Format(format!(
            "checkpoint has {} sections, model expects {}",
            c.header.sections.len(),
            model.params.len()
        )));
    }
    let train = match meta.get("train_config") {
        Some(v) => Some(
            serde_json::from_value::<TrainConfigRep>(v.clone())
                .map_err(|e| HscatError::Format(format!("train_config decode: {e}")))?
                .to_core(),
        ),
        None => None,
    };
    Ok(Checkpoint { model, train, meta })
}
