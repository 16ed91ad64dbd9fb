//! Config files are partial JSON objects laid over the regimen defaults,
//! so a file only names the fields it changes.

use std::path::Path;

use pairseq::trainer::{Regimen, TrainConfig};
use pairseq::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// `defaults` with the file's fields applied; unknown fields are errors.
pub fn layered<T: Serialize + DeserializeOwned>(defaults: &T, file: Option<&Path>) -> Result<T> {
    let mut v = serde_json::to_value(defaults)?;
    if let Some(p) = file {
        merge(&mut v, read_json(p)?);
    }
    serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
}

/// Training config for `regimen`: defaults, then the file, then flags.
pub fn train_config(
    regimen: Regimen,
    file: Option<&Path>,
    seed: Option<u64>,
    lr: Option<f64>,
    epochs: Option<usize>,
) -> Result<TrainConfig> {
    let mut cfg = layered(&TrainConfig::for_regimen(regimen), file)?;
    if cfg.regimen != regimen {
        // a file written for another regimen keeps its fields but not its
        // regimen: the command decides what is trained
        log::warn!(
            "config regimen {} overridden by {}",
            cfg.regimen.name(),
            regimen.name()
        );
        cfg.regimen = regimen;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(r) = lr {
        cfg.lr = r;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}
