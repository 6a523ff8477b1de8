//! Checkpoints: parameters, optimiser moments and run metadata in one container.
//!
//! Tensors are stored by parameter name as `param/<name>`, `optim/m/<name>`
//! and `optim/v/<name>` in f64, so a resumed run continues bit-identically.

use std::path::Path;

use serde_json::{json, Value};
use thiserror::Error;

use crate::dataio::{read_container, write_container, ArrayData, Container, ContainerError};
use crate::nn::{AdamW, AdamWConfig, ParamStore};

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("not a checkpoint: {0}")]
    NotCheckpoint(String),
    #[error("parameter {0} is missing from the checkpoint")]
    MissingParam(String),
    #[error("parameter {name}: checkpoint shape {stored:?}, model shape {model:?}")]
    ShapeMismatch { name: String, stored: Vec<usize>, model: Vec<usize> },
    #[error("checkpoint has no optimiser state")]
    NoOptimizer,
}

/// Decoded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ParamStore,
    /// Optimiser moments indexed like `params`.
    pub optim: Option<AdamW>,
    pub meta: Value,
}

impl Checkpoint {
    /// Copy every parameter of `store` from the checkpoint, requiring an exact
    /// name and shape match; with `optim`, the moments and step are restored too.
    pub fn restore(&self, store: &mut ParamStore, optim: Option<&mut AdamW>) -> Result<(), CheckpointError> {
        let mut mapping = Vec::with_capacity(store.len());
        for id in store.ids() {
            let name = store.name(id).to_string();
            let src = self.params.find(&name).ok_or_else(|| CheckpointError::MissingParam(name.clone()))?;
            let stored = self.params.value(src).shape().to_vec();
            if stored != store.value(id).shape() {
                return Err(CheckpointError::ShapeMismatch { name, stored, model: store.value(id).shape().to_vec() });
            }
            mapping.push((id, src));
        }
        for &(id, src) in &mapping {
            store.value_mut(id).assign(self.params.value(src));
        }
        if let Some(opt) = optim {
            let saved = self.optim.as_ref().ok_or(CheckpointError::NoOptimizer)?;
            opt.config = saved.config;
            opt.step = saved.step;
            for &(id, src) in &mapping {
                opt.m[id.index()].assign(&saved.m[src.index()]);
                opt.v[id.index()].assign(&saved.v[src.index()]);
            }
        }
        Ok(())
    }
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, optim: Option<&AdamW>, meta: Value) -> Result<(), CheckpointError> {
    let mut c = Container::new();
    let mut names = Vec::with_capacity(store.len());
    let mut decay = Vec::with_capacity(store.len());
    for id in store.ids() {
        let name = store.name(id);
        c.insert(format!("param/{name}"), ArrayData::F64(store.value(id).clone()));
        if let Some(o) = optim {
            c.insert(format!("optim/m/{name}"), ArrayData::F64(o.m[id.index()].clone()));
            c.insert(format!("optim/v/{name}"), ArrayData::F64(o.v[id.index()].clone()));
        }
        names.push(name.to_string());
        decay.push(store.decays(id));
    }
    c.meta = json!({
        "kind": "checkpoint",
        "params": names,
        "decay": decay,
        "optim": optim.map(|o| json!({ "config": o.config, "step": o.step })),
        "run": meta,
    });
    Ok(write_container(&c, path)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let c = read_container(path)?;
    let bad = |m: &str| CheckpointError::NotCheckpoint(m.to_string());
    if c.meta.get("kind").and_then(Value::as_str) != Some("checkpoint") {
        return Err(bad("container kind is not checkpoint"));
    }
    let names: Vec<String> = serde_json::from_value(c.meta["params"].clone()).map_err(|e| bad(&e.to_string()))?;
    let decay: Vec<bool> = serde_json::from_value(c.meta["decay"].clone()).map_err(|e| bad(&e.to_string()))?;
    if names.len() != decay.len() {
        return Err(bad("parameter and decay lists differ in length"));
    }
    let mut params = ParamStore::new();
    for (name, &d) in names.iter().zip(&decay) {
        params.add(name, c.f64(&format!("param/{name}"))?.clone(), d);
    }
    let optim = match &c.meta["optim"] {
        Value::Null => None,
        o => {
            let config: AdamWConfig = serde_json::from_value(o["config"].clone()).map_err(|e| bad(&e.to_string()))?;
            let step = o["step"].as_u64().ok_or_else(|| bad("optimiser step"))?;
            let mut opt = AdamW::new(config, &params);
            opt.step = step;
            for (i, name) in names.iter().enumerate() {
                opt.m[i] = c.f64(&format!("optim/m/{name}"))?.clone();
                opt.v[i] = c.f64(&format!("optim/v/{name}"))?.clone();
            }
            Some(opt)
        }
    };
    Ok(Checkpoint { params, optim, meta: c.meta["run"].clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{MaeModel, ModelConfig};
    use crate::nn::GradBuffer;

    #[test]
    fn round_trip_restores_params_and_moments() {
        let cfg = ModelConfig::desk().with_views(&[crate::study::View::Lax4c]).unwrap();
        let mut m = MaeModel::new(&cfg, 1).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &m.store);
        let mut buf = GradBuffer::zeros_like(&m.store);
        let grads: Vec<_> = m.store.ids().map(|id| (id, m.store.value(id).mapv(|v| v + 0.1))).collect();
        buf.accumulate(&grads);
        opt.update(&mut m.store, &buf, 1e-3);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.cmrc");
        save_checkpoint(&p, &m.store, Some(&opt), json!({ "step": 1 })).unwrap();
        let ck = load_checkpoint(&p).unwrap();
        assert_eq!(ck.meta["step"], 1);

        let mut fresh = MaeModel::new(&cfg, 99).unwrap();
        let mut fresh_opt = AdamW::new(AdamWConfig::default(), &fresh.store);
        ck.restore(&mut fresh.store, Some(&mut fresh_opt)).unwrap();
        for id in m.store.ids() {
            assert_eq!(m.store.value(id), fresh.store.value(id));
            assert_eq!(opt.m[id.index()], fresh_opt.m[id.index()]);
            assert_eq!(opt.v[id.index()], fresh_opt.v[id.index()]);
        }
        assert_eq!(fresh_opt.step, 1);
    }

    #[test]
    fn mismatched_architecture_is_rejected() {
        let cfg = ModelConfig::desk().with_views(&[crate::study::View::Lax4c]).unwrap();
        let m = MaeModel::new(&cfg, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.cmrc");
        save_checkpoint(&p, &m.store, None, Value::Null).unwrap();
        let ck = load_checkpoint(&p).unwrap();
        let mut wider = cfg.clone();
        wider.decoder_dim = 64;
        let mut other = MaeModel::new(&wider, 0).unwrap();
        assert!(matches!(ck.restore(&mut other.store, None), Err(CheckpointError::ShapeMismatch { .. })));
        let full = MaeModel::new(&ModelConfig::desk(), 0).unwrap();
        let mut full_store = full.store.clone();
        assert!(matches!(ck.restore(&mut full_store, None), Err(CheckpointError::MissingParam(_))));
        let mut same = MaeModel::new(&cfg, 5).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &same.store);
        assert!(matches!(ck.restore(&mut same.store, Some(&mut opt)), Err(CheckpointError::NoOptimizer)));
    }
}
