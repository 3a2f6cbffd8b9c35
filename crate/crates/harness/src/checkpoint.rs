//! Gate checkpoints: one JSON document holding the config and both weight
//! matrices (row-major).

use std::fs;
use std::path::Path;

use seer_core::{GateConfig, GateParams, Matrix};
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config: GateConfig,
    w_q: Vec<f32>,
    w_k: Vec<f32>,
}

pub fn to_json(params: &GateParams<f32>, cfg: &GateConfig) -> Result<String> {
    params.check(cfg)?;
    let ck = Checkpoint {
        config: cfg.clone(),
        w_q: params.w_q.as_slice().to_vec(),
        w_k: params.w_k.as_slice().to_vec(),
    };
    Ok(serde_json::to_string_pretty(&ck)?)
}

pub fn from_json(text: &str) -> Result<(GateParams<f32>, GateConfig)> {
    let ck: Checkpoint = serde_json::from_str(text)?;
    let cfg = ck.config;
    cfg.validate()?;
    let params = GateParams {
        w_q: Matrix::new(cfg.q_in_dim(), cfg.head_dim, ck.w_q)?,
        w_k: Matrix::new(cfg.k_in_dim(), cfg.head_dim, ck.w_k)?,
    };
    Ok((params, cfg))
}

pub fn save(path: &Path, params: &GateParams<f32>, cfg: &GateConfig) -> Result<()> {
    fs::write(path, to_json(params, cfg)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(GateParams<f32>, GateConfig)> {
    from_json(&fs::read_to_string(path)?)
}
