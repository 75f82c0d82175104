//! Checkpoint directories.
//!
//! ```text
//! <dir>/manifest.json   schema version, kind, step, config and its hash
//! <dir>/index.json      name, file, shape and dtype of every tensor
//! <dir>/tensors/*.bin   raw little-endian row-major values
//! ```
//! The embedded config (plus the plan for final models) is enough to
//! rebuild the model structure, so a checkpoint loads without its config
//! file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::model::ToyTransformer;
use crate::allocation::AllocationPlan;
use crate::bilevel::{Optimizer, SearchSnapshot};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Search,
    Final,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub kind: CheckpointKind,
    pub config_hash: String,
    pub config: RunConfig,
    pub dtype: String,
    /// Next search step to run (search checkpoints).
    pub step: usize,
    pub total_steps: usize,
    /// True once the search finished and `pi_star.*` tensors are present.
    pub complete: bool,
    pub model_opt_step: u64,
    pub gsv_opt_step: u64,
    pub plan: Option<AllocationPlan>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub name: String,
    pub file: String,
    pub shape: [usize; 2],
    pub dtype: String,
}

/// Writes `manifest` and `tensors`, replacing any previous checkpoint files
/// in `dir`.
pub fn write_checkpoint<S: Scalar>(dir: &Path, manifest: &Manifest, tensors: &[(String, &Array2<S>)]) -> Result<()> {
    let tdir = dir.join("tensors");
    if tdir.exists() {
        fs::remove_dir_all(&tdir)?;
    }
    fs::create_dir_all(&tdir)?;
    let mut index = Vec::with_capacity(tensors.len());
    let mut buf = Vec::new();
    for (name, value) in tensors {
        let file = format!("tensors/{name}.bin");
        buf.clear();
        value.iter().for_each(|v| v.write_le(&mut buf));
        fs::write(dir.join(&file), &buf)?;
        index.push(IndexEntry {
            name: name.clone(),
            file,
            shape: [value.nrows(), value.ncols()],
            dtype: S::DTYPE.to_string(),
        });
    }
    fs::write(dir.join("index.json"), serde_json::to_string_pretty(&index)?)?;
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.join("manifest.json").display())))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("malformed manifest: {e}")))?;
    if manifest.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!(
            "schema_version {} (expected {CHECKPOINT_SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    if manifest.config.hash() != manifest.config_hash {
        return Err(Error::Checkpoint("embedded config does not match its hash".into()));
    }
    Ok(manifest)
}

pub fn read_checkpoint<S: Scalar>(dir: &Path) -> Result<(Manifest, BTreeMap<String, Array2<S>>)> {
    let manifest = read_manifest(dir)?;
    if manifest.dtype != S::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} values, reader expects {}",
            manifest.dtype,
            S::DTYPE
        )));
    }
    let text = fs::read_to_string(dir.join("index.json"))
        .map_err(|e| Error::Checkpoint(format!("index.json: {e}")))?;
    let index: Vec<IndexEntry> =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("malformed index: {e}")))?;
    let mut tensors = BTreeMap::new();
    for e in index {
        if e.dtype != S::DTYPE {
            return Err(Error::Checkpoint(format!("tensor {} has dtype {}", e.name, e.dtype)));
        }
        let bytes = fs::read(dir.join(&e.file)).map_err(|err| Error::Checkpoint(format!("{}: {err}", e.file)))?;
        let n = e.shape[0] * e.shape[1];
        if bytes.len() != n * S::BYTES {
            return Err(Error::Checkpoint(format!(
                "tensor {} has {} bytes, expected {}",
                e.name,
                bytes.len(),
                n * S::BYTES
            )));
        }
        let values: Vec<S> = bytes.chunks_exact(S::BYTES).map(S::read_le).collect();
        let arr = Array2::from_shape_vec((e.shape[0], e.shape[1]), values).expect("length checked");
        tensors.insert(e.name, arr);
    }
    Ok((manifest, tensors))
}

fn take<S: Scalar>(tensors: &mut BTreeMap<String, Array2<S>>, name: &str, into: &mut Tensor<S>) -> Result<()> {
    let v = tensors
        .remove(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
    if v.dim() != into.value.dim() {
        return Err(Error::Checkpoint(format!(
            "tensor {name} is {:?}, model expects {:?}",
            v.dim(),
            into.value.dim()
        )));
    }
    into.value = v;
    Ok(())
}

fn load_model_tensors<S: Scalar>(model: &mut ToyTransformer<S>, tensors: &mut BTreeMap<String, Array2<S>>) -> Result<()> {
    let frozen: Vec<String> = model.frozen_tensors().into_iter().map(|(n, _)| n).collect();
    for name in frozen {
        let v = tensors
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        let slot = frozen_slot(model, &name)?;
        if v != slot.value {
            return Err(Error::Checkpoint(format!(
                "frozen tensor {name} differs from the base model its config describes"
            )));
        }
    }
    let names = model.param_names();
    for (name, t) in names.iter().zip(model.params_mut()) {
        take(tensors, name, t)?;
    }
    let names = model.gsv_names();
    for (name, g) in names.iter().zip(model.gsvs_mut()) {
        take(tensors, name, &mut g.logits)?;
    }
    Ok(())
}

fn frozen_slot<'a, S: Scalar>(model: &'a ToyTransformer<S>, name: &str) -> Result<&'a Tensor<S>> {
    model
        .frozen_tensors()
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Checkpoint(format!("unknown frozen tensor {name}")))
}

fn model_tensors<S: Scalar>(model: &ToyTransformer<S>) -> Vec<(String, &Array2<S>)> {
    let mut out: Vec<(String, &Array2<S>)> =
        model.frozen_tensors().into_iter().map(|(n, t)| (n, &t.value)).collect();
    out.extend(model.param_names().into_iter().zip(model.params().into_iter().map(|t| &t.value)));
    out.extend(model.gsv_names().into_iter().zip(model.gsvs().into_iter().map(|g| &g.logits.value)));
    out
}

fn optimizer_tensors<'a, S: Scalar>(prefix: &str, opt: &'a Optimizer<S>, names: &[String]) -> Vec<(String, &'a Array2<S>)> {
    let mut out = Vec::new();
    for (n, m) in names.iter().zip(&opt.m) {
        out.push((format!("{prefix}.m.{n}"), m));
    }
    for (n, v) in names.iter().zip(&opt.v) {
        out.push((format!("{prefix}.v.{n}"), v));
    }
    out
}

fn restore_optimizer<S: Scalar>(
    prefix: &str,
    opt: &mut Optimizer<S>,
    names: &[String],
    tensors: &mut BTreeMap<String, Array2<S>>,
) -> Result<()> {
    let m: Vec<Array2<S>> = names.iter().filter_map(|n| tensors.remove(&format!("{prefix}.m.{n}"))).collect();
    let v: Vec<Array2<S>> = names.iter().filter_map(|n| tensors.remove(&format!("{prefix}.v.{n}"))).collect();
    if !m.is_empty() && (m.len() != names.len() || v.len() != names.len()) {
        return Err(Error::Checkpoint(format!("incomplete {prefix} optimizer moments")));
    }
    opt.m = m;
    opt.v = v;
    Ok(())
}

/// State recovered from a search checkpoint.
#[derive(Debug, Clone)]
pub struct SearchCheckpoint<S: Scalar> {
    pub manifest: Manifest,
    /// Model at `π(step)` with the selection vectors of that step.
    pub model: ToyTransformer<S>,
    pub snapshot: SearchSnapshot<S>,
    /// `π*(T)` when the search completed.
    pub pi_star: Option<Vec<Array2<S>>>,
}

impl<S: Scalar> SearchCheckpoint<S> {
    /// Model carrying `π*(T)` and the final selection vectors.
    pub fn warm_model(&self) -> Result<ToyTransformer<S>> {
        let pi = self
            .pi_star
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("search checkpoint is not complete".into()))?;
        let mut model = self.model.clone();
        for (t, v) in model.params_mut().into_iter().zip(pi) {
            t.value.assign(v);
        }
        Ok(model)
    }
}

pub fn save_search<S: Scalar>(
    dir: &Path,
    config: &RunConfig,
    model: &ToyTransformer<S>,
    snapshot: &SearchSnapshot<S>,
    total_steps: usize,
    pi_star: Option<&[Array2<S>]>,
) -> Result<()> {
    let mut restored = model.clone();
    snapshot.restore(&mut restored)?;
    let param_names = restored.param_names();
    let gsv_names = restored.gsv_names();
    let mut tensors = model_tensors(&restored);
    tensors.extend(optimizer_tensors("opt.model", &snapshot.model_opt, &param_names));
    tensors.extend(optimizer_tensors("opt.gsv", &snapshot.gsv_opt, &gsv_names));
    if let Some(pi) = pi_star {
        tensors.extend(param_names.iter().map(|n| format!("pi_star.{n}")).zip(pi.iter()));
    }
    let manifest = Manifest {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        kind: CheckpointKind::Search,
        config_hash: config.hash(),
        config: config.clone(),
        dtype: S::DTYPE.to_string(),
        step: snapshot.step,
        total_steps,
        complete: pi_star.is_some(),
        model_opt_step: snapshot.model_opt.step,
        gsv_opt_step: snapshot.gsv_opt.step,
        plan: None,
    };
    write_checkpoint(dir, &manifest, &tensors)
}

pub fn load_search<S: Scalar>(dir: &Path) -> Result<SearchCheckpoint<S>> {
    let (manifest, mut tensors) = read_checkpoint::<S>(dir)?;
    if manifest.kind != CheckpointKind::Search {
        return Err(Error::Checkpoint("not a search checkpoint".into()));
    }
    let cfg = &manifest.config;
    let mut model = ToyTransformer::for_search(&cfg.model, &cfg.moe_settings(), cfg.moe.c_b, cfg.bilevel.seed)?;
    load_model_tensors(&mut model, &mut tensors)?;
    let param_names = model.param_names();
    let gsv_names = model.gsv_names();
    let mut model_opt = Optimizer::new(cfg.bilevel.optimizer_mode, cfg.bilevel.model_adam);
    model_opt.step = manifest.model_opt_step;
    restore_optimizer("opt.model", &mut model_opt, &param_names, &mut tensors)?;
    let mut gsv_opt = Optimizer::new(cfg.bilevel.optimizer_mode, cfg.bilevel.gsv_adam);
    gsv_opt.step = manifest.gsv_opt_step;
    restore_optimizer("opt.gsv", &mut gsv_opt, &gsv_names, &mut tensors)?;
    let pi_star = if manifest.complete {
        Some(
            param_names
                .iter()
                .map(|n| {
                    tensors
                        .remove(&format!("pi_star.{n}"))
                        .ok_or_else(|| Error::Checkpoint(format!("missing tensor pi_star.{n}")))
                })
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    let snapshot = SearchSnapshot::capture(&model, &model_opt, &gsv_opt, manifest.step);
    Ok(SearchCheckpoint {
        manifest,
        model,
        snapshot,
        pi_star,
    })
}

pub fn save_final<S: Scalar>(dir: &Path, config: &RunConfig, model: &ToyTransformer<S>, plan: &AllocationPlan) -> Result<()> {
    let manifest = Manifest {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        kind: CheckpointKind::Final,
        config_hash: config.hash(),
        config: config.clone(),
        dtype: S::DTYPE.to_string(),
        step: 0,
        total_steps: 0,
        complete: true,
        model_opt_step: 0,
        gsv_opt_step: 0,
        plan: Some(plan.clone()),
    };
    write_checkpoint(dir, &manifest, &model_tensors(model))
}

pub fn load_final<S: Scalar>(dir: &Path) -> Result<(Manifest, ToyTransformer<S>)> {
    let (manifest, mut tensors) = read_checkpoint::<S>(dir)?;
    if manifest.kind != CheckpointKind::Final {
        return Err(Error::Checkpoint("not a final-model checkpoint".into()));
    }
    let plan = manifest
        .plan
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("final checkpoint carries no plan".into()))?;
    let cfg = &manifest.config;
    let mut model = ToyTransformer::from_plan(&cfg.model, plan, &cfg.moe_settings(), cfg.moe.c_b, 0)?;
    load_model_tensors(&mut model, &mut tensors)?;
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Ok((manifest, model))
}
