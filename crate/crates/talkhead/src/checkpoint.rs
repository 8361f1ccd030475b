//! `ETGC` checkpoints: the full training state (parameters, optimiser
//! moments, per-identity data, progress) plus the run configuration that
//! produced it. Loading against a different configuration is an error.
//!
//! Sections, in order:
//!
//! - `meta` (text): `stage`, `iteration`, `config_hash`, `identities`, `params`
//! - `config` (text): canonical run configuration
//! - `params` (text): one `name group decay` line per parameter
//! - `p/<name>` (tensor): parameter values
//! - `adam` (tensor): `[lr, beta1, beta2, eps, weight_decay]`
//! - `adam.steps` (indices): `param, step` pairs for every parameter with moments
//! - `m/<name>`, `v/<name>` (tensor): moments
//! - `id<i>.name` (text), `id<i>.embedding` (tensor), `id<i>.head` (ETGA bytes),
//!   `id<i>.bind_tri` (indices), `id<i>.bind_bary` (tensor), `id<i>.mouth` (indices)

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use talkhead_core::autodiff::ParamId;
use talkhead_core::nn::{ParamGroup, ParamStore};
use talkhead_core::optim::{AdamW, AdamWConfig, Moments};
use talkhead_core::tensor::Tensor;
use talkhead_core::train::{Checkpoint, IdentityMeta, Model, Stage};

use crate::asset;
use crate::config::RunConfig;
use crate::etg::{Body, Container, FormatError};
use crate::fsio::{self, IoError};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ETGC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{path}: {source}")]
    Format {
        path: String,
        #[source]
        source: FormatError,
    },
    #[error("checkpoint was written with config hash {found:016x}, this run has {expected:016x}")]
    ConfigMismatch { expected: u64, found: u64 },
    #[error("checkpoint state does not match its configuration: {0}")]
    Inconsistent(String),
}

fn stage_text(s: Stage) -> String {
    match s {
        Stage::Pretrain => "pretrain".into(),
        Stage::Adapt { identity } => format!("adapt:{identity}"),
    }
}

fn parse_stage(s: &str) -> Option<Stage> {
    match s {
        "pretrain" => Some(Stage::Pretrain),
        _ => s
            .strip_prefix("adapt:")?
            .parse()
            .ok()
            .map(|identity| Stage::Adapt { identity }),
    }
}

fn group_text(g: ParamGroup) -> String {
    match g {
        ParamGroup::Network => "network".into(),
        ParamGroup::AdaIn(i) => format!("adain:{i}"),
        ParamGroup::Gaussians(i) => format!("gaussians:{i}"),
    }
}

fn parse_group(s: &str) -> Option<ParamGroup> {
    if s == "network" {
        return Some(ParamGroup::Network);
    }
    let (kind, i) = s.split_once(':')?;
    let i = i.parse().ok()?;
    match kind {
        "adain" => Some(ParamGroup::AdaIn(i)),
        "gaussians" => Some(ParamGroup::Gaussians(i)),
        _ => None,
    }
}

pub fn encode(ck: &Checkpoint, run: &RunConfig) -> Result<Vec<u8>, CheckpointError> {
    if ck.config != run.train() || ck.model.config != run.model() {
        return Err(CheckpointError::Inconsistent(
            "training or model configuration differs from the run configuration".into(),
        ));
    }
    let model = &ck.model;
    let entries = model.store.entries();
    let mut c = Container::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
    c.push(
        "meta",
        Body::Text(format!(
            "stage {}\niteration {}\nconfig_hash {:016x}\nidentities {}\nparams {}\n",
            stage_text(ck.stage),
            ck.iteration,
            run.hash(),
            model.identities.len(),
            entries.len()
        )),
    );
    c.push("config", Body::Text(run.canonical()));
    let index: String = entries
        .iter()
        .map(|e| format!("{} {} {}\n", e.name, group_text(e.group), u8::from(e.decay)))
        .collect();
    c.push("params", Body::Text(index));
    for e in entries {
        c.push_tensor(format!("p/{}", e.name), &e.value);
    }
    let a = ck.optimizer.config;
    c.push_tensor(
        "adam",
        &Tensor::vector(vec![a.lr, a.beta1, a.beta2, a.eps, a.weight_decay])
            .map_err(|e| CheckpointError::Inconsistent(format!("optimiser settings: {e}")))?,
    );
    let steps = ck
        .optimizer
        .moments
        .iter()
        .flat_map(|(id, m)| [id.0 as u64, m.step])
        .collect();
    c.push("adam.steps", Body::Indices(steps));
    for (id, m) in &ck.optimizer.moments {
        let name = &entries
            .get(id.0)
            .ok_or_else(|| CheckpointError::Inconsistent(format!("moments for unknown parameter {}", id.0)))?
            .name;
        c.push_tensor(format!("m/{name}"), &m.m);
        c.push_tensor(format!("v/{name}"), &m.v);
    }
    for (i, id) in model.identities.iter().enumerate() {
        c.push(format!("id{i}.name"), Body::Text(id.name.clone()));
        c.push_tensor(format!("id{i}.embedding"), &id.embedding);
        c.push(format!("id{i}.head"), Body::Bytes(asset::encode_head(&id.head)));
        c.push(
            format!("id{i}.bind_tri"),
            Body::Indices(id.bindings.iter().map(|&(t, _)| t as u64).collect()),
        );
        c.push_tensor(
            format!("id{i}.bind_bary"),
            &Tensor::new(
                vec![id.bindings.len(), 3],
                id.bindings.iter().flat_map(|&(_, b)| b).collect(),
            )
            .map_err(|e| CheckpointError::Inconsistent(e.to_string()))?,
        );
        c.push(
            format!("id{i}.mouth"),
            Body::Indices(id.mouth.iter().map(|&g| g as u64).collect()),
        );
    }
    Ok(c.encode())
}

/// Header values of a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Meta {
    pub stage: Stage,
    pub iteration: usize,
    pub config_hash: u64,
    pub identities: usize,
    pub params: usize,
}

fn parse_meta(c: &Container) -> Result<Meta, FormatError> {
    let text = c.text("meta")?;
    let offset = c.get("meta")?.offset;
    let bad = |reason: String| FormatError { offset, reason };
    let mut kv = BTreeMap::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once(' ')
            .ok_or_else(|| bad(format!("malformed meta line '{line}'")))?;
        kv.insert(k, v);
    }
    let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(format!("meta lacks '{k}'")));
    let num = |k: &str| -> Result<usize, FormatError> {
        get(k)?.parse().map_err(|_| bad(format!("meta '{k}' is not a count")))
    };
    Ok(Meta {
        stage: parse_stage(get("stage")?).ok_or_else(|| bad("unknown stage".into()))?,
        iteration: num("iteration")?,
        config_hash: u64::from_str_radix(get("config_hash")?, 16).map_err(|_| bad("bad config hash".into()))?,
        identities: num("identities")?,
        params: num("params")?,
    })
}

/// Decode without comparing against a run configuration; returns the
/// embedded one.
pub fn decode(bytes: &[u8]) -> Result<(Checkpoint, RunConfig, Meta), FormatError> {
    let c = Container::decode(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let meta = parse_meta(&c)?;
    let config_offset = c.get("config")?.offset;
    let run = RunConfig::parse(c.text("config")?).map_err(|e| FormatError {
        offset: config_offset,
        reason: format!("embedded config: {e}"),
    })?;
    if run.hash() != meta.config_hash {
        return Err(FormatError {
            offset: config_offset,
            reason: "embedded config does not match its recorded hash".into(),
        });
    }

    let params_offset = c.get("params")?.offset;
    let mut store = ParamStore::new();
    for line in c.text("params")?.lines() {
        let bad = || FormatError {
            offset: params_offset,
            reason: format!("malformed parameter line '{line}'"),
        };
        let mut parts = line.split(' ');
        let (Some(name), Some(group), Some(decay), None) = (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad());
        };
        let group = parse_group(group).ok_or_else(bad)?;
        let decay = match decay {
            "0" => false,
            "1" => true,
            _ => return Err(bad()),
        };
        store.add(name, group, c.tensor(&format!("p/{name}"))?, decay);
    }
    if store.len() != meta.params {
        return Err(FormatError {
            offset: params_offset,
            reason: format!("{} parameters listed, meta says {}", store.len(), meta.params),
        });
    }

    let adam = c.tensor("adam")?;
    let a = adam.data();
    if a.len() != 5 {
        return Err(FormatError {
            offset: c.get("adam")?.offset,
            reason: "optimiser settings need 5 values".into(),
        });
    }
    let mut optimizer = AdamW::new(AdamWConfig {
        lr: a[0],
        beta1: a[1],
        beta2: a[2],
        eps: a[3],
        weight_decay: a[4],
    });
    let steps = c.indices("adam.steps")?;
    let steps_offset = c.get("adam.steps")?.offset;
    if steps.len() % 2 != 0 {
        return Err(FormatError {
            offset: steps_offset,
            reason: "optimiser steps must come in pairs".into(),
        });
    }
    for pair in steps.chunks_exact(2) {
        let id = pair[0] as usize;
        if id >= store.len() {
            return Err(FormatError {
                offset: steps_offset,
                reason: format!("moments for unknown parameter {id}"),
            });
        }
        let entry = store.entry(ParamId(id));
        let m = c.tensor(&format!("m/{}", entry.name))?;
        let v = c.tensor(&format!("v/{}", entry.name))?;
        if m.dims() != entry.value.dims() || v.dims() != entry.value.dims() {
            return Err(FormatError {
                offset: c.get(&format!("m/{}", entry.name))?.offset,
                reason: format!("moments of '{}' have the wrong shape", entry.name),
            });
        }
        optimizer.moments.insert(ParamId(id), Moments { m, v, step: pair[1] });
    }

    let mut identities = Vec::with_capacity(meta.identities);
    for i in 0..meta.identities {
        let (head_bytes, head_offset) = c.bytes(&format!("id{i}.head"))?;
        let head = asset::decode_head(head_bytes, head_offset)?;
        let tri = c.indices(&format!("id{i}.bind_tri"))?;
        let bary = c.tensor(&format!("id{i}.bind_bary"))?;
        if bary.dims() != [tri.len(), 3] {
            return Err(FormatError {
                offset: c.get(&format!("id{i}.bind_bary"))?.offset,
                reason: format!(
                    "identity {i}: {} triangles but barycentrics {:?}",
                    tri.len(),
                    bary.dims()
                ),
            });
        }
        let bindings: Vec<_> = tri
            .iter()
            .zip(bary.data().chunks_exact(3))
            .map(|(&t, b)| (t as usize, [b[0], b[1], b[2]]))
            .collect();
        identities.push(IdentityMeta {
            name: c.text(&format!("id{i}.name"))?.to_string(),
            embedding: c.tensor(&format!("id{i}.embedding"))?,
            head: Arc::new(head),
            bindings: bindings.into(),
            mouth: c
                .indices(&format!("id{i}.mouth"))?
                .iter()
                .map(|&g| g as usize)
                .collect(),
        });
    }
    let model = Model::from_parts(run.model(), store, identities).map_err(|reason| FormatError {
        offset: params_offset,
        reason,
    })?;
    let ck = Checkpoint {
        model,
        optimizer,
        iteration: meta.iteration,
        stage: meta.stage,
        config: run.train(),
    };
    Ok((ck, run, meta))
}

pub fn save(path: &Path, ck: &Checkpoint, run: &RunConfig) -> Result<(), CheckpointError> {
    fsio::write_atomic(path, &encode(ck, run)?)?;
    Ok(())
}

/// Load a checkpoint whatever configuration wrote it.
pub fn load_any(path: &Path) -> Result<(Checkpoint, RunConfig, Meta), CheckpointError> {
    decode(&fsio::read(path)?).map_err(|source| CheckpointError::Format {
        path: path.display().to_string(),
        source,
    })
}

/// Load a checkpoint and require that it was written under `run`.
pub fn load(path: &Path, run: &RunConfig) -> Result<Checkpoint, CheckpointError> {
    let (ck, _, meta) = load_any(path)?;
    if meta.config_hash != run.hash() {
        return Err(CheckpointError::ConfigMismatch {
            expected: run.hash(),
            found: meta.config_hash,
        });
    }
    Ok(ck)
}
