//! Checkpoint directories: `params.bin` holds every tensor as little-endian
//! f64 in manifest order, `manifest.json` describes the architecture.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::network::{ExpertInit, RouterInit, MoEModel, RoundRecord};
use crate::data::{read_json, write_json, Quantizer};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Mat;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Offset into the blob, in scalars.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub config_hash: String,
    pub experts_per_layer: Vec<usize>,
    pub cities: Vec<u32>,
    pub quantizer: Quantizer,
    pub num_scalars: usize,
    pub blob_sha256: String,
    pub fingerprint: String,
    pub lineage: Vec<RoundRecord>,
    pub params: Vec<ParamEntry>,
}

fn mismatch(field: impl Into<String>, expected: impl ToString, found: impl ToString) -> Error {
    Error::CheckpointMismatch {
        field: field.into(),
        expected: expected.to_string(),
        found: found.to_string(),
    }
}

pub fn save_checkpoint(model: &MoEModel, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::with_capacity(model.params.num_scalars() * 8);
    let mut entries = Vec::with_capacity(model.params.len());
    let mut offset = 0;
    for (_, name, m) in model.params.iter() {
        if !m.is_finite() {
            return Err(Error::NonFinite("model parameter"));
        }
        entries.push(ParamEntry {
            name: name.to_string(),
            rows: m.rows,
            cols: m.cols,
            offset,
        });
        offset += m.len();
        for v in &m.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        config_hash: model.config.hash(),
        experts_per_layer: model.expert_counts().to_vec(),
        cities: model.cities().to_vec(),
        quantizer: model.quantizer.clone(),
        num_scalars: offset,
        blob_sha256: hex::encode(Sha256::digest(&blob)),
        fingerprint: model.params.fingerprint(),
        lineage: model.lineage.clone(),
        params: entries,
    };
    let blob_path = dir.join(PARAMS_FILE);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    read_json(&dir.join(MANIFEST_FILE))
}

pub fn load_checkpoint(dir: &Path) -> Result<MoEModel> {
    let m = read_manifest(dir)?;
    if m.format_version != FORMAT_VERSION {
        return Err(mismatch("format_version", FORMAT_VERSION, m.format_version));
    }
    if m.config.hash() != m.config_hash {
        return Err(mismatch("config_hash", m.config.hash(), &m.config_hash));
    }
    if m.experts_per_layer.len() != m.config.n_layers {
        return Err(mismatch("experts_per_layer.len", m.config.n_layers, m.experts_per_layer.len()));
    }
    let blob_path = dir.join(PARAMS_FILE);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    if blob.len() != m.num_scalars * 8 {
        return Err(mismatch("params.bin length", m.num_scalars * 8, blob.len()));
    }
    let sha = hex::encode(Sha256::digest(&blob));
    if sha != m.blob_sha256 {
        return Err(mismatch("blob_sha256", &m.blob_sha256, sha));
    }
    let shapes: BTreeMap<&str, (usize, usize)> = m.params.iter().map(|p| (p.name.as_str(), (p.rows, p.cols))).collect();
    for (layer, &n) in m.experts_per_layer.iter().enumerate() {
        let name = format!("layer.{layer}.router.w");
        let rows = shapes.get(name.as_str()).map(|s| s.0).unwrap_or(0);
        if rows != n {
            return Err(mismatch(format!("experts_per_layer[{layer}]"), rows, n));
        }
    }

    let expected = skeleton_shapes(&m)?;
    for (name, shape) in &expected {
        match shapes.get(name.as_str()) {
            None => return Err(mismatch(name.clone(), format!("{shape:?}"), "missing")),
            Some(found) if found != shape => return Err(mismatch(name.clone(), format!("{shape:?}"), format!("{found:?}"))),
            _ => {}
        }
    }
    if let Some(extra) = shapes.keys().find(|n| !expected.contains_key(**n)) {
        return Err(mismatch(extra.to_string(), "absent", "present"));
    }

    let mut store = ParamStore::new();
    for p in &m.params {
        let n = p.rows * p.cols;
        if p.offset + n > m.num_scalars {
            return Err(mismatch(format!("{}.offset", p.name), format!("<= {}", m.num_scalars - n), p.offset));
        }
        let data: Vec<f64> = blob[p.offset * 8..(p.offset + n) * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.add(p.name.clone(), Mat::from_vec(p.rows, p.cols, data));
    }
    let model = MoEModel::from_parts(m.config, store, m.quantizer, m.experts_per_layer, m.cities, m.lineage)?;
    if model.params.fingerprint() != m.fingerprint {
        return Err(mismatch("fingerprint", &m.fingerprint, model.params.fingerprint()));
    }
    Ok(model)
}

/// Parameter shapes of a freshly built model with the manifest's
/// architecture, expert counts and city count.
fn skeleton_shapes(m: &Manifest) -> Result<BTreeMap<String, (usize, usize)>> {
    let mut model = MoEModel::new(m.config.clone(), m.quantizer.clone())?;
    let extra = m
        .experts_per_layer
        .iter()
        .map(|&n| n.checked_sub(m.config.initial_experts))
        .collect::<Option<Vec<usize>>>()
        .ok_or_else(|| mismatch("experts_per_layer", format!(">= {}", m.config.initial_experts), format!("{:?}", m.experts_per_layer)))?;
    let rounds = extra.iter().copied().max().unwrap_or(0);
    for r in 0..rounds {
        // layers that already reached their count get a placeholder that is
        // dropped below
        let init = ExpertInit {
            copy_from: vec![0; m.config.n_layers],
            noise_std: 0.0,
            router: RouterInit::Bias(0.0),
            seed: r as u64,
        };
        model.add_expert(&init)?;
    }
    for &c in &m.cities {
        model.register_city(c);
    }
    let mut shapes: BTreeMap<String, (usize, usize)> = model.params.iter().map(|(_, n, v)| (n.to_string(), v.shape())).collect();
    for (layer, &n) in m.experts_per_layer.iter().enumerate() {
        for e in n..m.config.initial_experts + rounds {
            let prefix = super::network::expert_prefix(layer, e);
            shapes.retain(|k, _| !k.starts_with(&format!("{prefix}.")));
        }
        shapes.insert(format!("layer.{layer}.router.w"), (n, m.config.router_input_dim()));
        shapes.insert(format!("layer.{layer}.router.b"), (1, n));
    }
    Ok(shapes)
}
