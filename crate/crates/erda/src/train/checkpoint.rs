//! Binary checkpoints that capture a training run exactly: parameters,
//! optimizer velocity, prototype bank, epoch counter, and the RNG position,
//! plus the full config embedded as text. Loading one and continuing
//! reproduces the uninterrupted run bit for bit.
//!
//! Layout: an 8-byte magic (`ERDACKP1`), a little-endian `u32` format
//! version, a little-endian `u64` length-prefixed JSON header, then the raw
//! tensor payload — every tensor's values as little-endian `f64` in the
//! order the header's manifest lists them.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelParams, ModelSpec, TrainConfig, TrainError, TrainState};
use crate::network::Parameters;
use crate::pseudo::PrototypeBank;

const MAGIC: &[u8; 8] = b"ERDACKP1";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaHeader {
    /// The training config, embedded as TOML text (the config format itself
    /// can represent `inf`, which JSON cannot).
    config_toml: String,
    epoch: usize,
    input_dim: usize,
    num_classes: usize,
    bank_initialized: Vec<bool>,
    rng_seed: Vec<u8>,
    rng_word_pos: u128,
    rng_stream: u64,
    tensors: Vec<TensorMeta>,
}

fn err(msg: impl Into<String>) -> TrainError {
    TrainError::Checkpoint(msg.into())
}

/// Canonical tensor order for a given model shape. Save and load both walk
/// this list, so the payload layout can never drift between the two.
fn tensor_layout(spec: &ModelSpec, num_classes: usize, proj_dim: usize) -> Vec<TensorMeta> {
    let mut layout = Vec::new();
    for prefix in ["params", "velocity"] {
        for (comp, maybe) in [
            ("f1", Some(&spec.f1)),
            ("f2", Some(&spec.f2)),
            ("proj", spec.proj.as_ref()),
            ("head", Some(&spec.head)),
        ] {
            let Some(mlp) = maybe else { continue };
            let mut in_dim = mlp.input_dim();
            for (li, &out_dim) in mlp.layer_widths[1..].iter().enumerate() {
                layout.push(TensorMeta {
                    name: format!("{prefix}.{comp}.{li}.weight"),
                    rows: out_dim,
                    cols: in_dim,
                });
                layout.push(TensorMeta {
                    name: format!("{prefix}.{comp}.{li}.bias"),
                    rows: out_dim,
                    cols: 1,
                });
                in_dim = out_dim;
            }
        }
    }
    layout.push(TensorMeta {
        name: "bank.centroids".into(),
        rows: num_classes,
        cols: proj_dim,
    });
    layout
}

fn model_tensor_data(params: &ModelParams, spec: &ModelSpec, out: &mut Vec<Vec<f64>>) {
    for (_, maybe) in [
        ("f1", Some(&params.f1)),
        ("f2", Some(&params.f2)),
        ("proj", params.proj.as_ref()),
        ("head", Some(&params.head)),
    ] {
        let Some(component) = maybe else { continue };
        for layer in &component.layers {
            out.push(layer.weight.clone());
            out.push(layer.bias.clone());
        }
    }
    let _ = spec;
}

fn fill_model_tensors(
    params: &mut ModelParams,
    blobs: &mut std::vec::IntoIter<Vec<f64>>,
) -> Result<(), TrainError> {
    let components: Vec<&mut Parameters> = {
        let mut v: Vec<&mut Parameters> = vec![&mut params.f1, &mut params.f2];
        if let Some(proj) = params.proj.as_mut() {
            v.push(proj);
        }
        v.push(&mut params.head);
        v
    };
    for component in components {
        for layer in &mut component.layers {
            let weight = blobs.next().ok_or_else(|| err("payload ended early"))?;
            let bias = blobs.next().ok_or_else(|| err("payload ended early"))?;
            if weight.len() != layer.weight.len() || bias.len() != layer.bias.len() {
                return Err(err("tensor size does not match the model shape"));
            }
            layer.weight = weight;
            layer.bias = bias;
        }
    }
    Ok(())
}

/// Serialize the full training state to `path`.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    cfg: &TrainConfig,
    state: &TrainState,
) -> Result<(), TrainError> {
    let path = path.as_ref();
    let spec = &state.spec;
    let (centroids, initialized, _momentum) = state.bank.clone().into_parts();
    let proj_dim = spec.proj_output_dim();

    let layout = tensor_layout(spec, spec.num_classes(), proj_dim);
    let mut blobs: Vec<Vec<f64>> = Vec::with_capacity(layout.len());
    model_tensor_data(&state.params, spec, &mut blobs);
    model_tensor_data(&state.velocity, spec, &mut blobs);
    blobs.push(centroids.into_iter().flatten().collect());
    assert_eq!(blobs.len(), layout.len(), "layout and payload must agree");
    for (meta, blob) in layout.iter().zip(&blobs) {
        assert_eq!(
            meta.rows * meta.cols,
            blob.len(),
            "tensor {} has inconsistent shape",
            meta.name
        );
    }

    let header = MetaHeader {
        config_toml: cfg.to_toml_string()?,
        epoch: state.epoch,
        input_dim: spec.input_dim(),
        num_classes: spec.num_classes(),
        bank_initialized: initialized,
        rng_seed: state.rng.get_seed().to_vec(),
        rng_word_pos: state.rng.get_word_pos(),
        rng_stream: state.rng.get_stream(),
        tensors: layout,
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| err(format!("header encoding failed: {e}")))?;

    let payload_len: usize = blobs.iter().map(|b| b.len() * 8).sum();
    let mut bytes = Vec::with_capacity(8 + 4 + 8 + header_json.len() + payload_len);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for blob in &blobs {
        for v in blob {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes)
        .map_err(|e| err(format!("cannot write {}: {e}", path.display())))
}

/// Read a checkpoint back into a config and a resumable state.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(TrainConfig, TrainState), TrainError> {
    let path = path.as_ref();
    let bytes =
        fs::read(path).map_err(|e| err(format!("cannot read {}: {e}", path.display())))?;
    if bytes.len() < 20 {
        return Err(err("file too short to be a checkpoint"));
    }
    if &bytes[0..8] != MAGIC {
        return Err(err("bad magic: not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(err(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let payload_start = 20usize
        .checked_add(header_len)
        .ok_or_else(|| err("corrupt header length"))?;
    if bytes.len() < payload_start {
        return Err(err("truncated header"));
    }
    let header: MetaHeader = serde_json::from_slice(&bytes[20..payload_start])
        .map_err(|e| err(format!("corrupt header: {e}")))?;

    let cfg = TrainConfig::from_toml_str(&header.config_toml)?;
    let spec = ModelSpec::new(
        header.input_dim,
        header.num_classes,
        cfg.backbone_width,
        cfg.projection_depth,
        cfg.projection_dim,
        cfg.knn_k,
    )?;
    let proj_dim = spec.proj_output_dim();

    let layout = tensor_layout(&spec, header.num_classes, proj_dim);
    if layout.len() != header.tensors.len() {
        return Err(err(format!(
            "manifest lists {} tensors, model shape needs {}",
            header.tensors.len(),
            layout.len()
        )));
    }
    for (expected, got) in layout.iter().zip(&header.tensors) {
        if expected.name != got.name || expected.rows != got.rows || expected.cols != got.cols {
            return Err(err(format!(
                "manifest mismatch at {}: stored {}x{} {:?}",
                expected.name, got.rows, got.cols, got.name
            )));
        }
    }
    let payload_len: usize = layout.iter().map(|t| t.rows * t.cols * 8).sum();
    if bytes.len() != payload_start + payload_len {
        return Err(err(format!(
            "payload is {} bytes, manifest implies {payload_len}",
            bytes.len() - payload_start
        )));
    }

    let mut cursor = payload_start;
    let mut blobs = Vec::with_capacity(layout.len());
    for meta in &layout {
        let count = meta.rows * meta.cols;
        let mut blob = Vec::with_capacity(count);
        for _ in 0..count {
            blob.push(f64::from_le_bytes(
                bytes[cursor..cursor + 8].try_into().unwrap(),
            ));
            cursor += 8;
        }
        blobs.push(blob);
    }

    let mut params = ModelParams::zeros_like(&spec);
    let mut velocity = ModelParams::zeros_like(&spec);
    let centroid_blob = blobs.pop().ok_or_else(|| err("payload ended early"))?;
    let mut iter = blobs.into_iter();
    fill_model_tensors(&mut params, &mut iter)?;
    fill_model_tensors(&mut velocity, &mut iter)?;
    if iter.next().is_some() {
        return Err(err("payload has trailing tensors"));
    }

    if header.bank_initialized.len() != header.num_classes {
        return Err(err("bank flag count does not match class count"));
    }
    let centroids: Vec<Vec<f64>> = centroid_blob
        .chunks(proj_dim)
        .map(|c| c.to_vec())
        .collect();
    let bank = PrototypeBank::from_parts(centroids, header.bank_initialized, cfg.momentum_m)?;

    let seed: [u8; 32] = header
        .rng_seed
        .as_slice()
        .try_into()
        .map_err(|_| err("RNG seed must be exactly 32 bytes"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(header.rng_stream);
    rng.set_word_pos(header.rng_word_pos);

    Ok((
        cfg,
        TrainState {
            spec,
            params,
            velocity,
            bank,
            epoch: header.epoch,
            rng,
        },
    ))
}
