//! Checkpoint persistence: a JSON manifest (layer names, shapes, precision,
//! rebuild descriptor) next to a flat little-endian blob of parameters in
//! manifest order.

use std::io::{Read, Write};
use std::path::Path;

use crate::scalar::{Precision, Scalar};

use super::{build_context_module, build_bottleneck_stack, build_model, Model, ModelConfig, ModelDescriptor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest parse error: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
    #[error("checkpoint precision is {found}, expected {expected}")]
    Precision { expected: Precision, found: Precision },
    #[error("parameter blob holds {got} bytes, manifest implies {expected}")]
    BlobLength { expected: usize, got: usize },
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
    #[error("a custom-built model cannot be rebuilt from its descriptor")]
    CustomModel,
    #[error(transparent)]
    Model(#[from] super::ModelError),
}

#[derive(serde::Serialize, serde::Deserialize)]
struct LayerEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Manifest {
    format_version: u32,
    precision: Precision,
    descriptor: ModelDescriptor,
    layers: Vec<LayerEntry>,
    total_scalars: usize,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `manifest.json` and `params.bin` into `dir` (created if missing).
pub fn save_checkpoint<T: Scalar>(model: &Model<T>, dir: &Path) -> Result<(), CheckpointError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let named = model.named_parameters();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        precision: T::PRECISION,
        descriptor: model.descriptor.clone(),
        layers: named
            .iter()
            .map(|(name, t)| LayerEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        total_scalars: named.iter().map(|(_, t)| t.numel()).sum(),
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let file = std::fs::File::create(&manifest_path).map_err(io_err(&manifest_path))?;
    serde_json::to_writer_pretty(file, &manifest)?;

    let mut blob = Vec::with_capacity(manifest.total_scalars * T::BYTES);
    for (_, tensor) in &named {
        for &v in tensor.data() {
            v.write_le(&mut blob);
        }
    }
    let blob_path = dir.join(BLOB_FILE);
    let mut file = std::fs::File::create(&blob_path).map_err(io_err(&blob_path))?;
    file.write_all(&blob).map_err(io_err(&blob_path))?;
    Ok(())
}

fn read_manifest(dir: &Path) -> Result<Manifest, CheckpointError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let file = std::fs::File::open(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Manifest = serde_json::from_reader(file)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Version(manifest.format_version));
    }
    Ok(manifest)
}

/// Rebuilds the model from the manifest descriptor and restores parameters
/// bit-identically from the blob.
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<Model<T>, CheckpointError> {
    let manifest = read_manifest(dir)?;
    if manifest.precision != T::PRECISION {
        return Err(CheckpointError::Precision {
            expected: T::PRECISION,
            found: manifest.precision,
        });
    }
    let mut model: Model<T> = match &manifest.descriptor {
        ModelDescriptor::Network { config } => build_model(config, 0)?,
        ModelDescriptor::BottleneckStack { channels, depth } => {
            build_bottleneck_stack(*channels, *depth, 0)?
        }
        ModelDescriptor::ContextOnly {
            context,
            in_channels,
            out_channels,
            map_size,
        } => build_context_module(context, *in_channels, *out_channels, *map_size, 0)?,
        ModelDescriptor::Custom => return Err(CheckpointError::CustomModel),
    };

    // Validate the manifest layer list against the rebuilt model.
    let expected: Vec<(String, Vec<usize>)> = model
        .named_parameters()
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec()))
        .collect();
    if expected.len() != manifest.layers.len() {
        return Err(CheckpointError::Mismatch(format!(
            "model has {} parameter tensors, manifest lists {}",
            expected.len(),
            manifest.layers.len()
        )));
    }
    for ((name, shape), entry) in expected.iter().zip(&manifest.layers) {
        if name != &entry.name {
            return Err(CheckpointError::Mismatch(format!(
                "unknown layer name {:?} (model expects {:?})",
                entry.name, name
            )));
        }
        if shape != &entry.shape {
            return Err(CheckpointError::Mismatch(format!(
                "layer {:?} has shape {:?} in the manifest but {:?} in the model",
                entry.name, entry.shape, shape
            )));
        }
    }

    let blob_path = dir.join(BLOB_FILE);
    let mut blob = Vec::new();
    std::fs::File::open(&blob_path)
        .map_err(io_err(&blob_path))?
        .read_to_end(&mut blob)
        .map_err(io_err(&blob_path))?;
    let expected_bytes = manifest.total_scalars * T::BYTES;
    if blob.len() != expected_bytes {
        return Err(CheckpointError::BlobLength {
            expected: expected_bytes,
            got: blob.len(),
        });
    }

    let mut offset = 0usize;
    for param in model.parameters_mut() {
        let n = param.numel();
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let at = offset + i * T::BYTES;
            data.push(T::read_le(&blob[at..at + T::BYTES]));
        }
        offset += n * T::BYTES;
        *param = crate::tensor::Tensor::param(param.shape().to_vec(), data)
            .expect("shape unchanged");
    }
    Ok(model)
}

/// Load that additionally requires the checkpoint to describe `config`.
pub fn load_checkpoint_expecting<T: Scalar>(
    dir: &Path,
    config: &ModelConfig,
) -> Result<Model<T>, CheckpointError> {
    let manifest = read_manifest(dir)?;
    match &manifest.descriptor {
        ModelDescriptor::Network { config: found } if found == config => load_checkpoint(dir),
        ModelDescriptor::Network { config: found } => Err(CheckpointError::Mismatch(format!(
            "checkpoint was saved for a different config (e.g. {} refinement stages vs {})",
            found.num_refinement_stages, config.num_refinement_stages
        ))),
        _ => Err(CheckpointError::Mismatch(
            "checkpoint does not hold a network model".into(),
        )),
    }
}
