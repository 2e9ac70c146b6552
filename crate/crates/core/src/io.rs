//! Model file format: a human-readable JSON manifest plus a raw binary blob
//! of little-endian f32 tensors, row-major, with byte offsets and a sha256
//! checksum recorded in the manifest.
//!
//! Writes go to a temp file in the target directory and are renamed into
//! place, so a failed command never leaves partial outputs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::error::CoreError;
use crate::nn::{Conv2dLayer, DenseLayer, Layer, Model, PactLayer, Padding, QuantScheme};
use crate::quantize::PactParams;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error("manifest error in {path}: {message}")]
    Manifest { path: String, message: String },

    #[error("unsupported format version {0}")]
    Version(u32),

    #[error("blob checksum mismatch for {path}")]
    Checksum { path: String },

    #[error("tensor {name}: offset {offset}+{byte_len} exceeds blob length {blob_len}")]
    BadOffset { name: String, offset: u64, byte_len: u64, blob_len: u64 },

    #[error("manifest references missing tensor {0}")]
    MissingTensor(String),

    #[error(transparent)]
    Core(#[from] CoreError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelIoError + '_ {
    move |source| ModelIoError::Io { path: path.display().to_string(), source }
}

/// Serialized layer description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Dense {
        name: String,
        in_features: usize,
        out_features: usize,
        weight: String,
        bias: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        scheme: Option<QuantScheme>,
    },
    Conv2d {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        padding: Padding,
        weight: String,
        bias: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        scheme: Option<QuantScheme>,
    },
    Relu {
        name: String,
    },
    Pact {
        name: String,
        alpha: f64,
        bits: u32,
    },
    Flatten {
        name: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub byte_len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    /// Blob filename, relative to the manifest.
    pub file: String,
    pub byte_len: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub loss: String,
    pub layers: Vec<LayerSpec>,
    pub tensors: Vec<TensorSpec>,
    pub blob: BlobSpec,
    /// Free-form, deterministic provenance (seeds, configs); never timestamps.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ModelIoError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| ModelIoError::Io {
        path: path.display().to_string(),
        source: e.error,
    })?;
    Ok(())
}

fn tensor_f32_bytes(t: &Tensor) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(t.len() * 4);
    for &v in t.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    bytes
}

fn blob_path_for(manifest_path: &Path, blob_file: &str) -> PathBuf {
    manifest_path.parent().unwrap_or(Path::new(".")).join(blob_file)
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Writes `<path>` (manifest JSON) and its sidecar blob atomically.
pub fn save_model(
    model: &Model,
    manifest_path: &Path,
    provenance: Option<serde_json::Value>,
) -> Result<Manifest, ModelIoError> {
    let stem = manifest_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".to_string());
    let blob_file = format!("{stem}.bin");

    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    let mut push_tensor = |name: String, t: &Tensor, blob: &mut Vec<u8>| {
        let bytes = tensor_f32_bytes(t);
        tensors.push(TensorSpec {
            name,
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
            byte_len: bytes.len() as u64,
        });
        blob.extend_from_slice(&bytes);
    };

    let mut layers = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        match layer {
            Layer::Dense(l) => {
                let weight_name = format!("{}.weight", l.name);
                let bias_name = format!("{}.bias", l.name);
                push_tensor(weight_name.clone(), &l.weight, &mut blob);
                push_tensor(bias_name.clone(), &l.bias, &mut blob);
                layers.push(LayerSpec::Dense {
                    name: l.name.clone(),
                    in_features: l.weight.shape()[1],
                    out_features: l.weight.shape()[0],
                    weight: weight_name,
                    bias: bias_name,
                    scheme: l.scheme.clone(),
                });
            }
            Layer::Conv2d(l) => {
                let weight_name = format!("{}.weight", l.name);
                let bias_name = format!("{}.bias", l.name);
                push_tensor(weight_name.clone(), &l.weight, &mut blob);
                push_tensor(bias_name.clone(), &l.bias, &mut blob);
                let s = l.weight.shape();
                layers.push(LayerSpec::Conv2d {
                    name: l.name.clone(),
                    in_channels: s[1],
                    out_channels: s[0],
                    kernel: [s[2], s[3]],
                    padding: l.padding,
                    weight: weight_name,
                    bias: bias_name,
                    scheme: l.scheme.clone(),
                });
            }
            Layer::Relu(name) => layers.push(LayerSpec::Relu { name: name.clone() }),
            Layer::Pact(l) => layers.push(LayerSpec::Pact {
                name: l.name.clone(),
                alpha: l.params.alpha,
                bits: l.params.n,
            }),
            Layer::Flatten(name) => layers.push(LayerSpec::Flatten { name: name.clone() }),
        }
    }

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        loss: "softmax_xent".to_string(),
        layers,
        tensors,
        blob: BlobSpec {
            file: blob_file.clone(),
            byte_len: blob.len() as u64,
            sha256: sha256_hex(&blob),
        },
        provenance,
    };

    let manifest_json = serde_json::to_string_pretty(&manifest).map_err(|e| {
        ModelIoError::Manifest { path: manifest_path.display().to_string(), message: e.to_string() }
    })?;
    write_atomic(&blob_path_for(manifest_path, &blob_file), &blob)?;
    write_atomic(manifest_path, manifest_json.as_bytes())?;
    Ok(manifest)
}

fn read_tensor(
    spec_name: &str,
    tensors: &[TensorSpec],
    blob: &[u8],
) -> Result<Tensor, ModelIoError> {
    let spec = tensors
        .iter()
        .find(|t| t.name == spec_name)
        .ok_or_else(|| ModelIoError::MissingTensor(spec_name.to_string()))?;
    let end = spec.offset + spec.byte_len;
    if end > blob.len() as u64 || spec.byte_len % 4 != 0 {
        return Err(ModelIoError::BadOffset {
            name: spec.name.clone(),
            offset: spec.offset,
            byte_len: spec.byte_len,
            blob_len: blob.len() as u64,
        });
    }
    let expected: usize = spec.shape.iter().product();
    if expected * 4 != spec.byte_len as usize {
        return Err(ModelIoError::Manifest {
            path: spec.name.clone(),
            message: format!("shape {:?} does not match byte length {}", spec.shape, spec.byte_len),
        });
    }
    let bytes = &blob[spec.offset as usize..end as usize];
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    Ok(Tensor::new(spec.shape.clone(), data)?)
}

/// Loads a manifest and its blob, verifying the checksum and every offset.
pub fn load_model(manifest_path: &Path) -> Result<(Model, Manifest), ModelIoError> {
    let manifest_text = fs::read_to_string(manifest_path).map_err(io_err(manifest_path))?;
    let manifest: Manifest = serde_json::from_str(&manifest_text).map_err(|e| {
        ModelIoError::Manifest { path: manifest_path.display().to_string(), message: e.to_string() }
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(ModelIoError::Version(manifest.format_version));
    }

    let blob_path = blob_path_for(manifest_path, &manifest.blob.file);
    let blob = fs::read(&blob_path).map_err(io_err(&blob_path))?;
    if blob.len() as u64 != manifest.blob.byte_len {
        return Err(ModelIoError::Checksum { path: blob_path.display().to_string() });
    }
    if sha256_hex(&blob) != manifest.blob.sha256 {
        return Err(ModelIoError::Checksum { path: blob_path.display().to_string() });
    }

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for spec in &manifest.layers {
        let layer = match spec {
            LayerSpec::Dense { name, in_features, out_features, weight, bias, scheme } => {
                let weight = read_tensor(weight, &manifest.tensors, &blob)?;
                let bias = read_tensor(bias, &manifest.tensors, &blob)?;
                if weight.shape() != [*out_features, *in_features] {
                    return Err(ModelIoError::Manifest {
                        path: name.clone(),
                        message: format!(
                            "dense dims [{out_features}, {in_features}] do not match tensor {:?}",
                            weight.shape()
                        ),
                    });
                }
                Layer::Dense(DenseLayer { name: name.clone(), weight, bias, scheme: scheme.clone() })
            }
            LayerSpec::Conv2d {
                name,
                in_channels,
                out_channels,
                kernel,
                padding,
                weight,
                bias,
                scheme,
            } => {
                let weight = read_tensor(weight, &manifest.tensors, &blob)?;
                let bias = read_tensor(bias, &manifest.tensors, &blob)?;
                if weight.shape() != [*out_channels, *in_channels, kernel[0], kernel[1]] {
                    return Err(ModelIoError::Manifest {
                        path: name.clone(),
                        message: "conv dims do not match weight tensor".into(),
                    });
                }
                Layer::Conv2d(Conv2dLayer {
                    name: name.clone(),
                    weight,
                    bias,
                    padding: *padding,
                    scheme: scheme.clone(),
                })
            }
            LayerSpec::Relu { name } => Layer::Relu(name.clone()),
            LayerSpec::Pact { name, alpha, bits } => Layer::Pact(PactLayer {
                name: name.clone(),
                params: PactParams { alpha: *alpha, n: *bits },
            }),
            LayerSpec::Flatten { name } => Layer::Flatten(name.clone()),
        };
        layers.push(layer);
    }
    Ok((Model { layers }, manifest))
}

/// Atomic write of any report/artifact next to the pipeline outputs.
pub fn write_output(path: &Path, contents: &[u8]) -> Result<(), ModelIoError> {
    write_atomic(path, contents)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_mlp, MlpConfig};
    use crate::posit::ScaleVariant;

    fn sample_model() -> Model {
        let mut model = build_mlp(&MlpConfig {
            features: 6,
            hidden: vec![5],
            classes: 3,
            seed: 4,
            ..Default::default()
        });
        model
            .set_scheme("fc1", Some(QuantScheme::Posit4 { variant: ScaleVariant::Sc8 }))
            .unwrap();
        model
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path_a = dir.path().join("model.json");
        let path_b = dir.path().join("model2.json");

        let model = sample_model();
        save_model(&model, &path_a, Some(serde_json::json!({"seed": 4}))).unwrap();
        let (loaded, manifest_a) = load_model(&path_a).unwrap();
        save_model(&loaded, &path_b, Some(serde_json::json!({"seed": 4}))).unwrap();
        let (_, manifest_b) = load_model(&path_b).unwrap();

        assert_eq!(manifest_a.tensors, manifest_b.tensors);
        assert_eq!(manifest_a.blob.sha256, manifest_b.blob.sha256);
        let json_a = fs::read_to_string(&path_a).unwrap().replace("model.bin", "X");
        let json_b = fs::read_to_string(&path_b).unwrap().replace("model2.bin", "X");
        assert_eq!(json_a, json_b);
        let blob_a = fs::read(dir.path().join("model.bin")).unwrap();
        let blob_b = fs::read(dir.path().join("model2.bin")).unwrap();
        assert_eq!(blob_a, blob_b);
    }

    #[test]
    fn schemes_and_alpha_survive_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let mut model = sample_model();
        if let Layer::Pact(p) = &mut model.layers[0] {
            p.params.alpha = 3.25;
        }
        save_model(&model, &path, None).unwrap();
        let (loaded, _) = load_model(&path).unwrap();
        assert!(matches!(
            loaded.scheme_for("fc1"),
            Some(QuantScheme::Posit4 { variant: ScaleVariant::Sc8 })
        ));
        let Layer::Pact(p) = &loaded.layers[0] else { panic!() };
        assert_eq!(p.params.alpha, 3.25);
    }

    #[test]
    fn checksum_corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_model(&sample_model(), &path, None).unwrap();
        let blob_path = dir.path().join("model.bin");
        let mut blob = fs::read(&blob_path).unwrap();
        blob[10] ^= 0xFF;
        fs::write(&blob_path, &blob).unwrap();
        assert!(matches!(load_model(&path), Err(ModelIoError::Checksum { .. })));
    }

    #[test]
    fn bad_offsets_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_model(&sample_model(), &path, None).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut manifest: Manifest = serde_json::from_str(&text).unwrap();
        manifest.tensors[0].offset = manifest.blob.byte_len;
        fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
        assert!(matches!(load_model(&path), Err(ModelIoError::BadOffset { .. })));
    }

    #[test]
    fn no_temp_files_left_behind() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_model(&sample_model(), &path, None).unwrap();
        save_model(&sample_model(), &path, None).unwrap(); // overwrite in place
        let names: Vec<String> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(sorted, vec!["model.bin".to_string(), "model.json".to_string()], "{names:?}");
    }

    #[test]
    fn storage_is_single_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let mut model = sample_model();
        if let Layer::Dense(d) = &mut model.layers[1] {
            d.weight.data_mut()[0] = 0.1; // not exactly representable in f32
        }
        save_model(&model, &path, None).unwrap();
        let (loaded, _) = load_model(&path).unwrap();
        let Layer::Dense(d) = &loaded.layers[1] else { panic!() };
        assert_eq!(d.weight.data()[0], f64::from(0.1f32));
        assert_ne!(d.weight.data()[0], 0.1f64);
    }
}
