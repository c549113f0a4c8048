//! Checkpoint file pair: a JSON architecture manifest (`<name>.manifest.json`)
//! and a raw parameter blob (`<name>.bin`) of little-endian `f32` values in
//! layer order, row-major within each tensor.

use std::fs;
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Layer, Network};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

const KNOWN_KINDS: [&str; 5] = ["Linear", "Conv2d", "ReLU", "Flatten", "BatchNormAffine"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LayerSpec {
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_size: [usize; 2],
        stride: usize,
        padding: usize,
    },
    #[serde(rename = "ReLU")]
    Relu {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        shrink: Option<f64>,
    },
    Flatten,
    BatchNormAffine {
        channels: usize,
    },
}

impl LayerSpec {
    /// Number of stored scalars for this layer.
    pub fn param_count(&self) -> usize {
        match self {
            LayerSpec::Linear { in_features, out_features } => out_features * (in_features + 1),
            LayerSpec::Conv2d { in_channels, out_channels, kernel_size, .. } => {
                out_channels * (in_channels * kernel_size[0] * kernel_size[1] + 1)
            }
            LayerSpec::Relu { .. } | LayerSpec::Flatten => 0,
            LayerSpec::BatchNormAffine { channels } => 4 * channels,
        }
    }

    fn of(layer: &Layer<f32>) -> Self {
        match layer {
            Layer::Linear { weight, .. } => LayerSpec::Linear {
                in_features: weight.shape()[1],
                out_features: weight.shape()[0],
            },
            Layer::Conv2d { weight, stride, padding, .. } => {
                let s = weight.shape();
                LayerSpec::Conv2d {
                    in_channels: s[1],
                    out_channels: s[0],
                    kernel_size: [s[2], s[3]],
                    stride: *stride,
                    padding: *padding,
                }
            }
            Layer::Relu { shrink } => LayerSpec::Relu { shrink: *shrink },
            Layer::Flatten => LayerSpec::Flatten,
            Layer::BatchNormAffine { gamma, .. } => LayerSpec::BatchNormAffine { channels: gamma.numel() },
        }
    }

    fn build(&self, params: &mut &[f32]) -> Result<Layer<f32>> {
        let mut take = |shape: &[usize]| -> Result<Tensor<f32>> {
            let n: usize = shape.iter().product();
            let (head, tail) = params.split_at(n);
            *params = tail;
            Tensor::new(shape, head.to_vec())
        };
        Ok(match *self {
            LayerSpec::Linear { in_features, out_features } => Layer::Linear {
                weight: take(&[out_features, in_features])?,
                bias: take(&[out_features])?,
            },
            LayerSpec::Conv2d { in_channels, out_channels, kernel_size, stride, padding } => Layer::Conv2d {
                weight: take(&[out_channels, in_channels, kernel_size[0], kernel_size[1]])?,
                bias: take(&[out_channels])?,
                stride,
                padding,
            },
            LayerSpec::Relu { shrink } => Layer::Relu { shrink },
            LayerSpec::Flatten => Layer::Flatten,
            LayerSpec::BatchNormAffine { channels } => Layer::BatchNormAffine {
                gamma: take(&[channels])?,
                beta: take(&[channels])?,
                running_mean: take(&[channels])?,
                running_var: take(&[channels])?,
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub param_count: usize,
    #[serde(default)]
    pub flags: Vec<String>,
    pub layers: Vec<LayerSpec>,
}

impl Manifest {
    pub fn of(net: &Network<f32>) -> Self {
        let layers: Vec<LayerSpec> = net.layers.iter().map(LayerSpec::of).collect();
        Manifest {
            format_version: FORMAT_VERSION,
            input_shape: net.input_shape.clone(),
            num_classes: net.num_classes,
            param_count: layers.iter().map(LayerSpec::param_count).sum(),
            flags: net.flags.clone(),
            layers,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    /// Parses and validates a manifest; layer kinds are checked before the
    /// structural decode so unknown kinds get a dedicated error.
    pub fn parse(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        let version = raw
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Manifest("missing format_version".into()))?;
        if version != FORMAT_VERSION as u64 {
            return Err(Error::VersionMismatch {
                found: version as u32,
                expected: FORMAT_VERSION,
            });
        }
        let layers = raw
            .get("layers")
            .and_then(|v| v.as_array())
            .ok_or_else(|| Error::Manifest("missing layers".into()))?;
        for l in layers {
            let kind = l
                .get("kind")
                .and_then(|k| k.as_str())
                .ok_or_else(|| Error::Manifest("layer without kind".into()))?;
            if !KNOWN_KINDS.contains(&kind) {
                return Err(Error::UnsupportedLayer(kind.to_string()));
            }
        }
        let m: Manifest = serde_json::from_value(raw).map_err(|e| Error::Manifest(e.to_string()))?;
        let implied: usize = m.layers.iter().map(LayerSpec::param_count).sum();
        if implied != m.param_count {
            return Err(Error::CountMismatch {
                what: "manifest layer parameters".into(),
                expected: m.param_count,
                found: implied,
            });
        }
        Ok(m)
    }
}

pub fn encode_params(net: &Network<f32>) -> Vec<u8> {
    let values: Vec<f32> = net
        .layers
        .iter()
        .flat_map(|l| l.tensors())
        .flat_map(|t| t.data().iter().copied())
        .collect();
    let mut blob = vec![0u8; values.len() * 4];
    LittleEndian::write_f32_into(&values, &mut blob);
    blob
}

/// Serializes a network to `(manifest text, parameter blob)`.
pub fn to_bytes(net: &Network<f32>) -> (String, Vec<u8>) {
    (Manifest::of(net).to_json(), encode_params(net))
}

pub fn from_bytes(manifest: &str, blob: &[u8]) -> Result<Network<f32>> {
    decode(manifest, blob, Path::new("<memory>"))
}

fn decode(manifest: &str, blob: &[u8], path: &Path) -> Result<Network<f32>> {
    let m = Manifest::parse(manifest)?;
    if blob.len() % 4 != 0 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: blob.len().next_multiple_of(4),
            found: blob.len(),
        });
    }
    if blob.len() / 4 != m.param_count {
        return Err(Error::CountMismatch {
            what: "parameter blob scalars".into(),
            expected: m.param_count,
            found: blob.len() / 4,
        });
    }
    let mut values = vec![0f32; m.param_count];
    LittleEndian::read_f32_into(blob, &mut values);
    let mut rest: &[f32] = &values;
    let layers = m
        .layers
        .iter()
        .map(|spec| spec.build(&mut rest))
        .collect::<Result<Vec<_>>>()?;
    let mut net = Network::new(&m.input_shape, m.num_classes, layers)?;
    net.flags = m.flags;
    Ok(net)
}

/// Manifest path paired with a blob path: `model.bin` → `model.manifest.json`.
pub fn manifest_path(blob: &Path) -> PathBuf {
    blob.with_extension("manifest.json")
}

pub fn save(net: &Network<f32>, blob_path: &Path) -> Result<()> {
    let (manifest, blob) = to_bytes(net);
    if let Some(dir) = blob_path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(manifest_path(blob_path), manifest)?;
    fs::write(blob_path, blob)?;
    Ok(())
}

pub fn load(blob_path: &Path) -> Result<Network<f32>> {
    let manifest = fs::read_to_string(manifest_path(blob_path))?;
    let blob = fs::read(blob_path)?;
    decode(&manifest, &blob, blob_path)
}
