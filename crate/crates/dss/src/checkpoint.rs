//! Model checkpoints: a `dss-model-v1` header line, one JSON line describing
//! the architecture, then the parameters as little-endian f64.

use std::fs;
use std::io::Write;
use std::path::Path;

use dss_core::model::{Activation, Architecture, Layer};
use dss_core::{Classifier, Network, Shape};
use serde::{Deserialize, Serialize};

use crate::error::{DssError, Result};

pub const MODEL_HEADER: &str = "dss-model-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ActivationSpec {
    Tanh,
    Sigmoid,
    Softplus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LayerSpec {
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, padding: usize },
    AvgPool { size: usize },
    Activation { function: ActivationSpec },
    Affine { inputs: usize, outputs: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Descriptor {
    input: [usize; 3],
    classes: usize,
    layers: Vec<LayerSpec>,
    parameters: usize,
}

impl From<Layer> for LayerSpec {
    fn from(layer: Layer) -> Self {
        match layer {
            Layer::Conv2d { in_channels, out_channels, kernel, padding } => {
                LayerSpec::Conv2d { in_channels, out_channels, kernel, padding }
            }
            Layer::AvgPool { size } => LayerSpec::AvgPool { size },
            Layer::Activation(a) => LayerSpec::Activation {
                function: match a {
                    Activation::Tanh => ActivationSpec::Tanh,
                    Activation::Sigmoid => ActivationSpec::Sigmoid,
                    Activation::Softplus => ActivationSpec::Softplus,
                },
            },
            Layer::Affine { inputs, outputs } => LayerSpec::Affine { inputs, outputs },
        }
    }
}

impl From<LayerSpec> for Layer {
    fn from(spec: LayerSpec) -> Self {
        match spec {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, padding } => {
                Layer::Conv2d { in_channels, out_channels, kernel, padding }
            }
            LayerSpec::AvgPool { size } => Layer::AvgPool { size },
            LayerSpec::Activation { function } => Layer::Activation(match function {
                ActivationSpec::Tanh => Activation::Tanh,
                ActivationSpec::Sigmoid => Activation::Sigmoid,
                ActivationSpec::Softplus => Activation::Softplus,
            }),
            LayerSpec::Affine { inputs, outputs } => Layer::Affine { inputs, outputs },
        }
    }
}

pub fn encode_model(net: &Network) -> Vec<u8> {
    let arch = net.architecture();
    let desc = Descriptor {
        input: [arch.input.channels, arch.input.height, arch.input.width],
        classes: net.class_count(),
        layers: arch.layers.iter().map(|&l| l.into()).collect(),
        parameters: net.params().len(),
    };
    let mut out = Vec::with_capacity(net.params().len() * 8 + 512);
    out.extend_from_slice(MODEL_HEADER.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(serde_json::to_string(&desc).expect("descriptor serializes").as_bytes());
    out.push(b'\n');
    for p in net.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

fn split_line<'a>(path: &Path, bytes: &'a [u8], what: &str) -> Result<(&'a [u8], &'a [u8])> {
    let end = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| DssError::format(path, format!("checkpoint is missing its {what} line")))?;
    Ok((&bytes[..end], &bytes[end + 1..]))
}

pub fn decode_model(path: &Path, bytes: &[u8]) -> Result<Network> {
    let (header, rest) = split_line(path, bytes, "header")?;
    if header != MODEL_HEADER.as_bytes() {
        return Err(DssError::format(
            path,
            format!("not a {MODEL_HEADER} checkpoint (header `{}`)", String::from_utf8_lossy(header)),
        ));
    }
    let (json, payload) = split_line(path, rest, "descriptor")?;
    let desc: Descriptor =
        serde_json::from_slice(json).map_err(|e| DssError::format(path, format!("bad descriptor: {e}")))?;
    if payload.len() != desc.parameters * 8 {
        return Err(DssError::format(
            path,
            format!("length error: {} parameter bytes, descriptor promises {}", payload.len(), desc.parameters * 8),
        ));
    }
    let params = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let [c, h, w] = desc.input;
    let arch = Architecture { input: Shape::new(c, h, w)?, layers: desc.layers.into_iter().map(Layer::from).collect() };
    let net = Network::from_parts(arch, params)?;
    if net.class_count() != desc.classes {
        return Err(DssError::format(
            path,
            format!("descriptor says {} classes, layers produce {}", desc.classes, net.class_count()),
        ));
    }
    Ok(net)
}

pub fn save_model(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_atomic(path, &encode_model(net))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    decode_model(path, &fs::read(path).map_err(|e| DssError::io(path, e))?)
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| DssError::io(parent, e))?;
    }
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| DssError::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| DssError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| DssError::io(path, e))
}
