//! On-disk formats.
//!
//! A model bundle (`*.canonmodel/`) is a directory holding `manifest.json`
//! (topology, op attributes, tensor table, SHA-256 of the blob) and
//! `weights.bin` (little-endian `f32` tensors, concatenated in manifest order).
//!
//! A dataset bundle (`*.canondata/`) holds `manifest.json` (one entry per sample:
//! file, shape, label, class name, boxes) next to one raw little-endian `f32`
//! CHW file per sample.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{BBox, Sample};
use crate::error::{Error, Result};
use crate::ir::{ModelGraph, Node, Op, OpKind};
use crate::kernels::{BnParams, ConvParams, DenseParams, PoolParams};
use crate::tensor::Tensor;

pub const MODEL_MANIFEST: &str = "manifest.json";
pub const MODEL_WEIGHTS: &str = "weights.bin";
const MODEL_FORMAT: &str = "canonmodel";
const DATA_FORMAT: &str = "canondata";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format: String,
    pub version: u32,
    pub input_shape: Vec<usize>,
    pub input_range: [f32; 2],
    pub output: String,
    pub nodes: Vec<ManifestNode>,
    pub tensors: Vec<TensorEntry>,
    /// Hex SHA-256 of `weights.bin`.
    pub checksum: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestNode {
    pub id: String,
    pub op: String,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "NodeAttrs::is_empty")]
    pub attrs: NodeAttrs,
    /// Parameter role (`weight`, `gamma`, ...) -> tensor name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tensors: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct NodeAttrs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f32>,
}

impl NodeAttrs {
    fn is_empty(&self) -> bool {
        self.stride.is_none() && self.padding.is_none() && self.kernel.is_none() && self.epsilon.is_none()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub length: usize,
}

/// Serializes a graph into its manifest and weight blob.
pub fn encode_model(g: &ModelGraph) -> (ModelManifest, Vec<u8>) {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    let mut nodes = Vec::new();
    for id in g.topo_order() {
        let node = g.node(id).expect("ordered id");
        let mut attrs = NodeAttrs::default();
        let mut refs = BTreeMap::new();
        let mut put = |role: &str, t: &Tensor| {
            let name = format!("{}.{}", id, role);
            let offset = blob.len();
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset,
                length: blob.len() - offset,
            });
            refs.insert(role.to_string(), name);
        };
        match &node.op {
            Op::Conv(p) => {
                put("weight", &p.weight);
                put("bias", &p.bias);
                attrs.stride = Some([p.stride.0, p.stride.1]);
                attrs.padding = Some([p.padding.0, p.padding.1]);
            }
            Op::Dense(p) => {
                put("weight", &p.weight);
                put("bias", &p.bias);
            }
            Op::Bn(p) => {
                put("gamma", &p.gamma);
                put("beta", &p.beta);
                put("running_mean", &p.running_mean);
                put("running_var", &p.running_var);
                attrs.epsilon = Some(p.epsilon);
            }
            Op::MaxPool(p) | Op::AvgPool(p) => {
                attrs.kernel = Some([p.kernel.0, p.kernel.1]);
                attrs.stride = Some([p.stride.0, p.stride.1]);
            }
            Op::Input | Op::Relu | Op::Add | Op::Flatten | Op::Output => {}
        }
        nodes.push(ManifestNode {
            id: id.clone(),
            op: node.op.kind().as_str().to_string(),
            inputs: node.inputs.clone(),
            attrs,
            tensors: refs,
        });
    }
    let manifest = ModelManifest {
        format: MODEL_FORMAT.into(),
        version: 1,
        input_shape: g.input_shape().to_vec(),
        input_range: [g.input_range().0, g.input_range().1],
        output: g.output_id().to_string(),
        nodes,
        tensors,
        checksum: sha256_hex(&blob),
    };
    (manifest, blob)
}

/// Checksum a saved bundle of `g` would carry.
pub fn model_checksum(g: &ModelGraph) -> String {
    encode_model(g).0.checksum
}

pub fn save_model(g: &ModelGraph, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let (manifest, blob) = encode_model(g);
    fs::write(dir.join(MODEL_WEIGHTS), &blob)?;
    fs::write(dir.join(MODEL_MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<ModelGraph> {
    let dir = dir.as_ref();
    let manifest: ModelManifest = serde_json::from_str(&fs::read_to_string(dir.join(MODEL_MANIFEST))?)?;
    let blob = fs::read(dir.join(MODEL_WEIGHTS))?;
    decode_model(&manifest, &blob)
}

pub fn decode_model(manifest: &ModelManifest, blob: &[u8]) -> Result<ModelGraph> {
    if manifest.format != MODEL_FORMAT {
        return Err(Error::InvalidGraph(format!("unknown bundle format `{}`", manifest.format)));
    }
    let actual = sha256_hex(blob);
    if actual != manifest.checksum {
        return Err(Error::Checksum {
            expected: manifest.checksum.clone(),
            actual,
        });
    }
    let table: BTreeMap<&str, &TensorEntry> = manifest.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut nodes = Vec::with_capacity(manifest.nodes.len());
    for mn in &manifest.nodes {
        let kind: OpKind = mn.op.parse()?;
        let tensor = |role: &str| -> Result<Tensor> {
            let name = mn
                .tensors
                .get(role)
                .ok_or_else(|| Error::DanglingTensor(format!("{}.{} (no entry)", mn.id, role)))?;
            let entry = table.get(name.as_str()).ok_or_else(|| Error::DanglingTensor(name.clone()))?;
            read_tensor(entry, blob)
        };
        let attr = |v: Option<[usize; 2]>, what: &str| -> Result<(usize, usize)> {
            v.map(|a| (a[0], a[1]))
                .ok_or_else(|| Error::InvalidGraph(format!("node `{}` lacks attribute `{}`", mn.id, what)))
        };
        let op = match kind {
            OpKind::Input => Op::Input,
            OpKind::Conv => Op::Conv(ConvParams {
                weight: tensor("weight")?,
                bias: tensor("bias")?,
                stride: attr(mn.attrs.stride, "stride")?,
                padding: attr(mn.attrs.padding, "padding")?,
            }),
            OpKind::Dense => Op::Dense(DenseParams {
                weight: tensor("weight")?,
                bias: tensor("bias")?,
            }),
            OpKind::Bn => Op::Bn(BnParams {
                gamma: tensor("gamma")?,
                beta: tensor("beta")?,
                running_mean: tensor("running_mean")?,
                running_var: tensor("running_var")?,
                epsilon: mn
                    .attrs
                    .epsilon
                    .ok_or_else(|| Error::InvalidGraph(format!("node `{}` lacks attribute `epsilon`", mn.id)))?,
            }),
            OpKind::MaxPool | OpKind::AvgPool => {
                let p = PoolParams {
                    kernel: attr(mn.attrs.kernel, "kernel")?,
                    stride: attr(mn.attrs.stride, "stride")?,
                };
                if kind == OpKind::MaxPool {
                    Op::MaxPool(p)
                } else {
                    Op::AvgPool(p)
                }
            }
            OpKind::Relu => Op::Relu,
            OpKind::Add => Op::Add,
            OpKind::Flatten => Op::Flatten,
            OpKind::Output => Op::Output,
        };
        nodes.push(Node {
            id: mn.id.clone(),
            op,
            inputs: mn.inputs.clone(),
        });
    }
    ModelGraph::new(
        nodes,
        manifest.output.clone(),
        manifest.input_shape.clone(),
        (manifest.input_range[0], manifest.input_range[1]),
    )
}

fn read_tensor(entry: &TensorEntry, blob: &[u8]) -> Result<Tensor> {
    if entry.dtype != "f32" {
        return Err(Error::InvalidArgument(format!(
            "tensor `{}` has dtype `{}`, only f32 is supported",
            entry.name, entry.dtype
        )));
    }
    let end = entry.offset.saturating_add(entry.length);
    if end > blob.len() {
        return Err(Error::OutOfBounds {
            name: entry.name.clone(),
            offset: entry.offset,
            end,
            len: blob.len(),
        });
    }
    let n: usize = entry.shape.iter().product();
    if entry.length != 4 * n {
        return Err(Error::shape(
            &entry.name,
            format!("{} bytes cannot hold shape {:?}", entry.length, entry.shape),
        ));
    }
    Tensor::new(entry.shape.clone(), decode_f32(&blob[entry.offset..end]))
}

pub(crate) fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub(crate) fn encode_f32(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    #[serde(default)]
    pub classes: Vec<String>,
    pub samples: Vec<SampleEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub label: usize,
    #[serde(default)]
    pub class_name: String,
    #[serde(default)]
    pub bboxes: Vec<BBox>,
}

pub fn save_dataset(samples: &[Sample], classes: &[String], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        s.validate()?;
        let file = format!("{}.f32", s.id);
        fs::write(dir.join(&file), encode_f32(s.image.data()))?;
        entries.push(SampleEntry {
            id: s.id.clone(),
            file,
            shape: s.image.shape().to_vec(),
            label: s.label,
            class_name: s.class_name.clone(),
            bboxes: s.bboxes.clone(),
        });
    }
    let manifest = DatasetManifest {
        format: DATA_FORMAT.into(),
        version: 1,
        classes: classes.to_vec(),
        samples: entries,
    };
    fs::write(dir.join(MODEL_MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let dir = dir.as_ref();
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join(MODEL_MANIFEST))?)?;
    if manifest.format != DATA_FORMAT {
        return Err(Error::InvalidArgument(format!("unknown dataset format `{}`", manifest.format)));
    }
    manifest
        .samples
        .iter()
        .map(|e| {
            let bytes = fs::read(dir.join(&e.file))?;
            let n: usize = e.shape.iter().product();
            if bytes.len() != 4 * n {
                return Err(Error::OutOfBounds {
                    name: e.file.clone(),
                    offset: 0,
                    end: 4 * n,
                    len: bytes.len(),
                });
            }
            let sample = Sample {
                id: e.id.clone(),
                image: Tensor::new(e.shape.clone(), decode_f32(&bytes))?,
                label: e.label,
                class_name: e.class_name.clone(),
                bboxes: e.bboxes.clone(),
            };
            sample.validate()?;
            Ok(sample)
        })
        .collect()
}

/// Writes a raw tensor file plus a JSON sidecar `<stem>.json`.
pub fn save_tensor_with_sidecar<M: Serialize>(t: &Tensor, path: impl AsRef<Path>, meta: &M) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_f32(t.data()))?;
    fs::write(path.with_extension("json"), serde_json::to_string_pretty(meta)? + "\n")?;
    Ok(())
}

pub fn load_raw_tensor(path: impl AsRef<Path>, shape: &[usize]) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let n: usize = shape.iter().product();
    if bytes.len() != 4 * n {
        return Err(Error::OutOfBounds {
            name: path.display().to_string(),
            offset: 0,
            end: 4 * n,
            len: bytes.len(),
        });
    }
    Tensor::new(shape.to_vec(), decode_f32(&bytes))
}
