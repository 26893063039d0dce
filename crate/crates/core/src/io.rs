//! On-disk formats.
//!
//! * Model: `<stem>.json` manifest plus `<stem>.bin` little-endian blob.
//!   Full-precision models store parameters as f32; quantized models store
//!   integer codes as i32 and anything real-valued as f64 so a save/load
//!   round trip is lossless.
//! * Tensor file: `TNSR`, version byte, dtype byte (1 = f32, 2 = i32),
//!   u16 rank, u64 extents, then little-endian data.
//! * Run manifest: `run.json` in every output directory.
//!
//! Every write goes to a temporary sibling first and is renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Activation, BatchNorm, Graph, LayerKind, LayerSpec, Shape3, Source};
use crate::quant::{QuantBias, QuantGrid, QuantLayer, QuantTensor, QuantizedModel};
use crate::tensor::Tensor;

pub const MODEL_FORMAT: &str = "biasfix-model/1";
pub const QMODEL_FORMAT: &str = "biasfix-qmodel/1";
const TENSOR_MAGIC: &[u8; 4] = b"TNSR";
const TENSOR_VERSION: u8 = 1;

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Invalid(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(read(path)?)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_slice(&read(path)?).map_err(|e| Error::format(path, e.to_string()))
}

// ---- tensor files ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TensorDtype {
    F32 = 1,
    I32 = 2,
}

fn encode_header(dtype: TensorDtype, shape: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * shape.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(TENSOR_VERSION);
    out.push(dtype as u8);
    out.extend_from_slice(&(shape.len() as u16).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out
}

fn decode(path: &Path, want: TensorDtype) -> Result<(Vec<usize>, Vec<[u8; 4]>)> {
    let bytes = read(path)?;
    let bad = |msg: &str| Error::format(path, msg);
    if bytes.len() < 8 || &bytes[..4] != TENSOR_MAGIC {
        return Err(bad("not a tensor file"));
    }
    if bytes[4] != TENSOR_VERSION {
        return Err(bad(&format!("unsupported version {}", bytes[4])));
    }
    if bytes[5] != want as u8 {
        return Err(bad(&format!("dtype code {} where {} was expected", bytes[5], want as u8)));
    }
    let rank = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let body = 8 + 8 * rank;
    if bytes.len() < body {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> = bytes[8..body]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
        .collect();
    let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("extents overflow"))?;
    if bytes.len() - body != count * 4 {
        return Err(bad(&format!("{} data bytes for {count} elements", bytes.len() - body)));
    }
    Ok((shape, bytes[body..].chunks_exact(4).map(|c| c.try_into().expect("4 bytes")).collect()))
}

/// Writes `t` as f32; values are rounded to single precision.
pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut out = encode_header(TensorDtype::F32, t.shape());
    t.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes()));
    write_atomic(path, &out)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let (shape, words) = decode(path, TensorDtype::F32)?;
    let data: Vec<f64> = words.into_iter().map(|w| f32::from_le_bytes(w) as f64).collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(path, "non-finite value"));
    }
    Tensor::new(shape, data).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_labels(path: &Path, labels: &[i32]) -> Result<()> {
    let mut out = encode_header(TensorDtype::I32, &[labels.len()]);
    labels.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    write_atomic(path, &out)
}

pub fn read_labels(path: &Path) -> Result<Vec<i32>> {
    let (shape, words) = decode(path, TensorDtype::I32)?;
    if shape.len() != 1 {
        return Err(Error::format(path, format!("labels must be rank 1, got rank {}", shape.len())));
    }
    Ok(words.into_iter().map(i32::from_le_bytes).collect())
}

// ---- blobs ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    F32,
    F64,
    I32,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 | Dtype::I32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobRef {
    pub offset: u64,
    pub len: u64,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
}

#[derive(Default)]
struct BlobWriter {
    buf: Vec<u8>,
}

impl BlobWriter {
    fn real(&mut self, shape: &[usize], values: &[f64], dtype: Dtype) -> BlobRef {
        let offset = self.buf.len() as u64;
        for &v in values {
            match dtype {
                Dtype::F32 => self.buf.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => self.buf.extend_from_slice(&v.to_le_bytes()),
                Dtype::I32 => unreachable!("integer blob written as real"),
            }
        }
        BlobRef {
            offset,
            len: self.buf.len() as u64 - offset,
            shape: shape.to_vec(),
            dtype,
        }
    }

    fn codes(&mut self, values: &[i32]) -> BlobRef {
        let offset = self.buf.len() as u64;
        values.iter().for_each(|v| self.buf.extend_from_slice(&v.to_le_bytes()));
        BlobRef {
            offset,
            len: self.buf.len() as u64 - offset,
            shape: vec![values.len()],
            dtype: Dtype::I32,
        }
    }
}

struct BlobReader<'a> {
    path: &'a Path,
    buf: Vec<u8>,
}

impl BlobReader<'_> {
    fn bytes(&self, r: &BlobRef) -> Result<&[u8]> {
        let count: usize = r.shape.iter().product();
        let start = r.offset as usize;
        let end = start.checked_add(r.len as usize).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) if count * r.dtype.width() == r.len as usize => Ok(&self.buf[start..end]),
            _ => Err(Error::format(self.path, format!("blob reference {r:?} is out of range or inconsistent"))),
        }
    }

    fn real(&self, r: &BlobRef) -> Result<Vec<f64>> {
        let b = self.bytes(r)?;
        let v: Vec<f64> = match r.dtype {
            Dtype::F32 => b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4")) as f64).collect(),
            Dtype::F64 => b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect(),
            Dtype::I32 => return Err(Error::format(self.path, "expected a real-valued blob, found i32")),
        };
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::format(self.path, "non-finite parameter"));
        }
        Ok(v)
    }

    fn tensor(&self, r: &BlobRef) -> Result<Tensor> {
        Tensor::new(r.shape.clone(), self.real(r)?).map_err(|e| Error::format(self.path, e.to_string()))
    }

    fn codes(&self, r: &BlobRef) -> Result<Vec<i32>> {
        if r.dtype != Dtype::I32 {
            return Err(Error::format(self.path, "expected an i32 blob"));
        }
        Ok(self.bytes(r)?.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().expect("4"))).collect())
    }
}

// ---- models ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BatchNormRecord {
    gamma: BlobRef,
    beta: BlobRef,
    mean: BlobRef,
    var: BlobRef,
    eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerRecord {
    name: String,
    #[serde(flatten)]
    kind: LayerKind,
    inputs: Vec<Source>,
    activation: Activation,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    weights: Option<BlobRef>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    bias: Option<BlobRef>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    batchnorm: Option<BatchNormRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GraphRecord {
    input_shape: Shape3,
    output: usize,
    layers: Vec<LayerRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelManifest {
    format: String,
    blob: String,
    #[serde(flatten)]
    graph: GraphRecord,
}

fn graph_record(g: &Graph, blob: &mut BlobWriter, dtype: Dtype) -> GraphRecord {
    let layers = g
        .layers
        .iter()
        .map(|l| {
            let weights = l.weights.as_ref().map(|w| blob.real(w.shape(), w.data(), dtype));
            let mut vec = |v: &[f64]| blob.real(&[v.len()], v, dtype);
            LayerRecord {
                name: l.name.clone(),
                kind: l.kind.clone(),
                inputs: l.inputs.clone(),
                activation: l.activation,
                weights,
                bias: l.bias.as_deref().map(&mut vec),
                batchnorm: l.batchnorm.as_ref().map(|bn| BatchNormRecord {
                    gamma: vec(&bn.gamma),
                    beta: vec(&bn.beta),
                    mean: vec(&bn.mean),
                    var: vec(&bn.var),
                    eps: bn.eps,
                }),
            }
        })
        .collect();
    GraphRecord {
        input_shape: g.input_shape,
        output: g.output,
        layers,
    }
}

fn graph_from_record(rec: &GraphRecord, blob: &BlobReader<'_>) -> Result<Graph> {
    let layers = rec
        .layers
        .iter()
        .map(|l| {
            Ok(LayerSpec {
                name: l.name.clone(),
                kind: l.kind.clone(),
                inputs: l.inputs.clone(),
                activation: l.activation,
                weights: l.weights.as_ref().map(|r| blob.tensor(r)).transpose()?,
                bias: l.bias.as_ref().map(|r| blob.real(r)).transpose()?,
                batchnorm: l
                    .batchnorm
                    .as_ref()
                    .map(|bn| {
                        Ok::<_, Error>(BatchNorm {
                            gamma: blob.real(&bn.gamma)?,
                            beta: blob.real(&bn.beta)?,
                            mean: blob.real(&bn.mean)?,
                            var: blob.real(&bn.var)?,
                            eps: bn.eps,
                        })
                    })
                    .transpose()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let g = Graph {
        input_shape: rec.input_shape,
        layers,
        output: rec.output,
    };
    g.check()?;
    Ok(g)
}

fn paths(manifest: &Path) -> (PathBuf, String) {
    let blob = manifest.with_extension("bin");
    let name = blob.file_name().expect("file path").to_string_lossy().into_owned();
    (blob, name)
}

/// Writes a full-precision model; parameters are stored as f32.
pub fn save_model(manifest: &Path, g: &Graph) -> Result<()> {
    g.check()?;
    let (blob_path, blob_name) = paths(manifest);
    let mut blob = BlobWriter::default();
    let m = ModelManifest {
        format: MODEL_FORMAT.into(),
        blob: blob_name,
        graph: graph_record(g, &mut blob, Dtype::F32),
    };
    write_atomic(&blob_path, &blob.buf)?;
    write_json(manifest, &m)
}

pub fn load_model(manifest: &Path) -> Result<Graph> {
    let m: ModelManifest = read_json(manifest)?;
    if m.format != MODEL_FORMAT {
        return Err(Error::format(manifest, format!("format `{}` is not {MODEL_FORMAT}", m.format)));
    }
    let blob_path = manifest.with_file_name(&m.blob);
    let blob = BlobReader {
        path: &blob_path,
        buf: read(&blob_path)?,
    };
    graph_from_record(&m.graph, &blob)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct QuantTensorRecord {
    grid: QuantGrid,
    codes: BlobRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct QuantBiasRecord {
    grid: QuantGrid,
    codes: BlobRef,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    exact: Option<BlobRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct QuantLayerRecord {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    weights: Option<QuantTensorRecord>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    bias: Option<QuantBiasRecord>,
    activation: QuantGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct QModelManifest {
    format: String,
    blob: String,
    input_grid: QuantGrid,
    graph: GraphRecord,
    quant: Vec<QuantLayerRecord>,
}

pub fn save_qmodel(manifest: &Path, q: &QuantizedModel) -> Result<()> {
    let (blob_path, blob_name) = paths(manifest);
    let mut blob = BlobWriter::default();
    let graph = graph_record(&q.graph, &mut blob, Dtype::F64);
    let quant = q
        .layers
        .iter()
        .map(|l| QuantLayerRecord {
            weights: l.weights.as_ref().map(|w| QuantTensorRecord {
                grid: w.grid,
                codes: blob.codes(&w.codes),
            }),
            bias: l.bias.as_ref().map(|b| QuantBiasRecord {
                grid: b.grid,
                codes: blob.codes(&b.codes),
                exact: b.exact.as_ref().map(|e| blob.real(&[e.len()], e, Dtype::F64)),
            }),
            activation: l.activation,
        })
        .collect();
    let m = QModelManifest {
        format: QMODEL_FORMAT.into(),
        blob: blob_name,
        input_grid: q.input_grid,
        graph,
        quant,
    };
    write_atomic(&blob_path, &blob.buf)?;
    write_json(manifest, &m)
}

pub fn load_qmodel(manifest: &Path) -> Result<QuantizedModel> {
    let m: QModelManifest = read_json(manifest)?;
    if m.format != QMODEL_FORMAT {
        return Err(Error::format(manifest, format!("format `{}` is not {QMODEL_FORMAT}", m.format)));
    }
    let blob_path = manifest.with_file_name(&m.blob);
    let blob = BlobReader {
        path: &blob_path,
        buf: read(&blob_path)?,
    };
    let graph = graph_from_record(&m.graph, &blob)?;
    if m.quant.len() != graph.layers.len() {
        return Err(Error::format(manifest, "quantization records do not match the layer count"));
    }
    let check_grid = |g: &QuantGrid| g.validate().map_err(|e| Error::format(manifest, e.to_string()));
    check_grid(&m.input_grid)?;
    let layers = m
        .quant
        .iter()
        .zip(&graph.layers)
        .map(|(r, spec)| {
            check_grid(&r.activation)?;
            let weights = match (&r.weights, &spec.weights) {
                (Some(w), Some(t)) => {
                    check_grid(&w.grid)?;
                    let codes = blob.codes(&w.codes)?;
                    if codes.len() != t.len() {
                        return Err(Error::format(manifest, format!("layer {}: weight code count", spec.name)));
                    }
                    Some(QuantTensor { grid: w.grid, codes })
                }
                (None, None) => None,
                _ => return Err(Error::format(manifest, format!("layer {}: weight records disagree", spec.name))),
            };
            let bias = match (&r.bias, &spec.bias) {
                (Some(b), Some(v)) => {
                    check_grid(&b.grid)?;
                    let codes = blob.codes(&b.codes)?;
                    let exact = b.exact.as_ref().map(|e| blob.real(e)).transpose()?;
                    if codes.len() != v.len() || exact.as_ref().is_some_and(|e| e.len() != v.len()) {
                        return Err(Error::format(manifest, format!("layer {}: bias length", spec.name)));
                    }
                    Some(QuantBias { grid: b.grid, codes, exact })
                }
                (None, None) => None,
                _ => return Err(Error::format(manifest, format!("layer {}: bias records disagree", spec.name))),
            };
            Ok(QuantLayer {
                weights,
                bias,
                activation: r.activation,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantizedModel {
        graph,
        input_grid: m.input_grid,
        layers,
    })
}

// ---- reports ----

/// Locale-independent float with 9 significant digits.
pub fn fmt_sig9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    format!("{v:.8e}")
}

/// Writes a CSV built by `fill` atomically.
pub fn write_csv<F>(path: &Path, header: &[&str], fill: F) -> Result<()>
where
    F: FnOnce(&mut csv::Writer<Vec<u8>>) -> std::result::Result<(), csv::Error>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    let run = |w: &mut csv::Writer<Vec<u8>>| -> std::result::Result<(), csv::Error> {
        w.write_record(header)?;
        fill(w)
    };
    run(&mut w).map_err(|e| Error::format(path, e.to_string()))?;
    let bytes = w.into_inner().map_err(|e| Error::format(path, e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn write_json_report<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_json(path, value)
}

pub fn read_json_report<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    read_json(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// `run.json`: provenance of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, InputDigest>,
    pub seed: Option<u64>,
    pub version: String,
    pub duration_seconds: f64,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        RunManifest {
            command: command.into(),
            config,
            inputs: BTreeMap::new(),
            seed,
            version: env!("CARGO_PKG_VERSION").into(),
            duration_seconds: 0.0,
        }
    }

    pub fn add_input(&mut self, role: &str, path: &Path) -> Result<()> {
        let digest = sha256_file(path)?;
        self.inputs.insert(
            role.into(),
            InputDigest {
                path: path.display().to_string(),
                sha256: digest,
            },
        );
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("run.json"), self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.tensor");
        let t = Tensor::new(vec![2, 1, 1, 3], vec![0.5, -1.25, 3.0, 0.0, 1e-3f32 as f64, 7.0]).unwrap();
        write_tensor(&p, &t).unwrap();
        assert_eq!(read_tensor(&p).unwrap(), t);
        assert!(matches!(read_labels(&p), Err(Error::Format { .. })));
        let l = dir.path().join("y.labels");
        write_labels(&l, &[3, 0, -1]).unwrap();
        assert_eq!(read_labels(&l).unwrap(), vec![3, 0, -1]);
    }

    #[test]
    fn truncated_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.tensor");
        write_tensor(&p, &Tensor::zeros(vec![4])).unwrap();
        let mut b = fs::read(&p).unwrap();
        b.pop();
        fs::write(&p, b).unwrap();
        assert!(matches!(read_tensor(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_file_is_io() {
        let e = read_tensor(Path::new("/nonexistent/x.tensor")).unwrap_err();
        assert!(matches!(e, Error::Io { .. }));
        assert!(e.to_string().contains("/nonexistent/x.tensor"));
    }

    #[test]
    fn sig9() {
        assert_eq!(fmt_sig9(1.0 / 3.0), "3.33333333e-1");
        assert_eq!(fmt_sig9(0.0), "0");
        let v = -123456.789012;
        assert!(((fmt_sig9(v).parse::<f64>().unwrap() - v) / v).abs() < 1e-8);
    }
}
