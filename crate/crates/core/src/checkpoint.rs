//! Versioned binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "XENSCKPT"
//! version      u32      (currently 1)
//! meta_len     u32
//! meta         meta_len bytes of UTF-8 JSON
//! count        u32      number of tensors
//! per tensor:  u32 name_len, name bytes, u8 dtype (1 = f32, 2 = f64),
//!              u32 ndim, ndim × u64 dims, raw little-endian payload
//! digest       32 bytes SHA-256 of every preceding byte
//! ```
//!
//! Pretrained backbone weights use the same container; a converter only has to
//! emit torchvision-style names (`conv1.weight`, `layer1.0.bn1.running_var`, ...).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, XensError};
use crate::model::{
    build_extractor, ArchSpec, ClassificationHead, ClassifierModel, EnsembleModel, ExtractorInit, FeatureExtractor,
    InitProvenance, Network,
};
use crate::nn::{Dtype, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"XENSCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl ArchiveTensor {
    pub fn from_tensor<F: Scalar>(name: &str, t: &Tensor<F>) -> Self {
        let data = match F::DTYPE {
            Dtype::F32 => TensorData::F32(t.data().iter().map(|v| v.to_f64() as f32).collect()),
            Dtype::F64 => TensorData::F64(t.data().iter().map(|v| v.to_f64()).collect()),
        };
        ArchiveTensor {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data,
        }
    }

    pub fn dtype(&self) -> Dtype {
        match self.data {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
        }
    }

    /// Converts to a tensor of element type `F`; exact when the dtypes agree.
    pub fn to_tensor<F: Scalar>(&self) -> Result<Tensor<F>> {
        let data: Vec<F> = match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| F::from_f64(x as f64)).collect(),
            TensorData::F64(v) => v.iter().map(|&x| F::from_f64(x)).collect(),
        };
        Tensor::from_vec(&self.shape, data)
    }
}

#[derive(Clone, Debug)]
pub struct Archive {
    pub meta: serde_json::Value,
    pub tensors: Vec<ArchiveTensor>,
    /// Hex SHA-256 stored in (and verified against) the trailer.
    pub digest: String,
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    if *pos + n > bytes.len() {
        return Err(XensError::Integrity("archive truncated".into()));
    }
    let s = &bytes[*pos..*pos + n];
    *pos += n;
    Ok(s)
}

fn take_u32(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    Ok(u32::from_le_bytes(take(bytes, pos, 4)?.try_into().expect("4 bytes")))
}

fn take_u64(bytes: &[u8], pos: &mut usize) -> Result<u64> {
    Ok(u64::from_le_bytes(take(bytes, pos, 8)?.try_into().expect("8 bytes")))
}

impl Archive {
    pub fn new(meta: serde_json::Value, tensors: Vec<ArchiveTensor>) -> Self {
        Archive {
            meta,
            tensors,
            digest: String::new(),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&ArchiveTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Serializes and fills in `self.digest`.
    pub fn to_bytes(&mut self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("json value serializes");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dtype().code());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| x.write_le(&mut out)),
                TensorData::F64(v) => v.iter().for_each(|x| x.write_le(&mut out)),
            }
        }
        let digest = Sha256::digest(&out);
        self.digest = hex::encode(digest);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 {
            return Err(XensError::Integrity("archive truncated".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        let digest = Sha256::digest(body);
        if digest.as_slice() != trailer {
            return Err(XensError::Integrity("content digest mismatch".into()));
        }
        let mut pos = 0;
        if take(body, &mut pos, 8)? != MAGIC {
            return Err(XensError::Integrity("bad magic".into()));
        }
        let version = take_u32(body, &mut pos)?;
        if version != FORMAT_VERSION {
            return Err(XensError::Metadata(format!("unsupported format version {version}")));
        }
        let meta_len = take_u32(body, &mut pos)? as usize;
        let meta: serde_json::Value = serde_json::from_slice(take(body, &mut pos, meta_len)?)
            .map_err(|e| XensError::Metadata(format!("metadata is not valid JSON: {e}")))?;
        let count = take_u32(body, &mut pos)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = take_u32(body, &mut pos)? as usize;
            let name = String::from_utf8(take(body, &mut pos, name_len)?.to_vec())
                .map_err(|_| XensError::Integrity("tensor name is not UTF-8".into()))?;
            let code = take(body, &mut pos, 1)?[0];
            let dtype = Dtype::from_code(code)
                .ok_or_else(|| XensError::Integrity(format!("unknown dtype code {code} for {name}")))?;
            let ndim = take_u32(body, &mut pos)? as usize;
            let shape = (0..ndim)
                .map(|_| take_u64(body, &mut pos).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let raw = take(body, &mut pos, len * dtype.width())?;
            let data = match dtype {
                Dtype::F32 => TensorData::F32(raw.chunks_exact(4).map(f32::read_le).collect()),
                Dtype::F64 => TensorData::F64(raw.chunks_exact(8).map(f64::read_le).collect()),
            };
            tensors.push(ArchiveTensor { name, shape, data });
        }
        if pos != body.len() {
            return Err(XensError::Integrity("trailing bytes after tensors".into()));
        }
        Ok(Archive {
            meta,
            tensors,
            digest: hex::encode(digest),
        })
    }

    pub fn write(&mut self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| XensError::io(parent, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| XensError::io(path, e))?;
        Ok(self.digest.clone())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| XensError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Classifier,
    Ensemble,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberMeta {
    pub name: String,
    pub arch: ArchSpec,
    pub init: InitProvenance,
    pub frozen: bool,
    pub feature_dim: usize,
    /// Digest of the checkpoint the member was taken from, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_digest: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub members: Vec<MemberMeta>,
    /// Free-form training provenance (seed, fold, config digest, ...).
    pub provenance: BTreeMap<String, String>,
}

/// Labels and provenance written alongside model parameters.
#[derive(Clone, Debug, Default)]
pub struct CheckpointInfo {
    pub class_names: Vec<String>,
    pub member_names: Vec<String>,
    pub member_digests: Vec<Option<String>>,
    pub provenance: BTreeMap<String, String>,
}

fn member_meta<F: Scalar>(e: &FeatureExtractor<F>, name: String, source_digest: Option<String>) -> MemberMeta {
    MemberMeta {
        name,
        arch: e.arch,
        init: e.init.clone(),
        frozen: e.is_frozen(),
        feature_dim: e.feature_dim(),
        source_digest,
    }
}

fn collect<F: Scalar, N: Network<F>>(model: &N) -> Vec<ArchiveTensor> {
    let mut tensors = Vec::new();
    model.visit_params(&mut |name, p| tensors.push(ArchiveTensor::from_tensor(name, &p.value)));
    tensors
}

fn write_model<F: Scalar, N: Network<F>>(model: &N, meta: CheckpointMeta, path: &Path) -> Result<String> {
    let meta = serde_json::to_value(&meta).expect("metadata serializes");
    Archive::new(meta, collect(model)).write(path)
}

pub fn save_classifier<F: Scalar>(model: &ClassifierModel<F>, info: &CheckpointInfo, path: &Path) -> Result<String> {
    let name = info.member_names.first().cloned().unwrap_or_else(|| "extractor".into());
    let meta = CheckpointMeta {
        kind: ModelKind::Classifier,
        num_classes: model.num_classes(),
        class_names: info.class_names.clone(),
        members: vec![member_meta(&model.extractor, name, None)],
        provenance: info.provenance.clone(),
    };
    write_model(model, meta, path)
}

pub fn save_ensemble<F: Scalar>(model: &EnsembleModel<F>, info: &CheckpointInfo, path: &Path) -> Result<String> {
    let members = model
        .members
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let name = info.member_names.get(i).cloned().unwrap_or_else(|| format!("member{i}"));
            let digest = info.member_digests.get(i).cloned().flatten();
            member_meta(m, name, digest)
        })
        .collect();
    let meta = CheckpointMeta {
        kind: ModelKind::Ensemble,
        num_classes: model.num_classes(),
        class_names: info.class_names.clone(),
        members,
        provenance: info.provenance.clone(),
    };
    write_model(model, meta, path)
}

pub enum SavedModel<F> {
    Classifier(ClassifierModel<F>),
    Ensemble(EnsembleModel<F>),
}

impl<F: Scalar> SavedModel<F> {
    pub fn as_network(&self) -> &dyn Network<F> {
        match self {
            SavedModel::Classifier(m) => m,
            SavedModel::Ensemble(m) => m,
        }
    }
}

fn parse_meta(archive: &Archive) -> Result<CheckpointMeta> {
    serde_json::from_value(archive.meta.clone()).map_err(|e| XensError::Metadata(e.to_string()))
}

fn fill_params<F: Scalar, N: Network<F>>(model: &mut N, archive: &Archive) -> Result<()> {
    let mut problems = Vec::new();
    model.visit_params_mut(&mut |name, p| match archive.tensor(name) {
        None => problems.push(format!("missing parameter {name}")),
        Some(t) if t.shape != p.value.shape() => problems.push(format!(
            "shape mismatch for {name}: archive {:?}, expected {:?}",
            t.shape,
            p.value.shape()
        )),
        Some(t) => match t.to_tensor::<F>() {
            Ok(v) => p.value = v,
            Err(e) => problems.push(e.to_string()),
        },
    });
    if problems.is_empty() {
        Ok(())
    } else {
        Err(XensError::ArchiveParams(problems))
    }
}

fn rebuild_member<F: Scalar>(m: &MemberMeta) -> Result<FeatureExtractor<F>> {
    let mut e = build_extractor::<F>(m.arch, &ExtractorInit::Seed(0))?;
    if e.feature_dim() != m.feature_dim {
        return Err(XensError::Metadata(format!(
            "member {} declares feature_dim {} but {} produces {}",
            m.name,
            m.feature_dim,
            m.arch.name(),
            e.feature_dim()
        )));
    }
    e.init = m.init.clone();
    if m.frozen {
        e.freeze();
    }
    Ok(e)
}

fn check_head(archive: &Archive, meta: &CheckpointMeta, expected: Option<usize>) -> Result<()> {
    let bias = archive
        .tensor("head.bias")
        .ok_or_else(|| XensError::ArchiveParams(vec!["missing parameter head.bias".into()]))?;
    if bias.shape != [meta.num_classes] {
        return Err(XensError::Metadata(format!(
            "metadata says K={} but head.bias has shape {:?}",
            meta.num_classes, bias.shape
        )));
    }
    if !meta.class_names.is_empty() && meta.class_names.len() != meta.num_classes {
        return Err(XensError::Metadata(format!(
            "metadata lists {} class names for K={}",
            meta.class_names.len(),
            meta.num_classes
        )));
    }
    if let Some(k) = expected {
        if k != meta.num_classes {
            return Err(XensError::Metadata(format!("expected K={k}, checkpoint has K={}", meta.num_classes)));
        }
    }
    Ok(())
}

/// Loads any saved model, verifying digest, architecture, and head shape.
pub fn load_model<F: Scalar>(path: &Path, expected_classes: Option<usize>) -> Result<(SavedModel<F>, CheckpointMeta)> {
    let archive = Archive::read(path)?;
    let meta = parse_meta(&archive)?;
    check_head(&archive, &meta, expected_classes)?;
    let members = meta.members.iter().map(rebuild_member).collect::<Result<Vec<_>>>()?;
    let model = match meta.kind {
        ModelKind::Classifier => {
            let [extractor]: [FeatureExtractor<F>; 1] = members
                .try_into()
                .map_err(|_| XensError::Metadata("classifier must have exactly one extractor".into()))?;
            let head = ClassificationHead::zeros(extractor.feature_dim(), meta.num_classes);
            let mut m = ClassifierModel { extractor, head };
            fill_params(&mut m, &archive)?;
            SavedModel::Classifier(m)
        }
        ModelKind::Ensemble => {
            let dim = members.iter().map(|m| m.feature_dim()).sum();
            let mut m = EnsembleModel {
                members,
                head: ClassificationHead::zeros(dim, meta.num_classes),
            };
            fill_params(&mut m, &archive)?;
            SavedModel::Ensemble(m)
        }
    };
    Ok((model, meta))
}

pub fn load_classifier<F: Scalar>(path: &Path, expected_classes: Option<usize>) -> Result<(ClassifierModel<F>, CheckpointMeta)> {
    match load_model(path, expected_classes)? {
        (SavedModel::Classifier(m), meta) => Ok((m, meta)),
        _ => Err(XensError::Metadata(format!("{} is not a classifier checkpoint", path.display()))),
    }
}

pub fn load_ensemble<F: Scalar>(path: &Path, expected_classes: Option<usize>) -> Result<(EnsembleModel<F>, CheckpointMeta)> {
    match load_model(path, expected_classes)? {
        (SavedModel::Ensemble(m), meta) => Ok((m, meta)),
        _ => Err(XensError::Metadata(format!("{} is not an ensemble checkpoint", path.display()))),
    }
}

/// Writes a bare extractor archive (the pretrained-weights format).
pub fn save_extractor_archive<F: Scalar>(extractor: &FeatureExtractor<F>, path: &Path) -> Result<String> {
    let mut tensors = Vec::new();
    extractor.visit("", &mut |name, p| tensors.push(ArchiveTensor::from_tensor(name, &p.value)));
    let meta = serde_json::json!({ "arch": extractor.arch });
    Archive::new(meta, tensors).write(path)
}
