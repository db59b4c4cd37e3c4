//! Feature extractors, classification heads, and the frozen-concatenation ensemble.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::error::{Result, XensError};
use crate::nn::tensor::join;
use crate::nn::{
    gemm, Backbone, BackboneCache, Param, ParamKind, ParamVisitor, ParamVisitorMut, ResNet18, Scalar, Tensor,
    TinyConfig, TinyNet,
};

/// Backbone architecture identifier, serialized into checkpoint metadata.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "arch_id", rename_all = "lowercase")]
pub enum ArchSpec {
    Resnet18,
    Tiny(TinyConfig),
}

impl ArchSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ArchSpec::Resnet18 => "resnet18",
            ArchSpec::Tiny(_) => "tiny",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitProvenance {
    PretrainedArchive { digest: String },
    Random { seed: u64 },
}

/// How to initialize a freshly built extractor.
#[derive(Clone, Debug)]
pub enum ExtractorInit {
    PretrainedArchive(PathBuf),
    Seed(u64),
}

/// Which parameters an optimizer step may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainableScope {
    All,
    HeadOnly,
}

#[derive(Clone, Debug)]
pub struct FeatureExtractor<F> {
    pub arch: ArchSpec,
    pub init: InitProvenance,
    backbone: Backbone<F>,
    frozen: bool,
}

impl<F: Scalar> FeatureExtractor<F> {
    pub fn feature_dim(&self) -> usize {
        self.backbone.feature_dim()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Inference-mode features, `[N, feature_dim]`.
    pub fn features(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        check_input(x)?;
        Ok(self.backbone.forward(x))
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, F>) {
        self.backbone.visit(prefix, f)
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, F>) {
        self.backbone.visit_mut(prefix, f)
    }

    /// `(name, shape)` of every parameter and buffer, in visit order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, p| out.push((name.to_string(), p.value.shape().to_vec())));
        out
    }

    fn forward_train(&mut self, x: &Tensor<F>) -> Result<(Tensor<F>, BackboneCache<F>)> {
        if self.frozen {
            return Err(XensError::InvalidArgument("frozen extractor cannot run a training forward".into()));
        }
        check_input(x)?;
        Ok(self.backbone.forward_train(x))
    }
}

fn check_input<F: Scalar>(x: &Tensor<F>) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[1] != 3 || s[2] == 0 || s[3] == 0 {
        return Err(XensError::Shape(format!("expected [N, 3, H, W] input, got {s:?}")));
    }
    Ok(())
}

/// Builds a backbone without its classifier, randomly or from a parameter archive.
pub fn build_extractor<F: Scalar>(arch: ArchSpec, init: &ExtractorInit) -> Result<FeatureExtractor<F>> {
    let seed = match init {
        ExtractorInit::Seed(s) => *s,
        ExtractorInit::PretrainedArchive(_) => 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let backbone = match arch {
        ArchSpec::Resnet18 => Backbone::ResNet18(Box::new(ResNet18::new(&mut rng))),
        ArchSpec::Tiny(cfg) => {
            if cfg.width == 0 || cfg.feature_dim == 0 {
                return Err(XensError::InvalidArgument("tiny backbone widths must be positive".into()));
            }
            Backbone::Tiny(TinyNet::new(cfg, &mut rng))
        }
    };
    let mut extractor = FeatureExtractor {
        arch,
        init: InitProvenance::Random { seed },
        backbone,
        frozen: false,
    };
    if let ExtractorInit::PretrainedArchive(path) = init {
        let archive = Archive::read(path)?;
        extractor.load_from_archive(&archive, "")?;
        extractor.init = InitProvenance::PretrainedArchive {
            digest: archive.digest.clone(),
        };
    }
    Ok(extractor)
}

impl<F: Scalar> FeatureExtractor<F> {
    /// Copies every extractor parameter from `archive` (names under `prefix`).
    /// Reports all missing or mis-shaped names at once; extra archive entries are ignored.
    pub(crate) fn load_from_archive(&mut self, archive: &Archive, prefix: &str) -> Result<()> {
        let mut problems = Vec::new();
        let mut loaded = Vec::new();
        for (name, shape) in self.param_shapes() {
            let full = join(prefix, &name);
            match archive.tensor(&full) {
                None => problems.push(format!("missing parameter {full}")),
                Some(t) if t.shape != shape => problems.push(format!(
                    "shape mismatch for {full}: archive {:?}, expected {:?}",
                    t.shape, shape
                )),
                Some(t) => loaded.push((name, t.to_tensor::<F>()?)),
            }
        }
        if !problems.is_empty() {
            return Err(XensError::ArchiveParams(problems));
        }
        let mut it = loaded.into_iter();
        self.visit_mut("", &mut |name, p| {
            let (n, t) = it.next().expect("same visit order");
            debug_assert_eq!(n, name);
            p.value = t;
        });
        Ok(())
    }
}

/// Affine classification layer: `logits = features · weight + bias`.
#[derive(Clone, Debug)]
pub struct ClassificationHead<F> {
    pub weight: Param<F>,
    pub bias: Param<F>,
}

impl<F: Scalar> ClassificationHead<F> {
    /// Uniform fan-in initialization `U(-1/√d, 1/√d)` with zero bias.
    pub fn init(feature_dim: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (feature_dim as f64).sqrt();
        ClassificationHead {
            weight: Param::weight(Tensor::uniform(&[feature_dim, classes], bound, &mut rng)),
            bias: Param::weight(Tensor::zeros(&[classes])),
        }
    }

    pub fn zeros(feature_dim: usize, classes: usize) -> Self {
        ClassificationHead {
            weight: Param::weight(Tensor::zeros(&[feature_dim, classes])),
            bias: Param::weight(Tensor::zeros(&[classes])),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, feats: &Tensor<F>) -> Result<Tensor<F>> {
        let (d, k) = (self.feature_dim(), self.num_classes());
        if feats.shape().len() != 2 || feats.shape()[1] != d {
            return Err(XensError::Shape(format!(
                "head expects [N, {d}] features, got {:?}",
                feats.shape()
            )));
        }
        let n = feats.batch();
        let mut logits = Tensor::zeros(&[n, k]);
        gemm(n, d, k, feats.data(), false, self.weight.value.data(), false, logits.data_mut(), false);
        for i in 0..n {
            for (l, &b) in logits.row_mut(i).iter_mut().zip(self.bias.value.data()) {
                *l += b;
            }
        }
        Ok(logits)
    }

    /// Accumulates weight/bias gradients; returns the feature gradient.
    pub fn backward(&mut self, feats: &Tensor<F>, dlogits: &Tensor<F>) -> Tensor<F> {
        let (d, k, n) = (self.feature_dim(), self.num_classes(), feats.batch());
        gemm(d, n, k, feats.data(), true, dlogits.data(), false, self.weight.grad.data_mut(), true);
        for i in 0..n {
            for (g, &v) in self.bias.grad.data_mut().iter_mut().zip(dlogits.row(i)) {
                *g += v;
            }
        }
        let mut dfeat = Tensor::zeros(&[n, d]);
        gemm(n, k, d, dlogits.data(), false, self.weight.value.data(), true, dfeat.data_mut(), false);
        dfeat
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, F>) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, F>) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax<F: Scalar>(logits: &Tensor<F>) -> Tensor<F> {
    let mut out = logits.clone();
    for i in 0..out.batch() {
        let row = out.row_mut(i);
        let m = row.iter().fold(row[0], |a, &b| a.max(b));
        let mut sum = F::ZERO;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Opaque forward state consumed by [`Network::backward`].
pub struct TrainState<F> {
    feats: Tensor<F>,
    caches: Vec<Option<BackboneCache<F>>>,
}

/// A model that can be fitted: eval forward, training forward/backward, named parameters.
pub trait Network<F: Scalar>: Send {
    fn num_classes(&self) -> usize;

    /// Inference-mode logits.
    fn logits(&self, x: &Tensor<F>) -> Result<Tensor<F>>;

    fn forward_train(&mut self, x: &Tensor<F>, scope: TrainableScope) -> Result<(Tensor<F>, TrainState<F>)>;

    fn backward(&mut self, state: TrainState<F>, dlogits: &Tensor<F>);

    fn visit_params(&self, f: &mut ParamVisitor<'_, F>);

    fn visit_params_mut(&mut self, f: &mut ParamVisitorMut<'_, F>);

    /// Whether the optimizer may update `name` under `scope`.
    fn is_trainable(&self, name: &str, scope: TrainableScope) -> bool;

    /// `(logits, probabilities)` for a batch.
    fn forward(&self, x: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
        let logits = self.logits(x)?;
        let probs = softmax(&logits);
        Ok((logits, probs))
    }

    fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |_, p| {
            if p.kind == ParamKind::Weight {
                p.zero_grad()
            }
        });
    }

    /// Copies of every parameter and buffer value, in visit order.
    fn snapshot(&self) -> Vec<Tensor<F>> {
        let mut out = Vec::new();
        self.visit_params(&mut |_, p| out.push(p.value.clone()));
        out
    }

    fn restore(&mut self, snapshot: &[Tensor<F>]) {
        let mut it = snapshot.iter();
        self.visit_params_mut(&mut |_, p| p.value = it.next().expect("snapshot matches model").clone());
    }
}

#[derive(Clone, Debug)]
pub struct ClassifierModel<F> {
    pub extractor: FeatureExtractor<F>,
    pub head: ClassificationHead<F>,
}

/// Attaches a freshly initialized `K`-way head to an extractor.
pub fn attach_head<F: Scalar>(extractor: FeatureExtractor<F>, classes: usize, seed: u64) -> Result<ClassifierModel<F>> {
    if classes < 2 {
        return Err(XensError::InvalidArgument(format!("head needs at least 2 classes, got {classes}")));
    }
    let head = ClassificationHead::init(extractor.feature_dim(), classes, seed);
    Ok(ClassifierModel { extractor, head })
}

/// Drops the head and returns the extractor frozen, parameters untouched.
pub fn strip_and_freeze<F: Scalar>(model: ClassifierModel<F>) -> FeatureExtractor<F> {
    let mut extractor = model.extractor;
    extractor.freeze();
    extractor
}

impl<F: Scalar> ClassifierModel<F> {
    /// Penultimate (pre-head) activations.
    pub fn penultimate(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        self.extractor.features(x)
    }
}

impl<F: Scalar> Network<F> for ClassifierModel<F> {
    fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    fn logits(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        self.head.forward(&self.extractor.features(x)?)
    }

    fn forward_train(&mut self, x: &Tensor<F>, scope: TrainableScope) -> Result<(Tensor<F>, TrainState<F>)> {
        let (feats, cache) = if scope == TrainableScope::All && !self.extractor.is_frozen() {
            let (f, c) = self.extractor.forward_train(x)?;
            (f, Some(c))
        } else {
            (self.extractor.features(x)?, None)
        };
        let logits = self.head.forward(&feats)?;
        Ok((
            logits,
            TrainState {
                feats,
                caches: vec![cache],
            },
        ))
    }

    fn backward(&mut self, mut state: TrainState<F>, dlogits: &Tensor<F>) {
        let dfeat = self.head.backward(&state.feats, dlogits);
        if let Some(cache) = state.caches.pop().flatten() {
            self.extractor.backbone.backward(cache, &dfeat);
        }
    }

    fn visit_params(&self, f: &mut ParamVisitor<'_, F>) {
        self.extractor.visit("extractor", f);
        self.head.visit("head", f);
    }

    fn visit_params_mut(&mut self, f: &mut ParamVisitorMut<'_, F>) {
        self.extractor.visit_mut("extractor", f);
        self.head.visit_mut("head", f);
    }

    fn is_trainable(&self, name: &str, scope: TrainableScope) -> bool {
        name.starts_with("head.") || (scope == TrainableScope::All && !self.extractor.is_frozen())
    }
}

/// Frozen member extractors whose concatenated features feed one trainable head.
#[derive(Clone, Debug)]
pub struct EnsembleModel<F> {
    pub members: Vec<FeatureExtractor<F>>,
    pub head: ClassificationHead<F>,
}

/// Concatenates frozen extractors (in argument order) under a new `K`-way head.
pub fn assemble_ensemble<F: Scalar>(
    members: Vec<FeatureExtractor<F>>,
    classes: usize,
    seed: u64,
) -> Result<EnsembleModel<F>> {
    if members.len() < 2 {
        return Err(XensError::InvalidArgument(format!(
            "an ensemble needs at least 2 extractors, got {}",
            members.len()
        )));
    }
    if let Some(i) = members.iter().position(|m| !m.is_frozen()) {
        return Err(XensError::InvalidArgument(format!("ensemble member {i} is not frozen")));
    }
    if classes < 2 {
        return Err(XensError::InvalidArgument(format!("head needs at least 2 classes, got {classes}")));
    }
    let concat_dim = members.iter().map(|m| m.feature_dim()).sum();
    Ok(EnsembleModel {
        members,
        head: ClassificationHead::init(concat_dim, classes, seed),
    })
}

impl<F: Scalar> EnsembleModel<F> {
    pub fn concat_dim(&self) -> usize {
        self.members.iter().map(|m| m.feature_dim()).sum()
    }

    /// Concatenated member features in member order.
    pub fn features(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let parts = self
            .members
            .iter()
            .map(|m| m.features(x))
            .collect::<Result<Vec<_>>>()?;
        Tensor::concat_cols(&parts.iter().collect::<Vec<_>>())
    }

    /// Lifts the freeze on every member so `TrainableScope::All` also tunes them.
    pub fn thaw_members(&mut self) {
        for m in &mut self.members {
            m.frozen = false;
        }
    }
}

impl<F: Scalar> Network<F> for EnsembleModel<F> {
    fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    fn logits(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        self.head.forward(&self.features(x)?)
    }

    fn forward_train(&mut self, x: &Tensor<F>, scope: TrainableScope) -> Result<(Tensor<F>, TrainState<F>)> {
        let mut parts = Vec::with_capacity(self.members.len());
        let mut caches = Vec::with_capacity(self.members.len());
        for m in &mut self.members {
            if scope == TrainableScope::All && !m.is_frozen() {
                let (f, c) = m.forward_train(x)?;
                parts.push(f);
                caches.push(Some(c));
            } else {
                parts.push(m.features(x)?);
                caches.push(None);
            }
        }
        let feats = Tensor::concat_cols(&parts.iter().collect::<Vec<_>>())?;
        let logits = self.head.forward(&feats)?;
        Ok((logits, TrainState { feats, caches }))
    }

    fn backward(&mut self, state: TrainState<F>, dlogits: &Tensor<F>) {
        let dfeat = self.head.backward(&state.feats, dlogits);
        let mut offset = 0;
        for (m, cache) in self.members.iter_mut().zip(state.caches) {
            let d = m.feature_dim();
            if let Some(cache) = cache {
                let n = dfeat.batch();
                let mut part = Tensor::zeros(&[n, d]);
                for i in 0..n {
                    part.row_mut(i).copy_from_slice(&dfeat.row(i)[offset..offset + d]);
                }
                m.backbone.backward(cache, &part);
            }
            offset += d;
        }
    }

    fn visit_params(&self, f: &mut ParamVisitor<'_, F>) {
        for (i, m) in self.members.iter().enumerate() {
            m.visit(&format!("members.{i}"), f);
        }
        self.head.visit("head", f);
    }

    fn visit_params_mut(&mut self, f: &mut ParamVisitorMut<'_, F>) {
        for (i, m) in self.members.iter_mut().enumerate() {
            m.visit_mut(&format!("members.{i}"), f);
        }
        self.head.visit_mut("head", f);
    }

    fn is_trainable(&self, name: &str, scope: TrainableScope) -> bool {
        if name.starts_with("head.") {
            return true;
        }
        if scope != TrainableScope::All {
            return false;
        }
        name.strip_prefix("members.")
            .and_then(|rest| rest.split('.').next())
            .and_then(|i| i.parse::<usize>().ok())
            .and_then(|i| self.members.get(i))
            .is_some_and(|m| !m.is_frozen())
    }
}

/// Model built from a bare head over precomputed features; used to train
/// ensemble heads from cached member features.
#[derive(Clone, Debug)]
pub struct HeadModel<F> {
    pub head: ClassificationHead<F>,
}

impl<F: Scalar> Network<F> for HeadModel<F> {
    fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    fn logits(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        self.head.forward(x)
    }

    fn forward_train(&mut self, x: &Tensor<F>, _scope: TrainableScope) -> Result<(Tensor<F>, TrainState<F>)> {
        let logits = self.head.forward(x)?;
        Ok((
            logits,
            TrainState {
                feats: x.clone(),
                caches: Vec::new(),
            },
        ))
    }

    fn backward(&mut self, state: TrainState<F>, dlogits: &Tensor<F>) {
        self.head.backward(&state.feats, dlogits);
    }

    fn visit_params(&self, f: &mut ParamVisitor<'_, F>) {
        self.head.visit("head", f);
    }

    fn visit_params_mut(&mut self, f: &mut ParamVisitorMut<'_, F>) {
        self.head.visit_mut("head", f);
    }

    fn is_trainable(&self, _name: &str, _scope: TrainableScope) -> bool {
        true
    }
}
