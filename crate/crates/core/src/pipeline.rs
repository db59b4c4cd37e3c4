//! End-to-end orchestration: sub-models a/b/c, baseline A, and the frozen
//! ensembles B_ab, C_ac, D_bc, E_abc, trained and evaluated fold by fold.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_classifier, save_classifier, save_ensemble, CheckpointInfo};
use crate::curation::{DatasetManifest, ManifestEntry, Scheme};
use crate::error::{Result, XensError};
use crate::evaluation::EvalReport;
use crate::imaging::{self, ImageStore};
use crate::model::{
    assemble_ensemble, attach_head, build_extractor, strip_and_freeze, ArchSpec, ClassifierModel, EnsembleModel,
    ExtractorInit, FeatureExtractor, HeadModel, Network, TrainableScope,
};
use crate::nn::{Scalar, Tensor};
use crate::sampling::{self, derive_seed, rng_from, AugmentationConfig, FoldPlan, SamplingPlan, SplitPlan};
use crate::training::{
    class_weights, fit, validation_loss_over, Batch, BatchValidator, ClassWeights, TrainConfig, TrainStream,
    TrainingHistory, Validator,
};

/// Parameter precision used for every trained and checkpointed model.
pub type P = f32;

pub const SUB_MODELS: [(&str, Scheme); 3] = [("a", Scheme::A), ("b", Scheme::B), ("c", Scheme::C)];
pub const BASELINE: &str = "A";
pub const ENSEMBLES: [(&str, &[&str]); 4] = [
    ("B_ab", &["a", "b"]),
    ("C_ac", &["a", "c"]),
    ("D_bc", &["b", "c"]),
    ("E_abc", &["a", "b", "c"]),
];
/// Models evaluated on the 3-class test set, in report order.
pub const MAIN_MODELS: [&str; 5] = ["A", "B_ab", "C_ac", "D_bc", "E_abc"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub arch: ArchSpec,
    /// Extractor archive shared by every sub-model and the baseline; random
    /// initialization from the run seed when absent.
    pub pretrained: Option<PathBuf>,
    pub augmentation: AugmentationConfig,
    pub sub_models: TrainConfig,
    pub baseline: TrainConfig,
    pub ensembles: TrainConfig,
    /// Train ensemble heads on member features computed once from
    /// unaugmented views instead of re-running the members every batch.
    pub ensemble_feature_cache: bool,
    pub eval_batch_size: usize,
    /// Fit the three sub-models on separate threads.
    pub parallel_sub_models: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            arch: ArchSpec::Resnet18,
            pretrained: None,
            augmentation: AugmentationConfig::default(),
            sub_models: TrainConfig::default(),
            baseline: TrainConfig::default(),
            ensembles: TrainConfig::head_only(),
            ensemble_feature_cache: false,
            eval_batch_size: 64,
            parallel_sub_models: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.augmentation.validate()?;
        self.sub_models.validate()?;
        self.baseline.validate()?;
        self.ensembles.validate()?;
        if self.eval_batch_size == 0 {
            return Err(XensError::InvalidArgument("eval_batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Stable 64-bit tag for a model name, mixed into seeds.
pub fn name_tag(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

const BACKBONE_TAG: u64 = 0x6261_636b;

/// One training or evaluation image.
#[derive(Clone, Debug)]
pub struct Item {
    pub id: String,
    pub path: PathBuf,
    pub hash: String,
    pub label: usize,
}

/// The 3-class manifest with its shared split and fold plans.
pub struct DataContext {
    pub manifest: DatasetManifest,
    pub split: SplitPlan,
    pub folds: FoldPlan,
    pub store: ImageStore,
    /// Recorded in every checkpoint (seed, variant, config digest, ...).
    pub provenance: BTreeMap<String, String>,
    pub seed: u64,
}

impl DataContext {
    pub fn new(
        manifest: DatasetManifest,
        split: SplitPlan,
        folds: FoldPlan,
        store: ImageStore,
        seed: u64,
        provenance: BTreeMap<String, String>,
    ) -> Result<Self> {
        if manifest.scheme != Scheme::D {
            return Err(XensError::InvalidArgument(format!(
                "pipeline manifest must use scheme D, got {}",
                manifest.scheme
            )));
        }
        split.check_against(&manifest)?;
        let train: BTreeSet<&String> = split.train_ids.iter().collect();
        let in_folds: BTreeSet<&String> = folds.folds.iter().flatten().collect();
        if train != in_folds || in_folds.len() != folds.folds.iter().map(Vec::len).sum::<usize>() {
            return Err(XensError::InvalidArgument(
                "fold plan does not partition the split's training ids".into(),
            ));
        }
        Ok(DataContext {
            manifest,
            split,
            folds,
            store,
            provenance,
            seed,
        })
    }

    pub fn items(&self, ids: &[String], scheme: Scheme) -> Result<Vec<Item>> {
        ids.iter()
            .map(|id| {
                let e: &ManifestEntry = self
                    .manifest
                    .entry(id)
                    .ok_or_else(|| XensError::Missing(format!("id {id} not in manifest")))?;
                Ok(Item {
                    id: e.id.clone(),
                    path: e.path.clone(),
                    hash: e.hash.clone(),
                    label: scheme.map(e.raw_label),
                })
            })
            .collect()
    }

    /// `(train, validation)` items for cross-validation round `fold`.
    pub fn fold_items(&self, fold: usize, scheme: Scheme) -> Result<(Vec<Item>, Vec<Item>)> {
        let (train, val) = self.folds.round(fold)?;
        Ok((self.items(&train, scheme)?, self.items(&val, scheme)?))
    }

    pub fn test_items(&self, scheme: Scheme) -> Result<Vec<Item>> {
        self.items(&self.split.test_ids, scheme)
    }

    pub fn provenance_for(&self, model: &str, fold: usize) -> BTreeMap<String, String> {
        let mut p = self.provenance.clone();
        p.insert("model".into(), model.into());
        p.insert("fold".into(), fold.to_string());
        p.insert("seed".into(), self.seed.to_string());
        p
    }
}

fn label_counts(items: &[Item], k: usize) -> Vec<usize> {
    let mut counts = vec![0; k];
    for it in items {
        counts[it.label] += 1;
    }
    counts
}

fn sampling_plan(items: &[Item], k: usize, oversample: bool) -> Result<SamplingPlan> {
    let labels: Vec<usize> = items.iter().map(|i| i.label).collect();
    if oversample {
        sampling::oversample_weights(&labels, k)
    } else {
        Ok(sampling::uniform_plan(labels.len()))
    }
}

/// Augmented image batches drawn under a sampling plan.
pub struct ImageTrainStream<'a> {
    pub items: &'a [Item],
    pub store: &'a ImageStore,
    pub augmentation: &'a AugmentationConfig,
    pub plan: SamplingPlan,
    pub batch_size: usize,
    pub seed: u64,
    pub producers: usize,
}

impl<F: Scalar> TrainStream<F> for ImageTrainStream<'_> {
    fn run_epoch(&mut self, epoch: usize, consume: &mut dyn FnMut(usize, Batch<F>) -> Result<()>) -> Result<()> {
        let batches = sampling::epoch_batches(&self.plan, self.batch_size, derive_seed(&[self.seed, epoch as u64]))?;
        let (items, store, aug, seed) = (self.items, self.store, self.augmentation, self.seed);
        sampling::run_batches(
            batches.len(),
            self.producers,
            |b| {
                let mut planes = Vec::with_capacity(batches[b].len());
                for (pos, &idx) in batches[b].iter().enumerate() {
                    let it = &items[idx];
                    let resized = store.load(&it.path, &it.hash, aug.resize_to)?;
                    let mut rng = rng_from(&[seed, epoch as u64, b as u64, pos as u64]);
                    planes.push(sampling::augment_resized(&resized, aug, &mut rng));
                }
                Ok(Batch {
                    x: imaging::to_input::<F>(&planes)?,
                    labels: batches[b].iter().map(|&i| items[i].label).collect(),
                })
            },
            |b, batch| consume(b, batch),
        )
    }
}

/// Unaugmented (center-cropped) inputs for `items[range]`.
pub fn eval_inputs<F: Scalar>(
    items: &[Item],
    store: &ImageStore,
    augmentation: &AugmentationConfig,
) -> Result<Tensor<F>> {
    let planes = items
        .iter()
        .map(|it| {
            let resized = store.load(&it.path, &it.hash, augmentation.resize_to)?;
            Ok(sampling::eval_view_resized(&resized, augmentation))
        })
        .collect::<Result<Vec<_>>>()?;
    imaging::to_input(&planes)
}

/// Validation loss over center-cropped images, realized per call.
pub struct ImageValidator<'a> {
    pub items: &'a [Item],
    pub store: &'a ImageStore,
    pub augmentation: &'a AugmentationConfig,
    pub batch_size: usize,
    pub weights: ClassWeights,
}

impl<F: Scalar> Validator<F> for ImageValidator<'_> {
    fn validation_loss(&mut self, model: &dyn Network<F>, _epoch: usize) -> Result<f64> {
        let chunks: Vec<&[Item]> = self.items.chunks(self.batch_size).collect();
        validation_loss_over(model, &self.weights, chunks.len(), |i| {
            let x = eval_inputs(chunks[i], self.store, self.augmentation)?;
            Ok((x, chunks[i].iter().map(|it| it.label).collect()))
        })
    }
}

/// Batches of rows from a precomputed feature matrix.
pub struct FeatureTrainStream<'a, F> {
    pub features: &'a Tensor<F>,
    pub labels: &'a [usize],
    pub plan: SamplingPlan,
    pub batch_size: usize,
    pub seed: u64,
}

impl<F: Scalar> TrainStream<F> for FeatureTrainStream<'_, F> {
    fn run_epoch(&mut self, epoch: usize, consume: &mut dyn FnMut(usize, Batch<F>) -> Result<()>) -> Result<()> {
        let batches = sampling::epoch_batches(&self.plan, self.batch_size, derive_seed(&[self.seed, epoch as u64]))?;
        for (b, idx) in batches.iter().enumerate() {
            consume(
                b,
                Batch {
                    x: self.features.select_rows(idx),
                    labels: idx.iter().map(|&i| self.labels[i]).collect(),
                },
            )?;
        }
        Ok(())
    }
}

/// Applies `f` to center-cropped inputs in chunks and stacks the row outputs.
pub fn map_batches<F: Scalar>(
    items: &[Item],
    store: &ImageStore,
    augmentation: &AugmentationConfig,
    batch_size: usize,
    mut f: impl FnMut(&Tensor<F>) -> Result<Tensor<F>>,
) -> Result<Tensor<F>> {
    let mut rows: Vec<F> = Vec::new();
    let mut width = 0;
    for chunk in items.chunks(batch_size) {
        let out = f(&eval_inputs(chunk, store, augmentation)?)?;
        width = out.row_len();
        rows.extend_from_slice(out.data());
    }
    Tensor::from_vec(&[items.len(), width], rows)
}

pub fn extractor_init(config: &PipelineConfig, seed: u64) -> ExtractorInit {
    match &config.pretrained {
        Some(path) => ExtractorInit::PretrainedArchive(path.clone()),
        None => ExtractorInit::Seed(derive_seed(&[seed, BACKBONE_TAG])),
    }
}

fn phase_seed(ctx: &DataContext, cfg: &TrainConfig, model: &str, fold: usize) -> u64 {
    derive_seed(&[ctx.seed, cfg.seed, fold as u64, name_tag(model)])
}

/// Fits one classifier (sub-model or baseline) on the fold's training images.
pub fn train_classifier(
    ctx: &DataContext,
    config: &PipelineConfig,
    train: &TrainConfig,
    model_name: &str,
    scheme: Scheme,
    fold: usize,
) -> Result<(ClassifierModel<P>, TrainingHistory)> {
    let k = scheme.num_classes();
    let (train_items, val_items) = ctx.fold_items(fold, scheme)?;
    let weights = class_weights(&label_counts(&train_items, k))?;
    let seed = phase_seed(ctx, train, model_name, fold);
    let extractor = build_extractor::<P>(config.arch, &extractor_init(config, ctx.seed))?;
    let mut model = attach_head(extractor, k, derive_seed(&[seed, 1]))?;
    let mut stream = ImageTrainStream {
        items: &train_items,
        store: &ctx.store,
        augmentation: &config.augmentation,
        plan: sampling_plan(&train_items, k, train.oversample)?,
        batch_size: train.batch_size,
        seed,
        producers: train.loader_threads,
    };
    let mut validator = ImageValidator {
        items: &val_items,
        store: &ctx.store,
        augmentation: &config.augmentation,
        batch_size: config.eval_batch_size,
        weights: weights.clone(),
    };
    log::info!("fold {fold}: training {model_name} on scheme {scheme} ({} images)", train_items.len());
    let history = fit(&mut model, &mut stream, &mut validator, &weights, train)?;
    Ok((model, history))
}

/// Fits the head of an ensemble over frozen members on the 3-class fold data.
pub fn train_ensemble(
    ctx: &DataContext,
    config: &PipelineConfig,
    model_name: &str,
    members: Vec<FeatureExtractor<P>>,
    fold: usize,
) -> Result<(EnsembleModel<P>, TrainingHistory)> {
    let scheme = Scheme::D;
    let k = scheme.num_classes();
    let train = &config.ensembles;
    let (train_items, val_items) = ctx.fold_items(fold, scheme)?;
    let weights = class_weights(&label_counts(&train_items, k))?;
    let seed = phase_seed(ctx, train, model_name, fold);
    let mut model = assemble_ensemble(members, k, derive_seed(&[seed, 1]))?;
    let plan = sampling_plan(&train_items, k, train.oversample)?;
    log::info!("fold {fold}: training {model_name} head ({} features)", model.concat_dim());

    let head_only = train.trainable_scope == TrainableScope::HeadOnly;
    let history = if head_only && config.ensemble_feature_cache {
        let feats = |items: &[Item]| {
            map_batches(items, &ctx.store, &config.augmentation, config.eval_batch_size, |x| model.features(x))
        };
        let train_feats = feats(&train_items)?;
        let val_feats = feats(&val_items)?;
        let train_labels: Vec<usize> = train_items.iter().map(|i| i.label).collect();
        let mut head = HeadModel { head: model.head.clone() };
        let mut stream = FeatureTrainStream {
            features: &train_feats,
            labels: &train_labels,
            plan,
            batch_size: train.batch_size,
            seed,
        };
        let rows: Vec<usize> = (0..val_items.len()).collect();
        let mut validator = BatchValidator {
            batches: rows
                .chunks(config.eval_batch_size)
                .map(|c| Batch {
                    x: val_feats.select_rows(c),
                    labels: c.iter().map(|&i| val_items[i].label).collect(),
                })
                .collect(),
            weights: weights.clone(),
        };
        let history = fit(&mut head, &mut stream, &mut validator, &weights, train)?;
        model.head = head.head;
        history
    } else {
        if !head_only {
            model.thaw_members();
        }
        let mut stream = ImageTrainStream {
            items: &train_items,
            store: &ctx.store,
            augmentation: &config.augmentation,
            plan,
            batch_size: train.batch_size,
            seed,
            producers: train.loader_threads,
        };
        let mut validator = ImageValidator {
            items: &val_items,
            store: &ctx.store,
            augmentation: &config.augmentation,
            batch_size: config.eval_batch_size,
            weights: weights.clone(),
        };
        let history = fit(&mut model, &mut stream, &mut validator, &weights, train)?;
        for m in &mut model.members {
            m.freeze();
        }
        history
    };
    Ok((model, history))
}

/// Predicts the 3-class test set and builds the report.
pub fn evaluate_items(
    net: &dyn Network<P>,
    items: &[Item],
    store: &ImageStore,
    config: &PipelineConfig,
    model_id: &str,
    dataset_id: &str,
    class_names: &[String],
) -> Result<EvalReport> {
    if net.num_classes() != class_names.len() {
        return Err(XensError::Shape(format!(
            "model {model_id} has {} classes, dataset has {}",
            net.num_classes(),
            class_names.len()
        )));
    }
    let probs = map_batches(items, store, &config.augmentation, config.eval_batch_size, |x| {
        Ok(net.forward(x)?.1)
    })?;
    EvalReport::from_probabilities(
        model_id,
        dataset_id,
        class_names,
        items.iter().map(|i| i.id.clone()).collect(),
        items.iter().map(|i| i.label).collect(),
        &probs,
    )
}

/// Where each artifact of a run lives.
#[derive(Clone, Debug)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunLayout { root: root.into() }
    }

    pub fn checkpoint_dir(&self, fold: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("fold{fold}"))
    }

    pub fn checkpoint(&self, fold: usize, model: &str) -> PathBuf {
        self.checkpoint_dir(fold).join(format!("{model}.ckpt"))
    }

    pub fn history(&self, fold: usize, model: &str) -> PathBuf {
        self.checkpoint_dir(fold).join(format!("{model}.history.tsv"))
    }

    pub fn report_dir(&self, fold: usize, model: &str) -> PathBuf {
        self.root.join("reports").join(format!("fold{fold}")).join(model)
    }

    pub fn reports_root(&self) -> PathBuf {
        self.root.join("reports")
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| XensError::io(path, e))
}

fn class_names(scheme: Scheme) -> Vec<String> {
    scheme.class_names().iter().map(|s| s.to_string()).collect()
}

/// Trains and saves a sub-model (`a`, `b`, `c`) for one fold.
pub fn run_sub_model(
    ctx: &DataContext,
    config: &PipelineConfig,
    layout: &RunLayout,
    name: &str,
    fold: usize,
) -> Result<TrainingHistory> {
    let scheme = SUB_MODELS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, s)| *s)
        .ok_or_else(|| XensError::InvalidArgument(format!("unknown sub-model {name:?} (expected a, b, c)")))?;
    let (model, history) = train_classifier(ctx, config, &config.sub_models, name, scheme, fold)?;
    save_trained(ctx, layout, &model, &history, name, scheme, fold)?;
    Ok(history)
}

pub fn run_baseline(ctx: &DataContext, config: &PipelineConfig, layout: &RunLayout, fold: usize) -> Result<TrainingHistory> {
    let (model, history) = train_classifier(ctx, config, &config.baseline, BASELINE, Scheme::D, fold)?;
    save_trained(ctx, layout, &model, &history, BASELINE, Scheme::D, fold)?;
    Ok(history)
}

fn save_trained(
    ctx: &DataContext,
    layout: &RunLayout,
    model: &ClassifierModel<P>,
    history: &TrainingHistory,
    name: &str,
    scheme: Scheme,
    fold: usize,
) -> Result<()> {
    ensure_dir(&layout.checkpoint_dir(fold))?;
    let info = CheckpointInfo {
        class_names: class_names(scheme),
        member_names: vec![name.to_string()],
        member_digests: Vec::new(),
        provenance: ctx.provenance_for(name, fold),
    };
    save_classifier(model, &info, &layout.checkpoint(fold, name))?;
    let mut history = history.clone();
    history.provenance = ctx.provenance_for(name, fold);
    history.write(&layout.history(fold, name))
}

/// Assembles an ensemble from saved sub-model checkpoints, trains its head,
/// and saves it.
pub fn run_ensemble(
    ctx: &DataContext,
    config: &PipelineConfig,
    layout: &RunLayout,
    name: &str,
    member_names: &[String],
    fold: usize,
) -> Result<TrainingHistory> {
    let mut members = Vec::new();
    let mut digests = Vec::new();
    for m in member_names {
        let path = layout.checkpoint(fold, m);
        if !path.is_file() {
            return Err(XensError::Missing(format!(
                "sub-model checkpoint {} (train sub-model {m} for fold {fold} first)",
                path.display()
            )));
        }
        let bytes = std::fs::read(&path).map_err(|e| XensError::io(&path, e))?;
        digests.push(Some(hex::encode(<sha2::Sha256 as sha2::Digest>::digest(&bytes))));
        let (model, _) = load_classifier::<P>(&path, None)?;
        members.push(strip_and_freeze(model));
    }
    let (model, history) = train_ensemble(ctx, config, name, members, fold)?;
    ensure_dir(&layout.checkpoint_dir(fold))?;
    let info = CheckpointInfo {
        class_names: class_names(Scheme::D),
        member_names: member_names.to_vec(),
        member_digests: digests,
        provenance: ctx.provenance_for(name, fold),
    };
    save_ensemble(&model, &info, &layout.checkpoint(fold, name))?;
    let mut history = history;
    history.provenance = ctx.provenance_for(name, fold);
    history.write(&layout.history(fold, name))?;
    Ok(history)
}

/// Evaluates a saved 3-class model on the test split and writes its report.
pub fn run_evaluation(
    ctx: &DataContext,
    config: &PipelineConfig,
    layout: &RunLayout,
    name: &str,
    fold: usize,
) -> Result<EvalReport> {
    let path = layout.checkpoint(fold, name);
    let (model, _) = crate::checkpoint::load_model::<P>(&path, Some(3))?;
    let items = ctx.test_items(Scheme::D)?;
    let mut report = evaluate_items(
        model.as_network(),
        &items,
        &ctx.store,
        config,
        name,
        "test",
        &class_names(Scheme::D),
    )?;
    report.provenance = ctx.provenance_for(name, fold);
    report.write(&layout.report_dir(fold, name))?;
    Ok(report)
}

pub fn ensemble_members(name: &str) -> Result<Vec<String>> {
    ENSEMBLES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, m)| m.iter().map(|s| s.to_string()).collect())
        .ok_or_else(|| XensError::InvalidArgument(format!("unknown ensemble {name:?}")))
}

/// Every training and evaluation step for the given folds, in order:
/// sub-models, baseline, ensembles, then test-set evaluation.
pub fn run_pipeline(
    ctx: &DataContext,
    config: &PipelineConfig,
    layout: &RunLayout,
    folds: &[usize],
) -> Result<BTreeMap<(usize, String), EvalReport>> {
    config.validate()?;
    let mut reports = BTreeMap::new();
    for &fold in folds {
        if config.parallel_sub_models {
            std::thread::scope(|s| {
                let handles: Vec<_> = SUB_MODELS
                    .iter()
                    .map(|(name, _)| s.spawn(move || run_sub_model(ctx, config, layout, name, fold)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("sub-model thread panicked"))
                    .collect::<Result<Vec<_>>>()
            })?;
        } else {
            for (name, _) in SUB_MODELS {
                run_sub_model(ctx, config, layout, name, fold)?;
            }
        }
        run_baseline(ctx, config, layout, fold)?;
        for (name, members) in ENSEMBLES {
            let members: Vec<String> = members.iter().map(|s| s.to_string()).collect();
            run_ensemble(ctx, config, layout, name, &members, fold)?;
        }
        for name in MAIN_MODELS {
            let report = run_evaluation(ctx, config, layout, name, fold)?;
            reports.insert((fold, name.to_string()), report);
        }
    }
    Ok(reports)
}
