//! Weighted cross-entropy, Adam, early stopping with best-epoch restore, and
//! the generic fit loop.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, XensError};
use crate::model::{Network, TrainableScope};
use crate::nn::{ParamKind, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    pub w: Vec<f64>,
}

impl ClassWeights {
    pub fn uniform(k: usize) -> Self {
        ClassWeights { w: vec![1.0; k] }
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

/// `w_c = N / (K * N_c)`.
pub fn class_weights(counts: &[usize]) -> Result<ClassWeights> {
    if counts.is_empty() {
        return Err(XensError::InvalidArgument("no classes to weight".into()));
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(XensError::EmptyClass(format!("class {c} has zero images (counts {counts:?})")));
    }
    let total: usize = counts.iter().sum();
    let k = counts.len() as f64;
    Ok(ClassWeights {
        w: counts.iter().map(|&n| total as f64 / (k * n as f64)).collect(),
    })
}

fn check_targets<F: Scalar>(logits: &Tensor<F>, labels: &[usize], weights: &ClassWeights) -> Result<usize> {
    let k = logits.row_len();
    if logits.batch() != labels.len() {
        return Err(XensError::Shape(format!("{} logit rows for {} labels", logits.batch(), labels.len())));
    }
    if weights.len() != k {
        return Err(XensError::Shape(format!("{} class weights for {k} classes", weights.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(XensError::InvalidArgument(format!("label {bad} outside 0..{k}")));
    }
    if labels.is_empty() {
        return Err(XensError::InvalidArgument("empty batch".into()));
    }
    Ok(k)
}

/// Per-row `(log-sum-exp, max)` evaluated in f64.
fn log_softmax_row<F: Scalar>(row: &[F]) -> (f64, Vec<f64>) {
    let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v.to_f64() - max).exp()).collect();
    let lse = max + exps.iter().sum::<f64>().ln();
    (lse, exps)
}

/// Per-sample `-log softmax(z_i)[y_i]`.
pub fn per_sample_cross_entropy<F: Scalar>(logits: &Tensor<F>, labels: &[usize]) -> Vec<f64> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let row = logits.row(i);
            let (lse, _) = log_softmax_row(row);
            lse - row[y].to_f64()
        })
        .collect()
}

/// `Σ w_{y_i} ℓ_i / Σ w_{y_i}`.
pub fn weighted_cross_entropy<F: Scalar>(logits: &Tensor<F>, labels: &[usize], weights: &ClassWeights) -> Result<f64> {
    check_targets(logits, labels, weights)?;
    let losses = per_sample_cross_entropy(logits, labels);
    let (num, den) = losses
        .iter()
        .zip(labels)
        .fold((0.0, 0.0), |(n, d), (l, &y)| (n + weights.w[y] * l, d + weights.w[y]));
    Ok(num / den)
}

/// Loss, its gradient with respect to the logits, and the batch weight sum.
pub fn weighted_cross_entropy_grad<F: Scalar>(
    logits: &Tensor<F>,
    labels: &[usize],
    weights: &ClassWeights,
) -> Result<(f64, Tensor<F>, f64)> {
    let k = check_targets(logits, labels, weights)?;
    let den: f64 = labels.iter().map(|&y| weights.w[y]).sum();
    let mut grad = Tensor::zeros(&[labels.len(), k]);
    let mut num = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let (lse, exps) = log_softmax_row(row);
        let sum: f64 = exps.iter().sum();
        let wi = weights.w[y];
        num += wi * (lse - row[y].to_f64());
        for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
            let p = exps[j] / sum;
            let target = if j == y { 1.0 } else { 0.0 };
            *g = F::from_f64(wi * (p - target) / den);
        }
    }
    Ok((num / den, grad, den))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

/// Adam over the trainable weight parameters of one network. Moments are
/// aligned with the network's parameter visit order.
pub struct Adam<F> {
    config: AdamConfig,
    step: i32,
    trainable: Vec<bool>,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new<N: Network<F> + ?Sized>(model: &N, scope: TrainableScope, config: AdamConfig) -> Self {
        let mut trainable = Vec::new();
        let mut sizes = Vec::new();
        model.visit_params(&mut |name, p| {
            let t = p.kind == ParamKind::Weight && model.is_trainable(name, scope);
            trainable.push(t);
            sizes.push(if t { p.value.len() } else { 0 });
        });
        Adam {
            config,
            step: 0,
            trainable,
            m: sizes.iter().map(|&n| vec![F::ZERO; n]).collect(),
            v: sizes.iter().map(|&n| vec![F::ZERO; n]).collect(),
        }
    }

    pub fn step<N: Network<F> + ?Sized>(&mut self, model: &mut N) {
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let mut idx = 0;
        let (trainable, ms, vs) = (&self.trainable, &mut self.m, &mut self.v);
        model.visit_params_mut(&mut |_, p| {
            let i = idx;
            idx += 1;
            if !trainable[i] {
                return;
            }
            let (m, v) = (&mut ms[i], &mut vs[i]);
            let grad = p.grad.data().to_vec();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[j].to_f64();
                let mj = b1 * m[j].to_f64() + (1.0 - b1) * g;
                let vj = b2 * v[j].to_f64() + (1.0 - b2) * g * g;
                m[j] = F::from_f64(mj);
                v[j] = F::from_f64(vj);
                let update = lr * (mj / c1) / ((vj / c2).sqrt() + eps);
                *w = F::from_f64(w.to_f64() - update);
            }
        });
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::Patience => "patience",
            StopReason::MaxEpochs => "max_epochs",
        })
    }
}

impl FromStr for StopReason {
    type Err = XensError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "patience" => Ok(StopReason::Patience),
            "max_epochs" => Ok(StopReason::MaxEpochs),
            other => Err(XensError::InvalidArgument(format!("unknown stop reason {other:?}"))),
        }
    }
}

/// Running-minimum tracker. Epochs are 1-indexed; only a strictly lower
/// validation loss counts as an improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub max_epochs: usize,
    best_epoch: usize,
    best_loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Observation {
    pub improved: bool,
    pub stop: Option<StopReason>,
}

impl EarlyStopping {
    pub fn new(patience: usize, max_epochs: usize) -> Self {
        EarlyStopping {
            patience,
            max_epochs,
            best_epoch: 0,
            best_loss: f64::INFINITY,
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> Observation {
        let improved = self.best_epoch == 0 || val_loss < self.best_loss;
        if improved {
            self.best_epoch = epoch;
            self.best_loss = val_loss;
        }
        let stop = if epoch - self.best_epoch >= self.patience {
            Some(StopReason::Patience)
        } else if epoch >= self.max_epochs {
            Some(StopReason::MaxEpochs)
        } else {
            None
        };
        Observation { improved, stop }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    /// Defaults to 1e-4 for `all` and 1e-3 for `head-only`.
    pub learning_rate: Option<f64>,
    pub adam_betas: [f64; 2],
    pub adam_epsilon: f64,
    pub seed: u64,
    pub trainable_scope: TrainableScope,
    /// Draw training batches with inverse class-frequency weights.
    pub oversample: bool,
    /// Producer threads preparing batches ahead of the optimizer.
    pub loader_threads: usize,
    /// Best-epoch snapshots larger than this many bytes are kept on disk.
    pub snapshot_spill_bytes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 500,
            patience: 100,
            batch_size: 32,
            learning_rate: None,
            adam_betas: [0.9, 0.999],
            adam_epsilon: 1e-8,
            seed: 0,
            trainable_scope: TrainableScope::All,
            oversample: true,
            loader_threads: 1,
            snapshot_spill_bytes: 512 << 20,
        }
    }
}

impl TrainConfig {
    pub fn head_only() -> Self {
        TrainConfig {
            trainable_scope: TrainableScope::HeadOnly,
            ..Default::default()
        }
    }

    pub fn effective_learning_rate(&self) -> f64 {
        self.learning_rate.unwrap_or(match self.trainable_scope {
            TrainableScope::All => 1e-4,
            TrainableScope::HeadOnly => 1e-3,
        })
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.effective_learning_rate(),
            beta1: self.adam_betas[0],
            beta2: self.adam_betas[1],
            epsilon: self.adam_epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(XensError::InvalidArgument(m));
        if self.max_epochs < 1 {
            return bad("max_epochs must be at least 1".into());
        }
        if self.patience < 1 {
            return bad("patience must be at least 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1".into());
        }
        let lr = self.effective_learning_rate();
        if !(lr > 0.0 && lr.is_finite()) {
            return bad(format!("learning_rate {lr} must be positive"));
        }
        if !self.adam_betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return bad(format!("adam_betas {:?} must lie in [0, 1)", self.adam_betas));
        }
        if !(self.adam_epsilon > 0.0) {
            return bad(format!("adam_epsilon {} must be positive", self.adam_epsilon));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub stop_reason: StopReason,
    /// Extra footer entries (run provenance).
    pub provenance: BTreeMap<String, String>,
}

const HISTORY_KEYS: [&str; 3] = ["best_epoch", "stopped_epoch", "stop_reason"];

impl TrainingHistory {
    /// `epoch  train_loss  val_loss` rows followed by `#key=value` footer lines.
    pub fn to_text(&self) -> String {
        let mut out = String::from("epoch\ttrain_loss\tval_loss\n");
        for r in &self.epochs {
            out.push_str(&format!("{}\t{}\t{}\n", r.epoch, r.train_loss, r.val_loss));
        }
        out.push_str(&format!("#best_epoch={}\n", self.best_epoch));
        out.push_str(&format!("#stopped_epoch={}\n", self.stopped_epoch));
        out.push_str(&format!("#stop_reason={}\n", self.stop_reason));
        for (k, v) in &self.provenance {
            out.push_str(&format!("#{k}={v}\n"));
        }
        out
    }

    pub fn parse(text: &str, ctx: &str) -> Result<Self> {
        let err = |m: String| XensError::parse(ctx, m);
        let mut lines = text.lines();
        if lines.next() != Some("epoch\ttrain_loss\tval_loss") {
            return Err(err("missing history header".into()));
        }
        let mut epochs = Vec::new();
        let mut footer = BTreeMap::new();
        for line in lines {
            if let Some(kv) = line.strip_prefix('#') {
                let (k, v) = kv.split_once('=').ok_or_else(|| err(format!("bad footer {line:?}")))?;
                footer.insert(k.to_string(), v.to_string());
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 || !footer.is_empty() {
                return Err(err(format!("bad history row {line:?}")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| err(format!("bad number {s:?}")));
            epochs.push(EpochRecord {
                epoch: f[0].parse().map_err(|_| err(format!("bad epoch {:?}", f[0])))?,
                train_loss: num(f[1])?,
                val_loss: num(f[2])?,
            });
        }
        let get = |k: &str| footer.get(k).ok_or_else(|| err(format!("missing footer {k}")));
        Ok(TrainingHistory {
            epochs,
            best_epoch: get("best_epoch")?.parse().map_err(|_| err("bad best_epoch".into()))?,
            stopped_epoch: get("stopped_epoch")?.parse().map_err(|_| err("bad stopped_epoch".into()))?,
            stop_reason: get("stop_reason")?.parse()?,
            provenance: footer
                .iter()
                .filter(|(k, _)| !HISTORY_KEYS.contains(&k.as_str()))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| XensError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| XensError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}

pub struct Batch<F> {
    pub x: Tensor<F>,
    pub labels: Vec<usize>,
}

/// Source of training batches; `epoch` is 1-indexed.
pub trait TrainStream<F> {
    fn run_epoch(&mut self, epoch: usize, consume: &mut dyn FnMut(usize, Batch<F>) -> Result<()>) -> Result<()>;
}

pub trait Validator<F: Scalar> {
    /// Validation loss of `model` after `epoch`.
    fn validation_loss(&mut self, model: &dyn Network<F>, epoch: usize) -> Result<f64>;
}

/// Weighted cross-entropy over a fixed list of batches, reduced over the
/// whole set rather than averaged per batch.
pub struct BatchValidator<F> {
    pub batches: Vec<Batch<F>>,
    pub weights: ClassWeights,
}

impl<F: Scalar> Validator<F> for BatchValidator<F> {
    fn validation_loss(&mut self, model: &dyn Network<F>, _epoch: usize) -> Result<f64> {
        validation_loss_over(model, &self.weights, self.batches.len(), |i| {
            let b = &self.batches[i];
            Ok((b.x.clone(), b.labels.clone()))
        })
    }
}

/// Σ w ℓ / Σ w across `n` batches produced by `batch`.
pub fn validation_loss_over<F: Scalar>(
    model: &dyn Network<F>,
    weights: &ClassWeights,
    n: usize,
    mut batch: impl FnMut(usize) -> Result<(Tensor<F>, Vec<usize>)>,
) -> Result<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..n {
        let (x, labels) = batch(i)?;
        let logits = model.logits(&x)?;
        check_targets(&logits, &labels, weights)?;
        for (l, &y) in per_sample_cross_entropy(&logits, &labels).iter().zip(&labels) {
            num += weights.w[y] * l;
            den += weights.w[y];
        }
    }
    if den == 0.0 {
        return Err(XensError::InvalidArgument("empty validation set".into()));
    }
    Ok(num / den)
}

/// Best-epoch parameter copy, held in memory or spilled to an anonymous
/// temporary file when larger than the configured limit.
pub struct Snapshot<F> {
    memory: Option<Vec<Tensor<F>>>,
    file: Option<std::fs::File>,
    shapes: Vec<Vec<usize>>,
    spill_bytes: usize,
}

impl<F: Scalar> Snapshot<F> {
    pub fn new(spill_bytes: usize) -> Self {
        Snapshot {
            memory: None,
            file: None,
            shapes: Vec::new(),
            spill_bytes,
        }
    }

    pub fn is_spilled(&self) -> bool {
        self.file.is_some() && self.memory.is_none()
    }

    pub fn save<N: Network<F> + ?Sized>(&mut self, model: &N) -> Result<()> {
        let tensors = model.snapshot();
        let bytes: usize = tensors.iter().map(|t| t.len() * F::DTYPE.width()).sum();
        if bytes <= self.spill_bytes {
            self.memory = Some(tensors);
            return Ok(());
        }
        self.memory = None;
        let spill_err = |e| XensError::io(std::env::temp_dir(), e);
        let file = match &mut self.file {
            Some(f) => f,
            None => self.file.insert(tempfile::tempfile().map_err(spill_err)?),
        };
        file.seek(SeekFrom::Start(0)).map_err(spill_err)?;
        file.set_len(0).map_err(spill_err)?;
        let mut w = std::io::BufWriter::new(&mut *file);
        let mut buf = Vec::new();
        self.shapes.clear();
        for t in &tensors {
            buf.clear();
            for v in t.data() {
                v.write_le(&mut buf);
            }
            w.write_all(&buf).map_err(spill_err)?;
            self.shapes.push(t.shape().to_vec());
        }
        w.flush().map_err(spill_err)?;
        Ok(())
    }

    pub fn restore<N: Network<F> + ?Sized>(&mut self, model: &mut N) -> Result<()> {
        if let Some(tensors) = &self.memory {
            model.restore(tensors);
            return Ok(());
        }
        let file = self
            .file
            .as_mut()
            .ok_or_else(|| XensError::Missing("no snapshot was taken".into()))?;
        let spill_err = |e| XensError::io(std::env::temp_dir(), e);
        file.seek(SeekFrom::Start(0)).map_err(spill_err)?;
        let mut r = std::io::BufReader::new(&mut *file);
        let width = F::DTYPE.width();
        let mut tensors = Vec::with_capacity(self.shapes.len());
        for shape in &self.shapes {
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * width];
            r.read_exact(&mut bytes).map_err(spill_err)?;
            let data = bytes.chunks_exact(width).map(F::read_le).collect();
            tensors.push(Tensor::from_vec(shape, data)?);
        }
        model.restore(&tensors);
        Ok(())
    }
}

/// Trains `model` in place and leaves it holding the best-epoch parameters.
pub fn fit<F, N>(
    model: &mut N,
    stream: &mut dyn TrainStream<F>,
    validator: &mut dyn Validator<F>,
    weights: &ClassWeights,
    config: &TrainConfig,
) -> Result<TrainingHistory>
where
    F: Scalar,
    N: Network<F>,
{
    config.validate()?;
    let scope = config.trainable_scope;
    let mut adam = Adam::new(model, scope, config.adam());
    let mut stopper = EarlyStopping::new(config.patience, config.max_epochs);
    let mut snapshot = Snapshot::new(config.snapshot_spill_bytes);
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=config.max_epochs {
        let (mut num, mut den) = (0.0, 0.0);
        stream.run_epoch(epoch, &mut |b, batch| {
            model.zero_grad();
            let (logits, state) = model.forward_train(&batch.x, scope)?;
            let (loss, dlogits, wsum) = weighted_cross_entropy_grad(&logits, &batch.labels, weights)?;
            if !loss.is_finite() {
                return Err(XensError::NonFiniteLoss { epoch, batch: b });
            }
            model.backward(state, &dlogits);
            adam.step(model);
            num += loss * wsum;
            den += wsum;
            Ok(())
        })?;
        if den == 0.0 {
            return Err(XensError::InvalidArgument("training stream produced no batches".into()));
        }
        let train_loss = num / den;
        let val_loss = validator.validation_loss(&*model, epoch)?;
        if !val_loss.is_finite() {
            return Err(XensError::NonFiniteLoss { epoch, batch: 0 });
        }
        let obs = stopper.observe(epoch, val_loss);
        if obs.improved {
            snapshot.save(model)?;
        }
        log::debug!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if let Some(reason) = obs.stop {
            stop_reason = reason;
            break;
        }
    }
    snapshot.restore(model)?;
    let history = TrainingHistory {
        stopped_epoch: epochs.last().map_or(0, |r| r.epoch),
        epochs,
        best_epoch: stopper.best_epoch(),
        stop_reason,
        provenance: BTreeMap::new(),
    };
    log::info!(
        "stopped at epoch {} ({}), best epoch {}",
        history.stopped_epoch,
        history.stop_reason,
        history.best_epoch
    );
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_reduction_hand_value() {
        // sample 0 certain and correct, sample 1 uniform over three classes
        let logits = Tensor::from_vec(&[2, 3], vec![100.0f64, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let w = ClassWeights { w: vec![1.0, 2.0, 1.0] };
        let loss = weighted_cross_entropy(&logits, &[0, 1], &w).unwrap();
        assert!((loss - 2.0 * 3f64.ln() / 3.0).abs() < 1e-12);
    }

    #[test]
    fn history_round_trip() {
        let h = TrainingHistory {
            epochs: vec![
                EpochRecord {
                    epoch: 1,
                    train_loss: 0.1 + 0.2,
                    val_loss: 1.0 / 3.0,
                },
                EpochRecord {
                    epoch: 2,
                    train_loss: 1e-17,
                    val_loss: 2.5,
                },
            ],
            best_epoch: 1,
            stopped_epoch: 2,
            stop_reason: StopReason::MaxEpochs,
            provenance: [("seed".to_string(), "7".to_string())].into(),
        };
        let text = h.to_text();
        let back = TrainingHistory::parse(&text, "t").unwrap();
        assert_eq!(back, h);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let logits = Tensor::<f64>::zeros(&[1, 2]);
        assert!(weighted_cross_entropy(&logits, &[2], &ClassWeights::uniform(2)).is_err());
    }
}
