use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xens_core::model::TrainState;
use xens_core::nn::{ParamVisitor, ParamVisitorMut};
use xens_core::training::{
    weighted_cross_entropy_grad, Batch, EarlyStopping, StopReason, TrainStream, Validator,
};
use xens_core::{
    attach_head, build_extractor, class_weights, fit, weighted_cross_entropy, ArchSpec, ClassWeights, ClassifierModel,
    ExtractorInit, Network, Tensor, TinyConfig, TrainConfig, TrainableScope, TrainingHistory, XensError,
};

/// Delegates to a tiny classifier but, after each backward pass, zeroes the
/// gradients (so Adam leaves the weights alone) and writes the number of
/// completed epochs into the first head bias. The restored model therefore
/// names the epoch its weights came from.
struct Stamped {
    inner: ClassifierModel<f64>,
    epoch: usize,
}

impl Stamped {
    fn new() -> Self {
        let arch = ArchSpec::Tiny(TinyConfig { width: 2, feature_dim: 4 });
        Stamped {
            inner: attach_head(build_extractor(arch, &ExtractorInit::Seed(1)).unwrap(), 2, 1).unwrap(),
            epoch: 0,
        }
    }

    fn stamp(&self) -> f64 {
        self.inner.head.bias.value.data()[0]
    }
}

impl Network<f64> for Stamped {
    fn num_classes(&self) -> usize {
        2
    }
    fn logits(&self, x: &Tensor<f64>) -> xens_core::Result<Tensor<f64>> {
        self.inner.logits(x)
    }
    fn forward_train(&mut self, x: &Tensor<f64>, scope: TrainableScope) -> xens_core::Result<(Tensor<f64>, TrainState<f64>)> {
        self.inner.forward_train(x, scope)
    }
    fn backward(&mut self, state: TrainState<f64>, dlogits: &Tensor<f64>) {
        self.inner.backward(state, dlogits);
        self.inner.zero_grad();
        self.epoch += 1;
        self.inner.head.bias.value.data_mut()[0] = self.epoch as f64;
    }
    fn visit_params(&self, f: &mut ParamVisitor<'_, f64>) {
        self.inner.visit_params(f)
    }
    fn visit_params_mut(&mut self, f: &mut ParamVisitorMut<'_, f64>) {
        self.inner.visit_params_mut(f)
    }
    fn is_trainable(&self, name: &str, scope: TrainableScope) -> bool {
        self.inner.is_trainable(name, scope)
    }
}

struct OneBatch;

impl TrainStream<f64> for OneBatch {
    fn run_epoch(
        &mut self,
        _epoch: usize,
        consume: &mut dyn FnMut(usize, Batch<f64>) -> xens_core::Result<()>,
    ) -> xens_core::Result<()> {
        let x = Tensor::uniform(&[2, 3, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        consume(0, Batch { x, labels: vec![0, 1] })
    }
}

struct Scripted(Vec<f64>);

impl Validator<f64> for Scripted {
    fn validation_loss(&mut self, model: &dyn Network<f64>, epoch: usize) -> xens_core::Result<f64> {
        let mut bias = 0.0;
        model.visit_params(&mut |name, p| {
            if name == "head.bias" {
                bias = p.value.data()[0];
            }
        });
        assert_eq!(bias, epoch as f64, "validator sees the weights of epoch {epoch}");
        Ok(self.0[epoch - 1])
    }
}

fn run(script: &[f64], patience: usize, max_epochs: usize, spill: usize) -> (TrainingHistory, f64) {
    let mut model = Stamped::new();
    let cfg = TrainConfig {
        max_epochs,
        patience,
        snapshot_spill_bytes: spill,
        oversample: false,
        ..TrainConfig::default()
    };
    let h = fit(&mut model, &mut OneBatch, &mut Scripted(script.to_vec()), &ClassWeights::uniform(2), &cfg).unwrap();
    let stamp = model.stamp();
    (h, stamp)
}

#[test]
fn scripted_validation_sequences() {
    // (losses, patience, max_epochs) -> (best, stopped, reason)
    let cases: &[(&[f64], usize, usize, usize, usize, StopReason)] = &[
        (&[5.0, 4.0, 3.0, 3.0, 3.0, 3.0], 2, 10, 3, 5, StopReason::Patience),
        (&[1.0, 2.0, 3.0, 4.0, 5.0], 3, 10, 1, 4, StopReason::Patience),
        (&[6.0, 5.0, 4.0, 3.0, 2.0, 1.0], 2, 6, 6, 6, StopReason::MaxEpochs),
        (&[2.0, 1.0, 1.5, 0.5, 0.7, 0.9, 0.8], 3, 20, 4, 7, StopReason::Patience),
        (&[1.0, 1.0, 1.0, 1.0], 1, 20, 1, 2, StopReason::Patience),
        (&[3.0, 2.0, 1.0, 1.0, 0.9], 2, 5, 5, 5, StopReason::MaxEpochs),
        (&[3.0, 2.0, 2.5, 2.5], 2, 4, 2, 4, StopReason::Patience),
    ];
    for &(script, patience, max, best, stopped, reason) in cases {
        for spill in [usize::MAX, 0] {
            let (h, stamp) = run(script, patience, max, spill);
            assert_eq!((h.best_epoch, h.stopped_epoch, h.stop_reason), (best, stopped, reason), "{script:?}");
            assert_eq!(stamp, best as f64, "restored weights for {script:?} (spill {spill})");
            assert_eq!(h.epochs.len(), stopped);
            let vals: Vec<f64> = h.epochs.iter().map(|e| e.val_loss).collect();
            assert_eq!(vals, script[..stopped]);
        }
    }
}

/// Direct transcription of the stopping rule over a whole sequence.
fn reference(losses: &[f64], patience: usize, max_epochs: usize) -> (usize, usize, StopReason) {
    let mut best = 1;
    for e in 1..=max_epochs {
        if losses[e - 1] < losses[best - 1] {
            best = e;
        }
        if e - best >= patience {
            return (best, e, StopReason::Patience);
        }
        if e == max_epochs {
            return (best, e, StopReason::MaxEpochs);
        }
    }
    unreachable!()
}

proptest! {
    #[test]
    fn stopper_matches_reference(
        losses in prop::collection::vec(0u8..6, 1..40),
        patience in 1usize..8,
    ) {
        let losses: Vec<f64> = losses.into_iter().map(f64::from).collect();
        let max_epochs = losses.len();
        let (best, stop, reason) = reference(&losses, patience, max_epochs);
        let mut s = EarlyStopping::new(patience, max_epochs);
        for (i, &l) in losses.iter().enumerate() {
            let obs = s.observe(i + 1, l);
            if i + 1 < stop {
                prop_assert!(obs.stop.is_none());
            } else {
                prop_assert_eq!(obs.stop, Some(reason));
                break;
            }
        }
        prop_assert_eq!(s.best_epoch(), best);
    }

    #[test]
    fn class_weights_equalize_total_mass(counts in prop::collection::vec(1usize..10_000, 2..5)) {
        let w = class_weights(&counts).unwrap();
        let total: usize = counts.iter().sum();
        let k = counts.len() as f64;
        for (c, &n) in counts.iter().enumerate() {
            prop_assert!((w.w[c] * n as f64 - total as f64 / k).abs() <= 1e-9 * total as f64);
        }
    }

    #[test]
    fn weighted_ce_matches_direct_sum(
        rows in prop::collection::vec((prop::array::uniform3(-20.0f64..20.0), 0usize..3), 1..20),
        w in prop::array::uniform3(0.1f64..5.0),
    ) {
        let labels: Vec<usize> = rows.iter().map(|r| r.1).collect();
        let logits = Tensor::from_vec(&[rows.len(), 3], rows.iter().flat_map(|r| r.0).collect()).unwrap();
        let weights = ClassWeights { w: w.to_vec() };
        let (mut num, mut den) = (0.0, 0.0);
        for (z, y) in &rows {
            let p = z[*y].exp() / z.iter().map(|v| v.exp()).sum::<f64>();
            num -= w[*y] * p.ln();
            den += w[*y];
        }
        let loss = weighted_cross_entropy(&logits, &labels, &weights).unwrap();
        prop_assert!((loss - num / den).abs() <= 1e-9 * (1.0 + loss.abs()));
        let (l2, grad, wsum) = weighted_cross_entropy_grad(&logits, &labels, &weights).unwrap();
        prop_assert_eq!(l2, loss);
        prop_assert!((wsum - den).abs() < 1e-12);
        for i in 0..rows.len() {
            prop_assert!(grad.row(i).iter().sum::<f64>().abs() < 1e-9);
        }
    }
}

#[test]
fn class_weights_reject_empty_class() {
    assert!(matches!(class_weights(&[3, 0, 2]), Err(XensError::EmptyClass(_))));
}

#[test]
fn extreme_logits_stay_finite() {
    let logits = Tensor::from_vec(&[2, 2], vec![1e4f64, -1e4, -1e4, 1e4]).unwrap();
    let loss = weighted_cross_entropy(&logits, &[1, 0], &ClassWeights::uniform(2)).unwrap();
    assert!(loss.is_finite() && (loss - 2e4).abs() < 1e-6);
}

#[test]
fn invalid_train_config_is_rejected() {
    let mut model = Stamped::new();
    for cfg in [
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { max_epochs: 0, ..TrainConfig::default() },
        TrainConfig { learning_rate: Some(-1.0), ..TrainConfig::default() },
    ] {
        let r = fit(&mut model, &mut OneBatch, &mut Scripted(vec![1.0]), &ClassWeights::uniform(2), &cfg);
        assert!(r.is_err(), "{cfg:?}");
    }
}
