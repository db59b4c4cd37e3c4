use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xens_core::checkpoint::{load_classifier, load_ensemble, save_classifier, save_ensemble, CheckpointInfo};
use xens_core::nn::{ParamKind, RESNET18_FEATURE_DIM};
use xens_core::training::{weighted_cross_entropy_grad, Batch, BatchValidator, TrainStream};
use xens_core::{
    assemble_ensemble, attach_head, build_extractor, fit, strip_and_freeze, ArchSpec, ClassWeights, ClassifierModel,
    ExtractorInit, FeatureExtractor, Network, Tensor, TinyConfig, TrainConfig, TrainableScope, XensError,
};

const TINY: ArchSpec = ArchSpec::Tiny(TinyConfig { width: 4, feature_dim: 12 });

fn input<F: xens_core::nn::Scalar>(batch: usize, size: usize, seed: u64) -> Tensor<F> {
    Tensor::uniform(&[batch, 3, size, size], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn frozen_member(seed: u64) -> FeatureExtractor<f32> {
    let m = attach_head(build_extractor(TINY, &ExtractorInit::Seed(seed)).unwrap(), 2, seed).unwrap();
    strip_and_freeze(m)
}

fn params<F: xens_core::nn::Scalar>(n: &dyn Network<F>) -> Vec<(String, Vec<F>)> {
    let mut out = Vec::new();
    n.visit_params(&mut |name, p| out.push((name.to_string(), p.value.data().to_vec())));
    out
}

fn extractor_params(e: &FeatureExtractor<f32>) -> Vec<(String, Vec<u32>)> {
    let mut out = Vec::new();
    e.visit("", &mut |name, p| out.push((name.to_string(), p.value.data().iter().map(|v| v.to_bits()).collect())));
    out
}

#[test]
fn resnet18_dimension_algebra() {
    let members: Vec<FeatureExtractor<f32>> =
        (0..3).map(|s| build_extractor(ArchSpec::Resnet18, &ExtractorInit::Seed(s)).unwrap()).collect();
    assert_eq!(RESNET18_FEATURE_DIM, 512);
    for m in &members {
        assert_eq!(m.feature_dim(), 512);
    }
    let f = members[0].features(&input(1, 32, 0)).unwrap();
    assert_eq!(f.shape(), [1, 512]);

    let frozen = |i: usize| {
        let mut m = members[i].clone();
        m.freeze();
        m
    };
    for (picks, dim) in [(vec![0, 1], 1024), (vec![0, 2], 1024), (vec![1, 2], 1024), (vec![0, 1, 2], 1536)] {
        let e = assemble_ensemble(picks.iter().map(|&i| frozen(i)).collect(), 3, 9).unwrap();
        assert_eq!(e.concat_dim(), dim);
        assert_eq!(e.head.weight.value.shape(), [dim, 3]);
        assert_eq!(e.head.bias.value.shape(), [3]);
    }
    let c = attach_head(members[0].clone(), 2, 0).unwrap();
    assert_eq!(c.head.weight.value.shape(), [512, 2]);
}

#[test]
fn ensemble_rejects_unfrozen_or_single_members() {
    let loose = build_extractor::<f32>(TINY, &ExtractorInit::Seed(1)).unwrap();
    assert!(assemble_ensemble(vec![frozen_member(1), loose], 3, 0).is_err());
    assert!(assemble_ensemble(vec![frozen_member(1)], 3, 0).is_err());
}

fn loss_of(model: &mut ClassifierModel<f64>, x: &Tensor<f64>, labels: &[usize], w: &ClassWeights) -> f64 {
    let (logits, _) = model.forward_train(x, TrainableScope::All).unwrap();
    weighted_cross_entropy_grad(&logits, labels, w).unwrap().0
}

/// Central differences on `coords` (parameter name, flat index) of a tiny
/// f64 classifier; returns the worst relative error.
fn gradient_check(arch: ArchSpec, coords_from: impl Fn(&str) -> bool, count: usize, seed: u64) -> (f64, usize) {
    let mut model: ClassifierModel<f64> =
        attach_head(build_extractor(arch, &ExtractorInit::Seed(seed)).unwrap(), 3, seed).unwrap();
    let x = input::<f64>(5, 12, seed + 1);
    let labels = [0, 2, 1, 2, 0];
    let w = ClassWeights { w: vec![0.7, 1.3, 2.1] };

    model.zero_grad();
    let (logits, state) = model.forward_train(&x, TrainableScope::All).unwrap();
    let (_, dlogits, _) = weighted_cross_entropy_grad(&logits, &labels, &w).unwrap();
    model.backward(state, &dlogits);

    let mut coords = Vec::new();
    model.visit_params(&mut |name, p| {
        if p.kind == ParamKind::Weight && coords_from(name) {
            for i in 0..p.value.len() {
                coords.push((name.to_string(), i, p.grad.data()[i]));
            }
        }
    });
    coords.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    coords.truncate(count);

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (name, i, analytic) in &coords {
        let nudge = |model: &mut ClassifierModel<f64>, delta: f64| {
            model.visit_params_mut(&mut |n, p| {
                if n == name {
                    p.value.data_mut()[*i] += delta;
                }
            })
        };
        nudge(&mut model, h);
        let up = loss_of(&mut model, &x, &labels, &w);
        nudge(&mut model, -2.0 * h);
        let down = loss_of(&mut model, &x, &labels, &w);
        nudge(&mut model, h);
        let numeric = (up - down) / (2.0 * h);
        let scale = analytic.abs().max(numeric.abs());
        let err = if scale < 1e-7 { (analytic - numeric).abs() } else { (analytic - numeric).abs() / scale };
        worst = worst.max(err);
    }
    (worst, coords.len())
}

#[test]
fn head_gradients_match_finite_differences() {
    let (worst, n) = gradient_check(ArchSpec::Tiny(TinyConfig { width: 4, feature_dim: 64 }), |name| name.starts_with("head."), 120, 3);
    assert!(n >= 100, "only {n} coordinates");
    assert!(worst <= 1e-4, "worst relative error {worst}");
}

#[test]
fn backbone_gradients_match_finite_differences() {
    let (worst, n) = gradient_check(TINY, |name| !name.starts_with("head."), 100, 4);
    assert!(n >= 100);
    assert!(worst <= 1e-4, "worst relative error {worst}");
}

struct Fixed(Vec<Batch<f32>>);

impl TrainStream<f32> for Fixed {
    fn run_epoch(
        &mut self,
        _epoch: usize,
        consume: &mut dyn FnMut(usize, Batch<f32>) -> xens_core::Result<()>,
    ) -> xens_core::Result<()> {
        for (i, b) in self.0.iter().enumerate() {
            consume(i, Batch { x: b.x.clone(), labels: b.labels.clone() })?;
        }
        Ok(())
    }
}

#[test]
fn head_only_training_leaves_members_bit_identical() {
    let members = vec![frozen_member(1), frozen_member(2), frozen_member(3)];
    let before: Vec<_> = members.iter().map(extractor_params).collect();
    let mut ensemble = assemble_ensemble(members, 3, 4).unwrap();
    let head_before = ensemble.head.weight.value.clone();
    let batches = |seed: u64| {
        (0..3)
            .map(|i| Batch {
                x: input(6, 12, seed + i),
                labels: vec![0, 1, 2, 0, 1, 2],
            })
            .collect::<Vec<_>>()
    };
    let mut stream = Fixed(batches(10));
    let w = ClassWeights::uniform(3);
    let mut validator = BatchValidator { batches: batches(20), weights: w.clone() };
    for scope in [TrainableScope::HeadOnly, TrainableScope::All] {
        let cfg = TrainConfig {
            max_epochs: 4,
            patience: 10,
            trainable_scope: scope,
            learning_rate: Some(0.05),
            ..TrainConfig::default()
        };
        fit(&mut ensemble, &mut stream, &mut validator, &w, &cfg).unwrap();
        let after: Vec<_> = ensemble.members.iter().map(extractor_params).collect();
        assert_eq!(after, before, "scope {scope:?}");
    }
    assert_ne!(ensemble.head.weight.value, head_before);
}

#[test]
fn classifier_checkpoint_round_trip_and_corruption() {
    let tmp = tempfile::tempdir().unwrap();
    let model: ClassifierModel<f32> = attach_head(build_extractor(TINY, &ExtractorInit::Seed(8)).unwrap(), 2, 1).unwrap();
    let info = CheckpointInfo {
        class_names: vec!["normal".into(), "diseased".into()],
        member_names: vec!["a".into()],
        provenance: [("fold".to_string(), "3".to_string())].into_iter().collect(),
        ..Default::default()
    };
    let path = tmp.path().join("m.ckpt");
    let digest = save_classifier(&model, &info, &path).unwrap();
    assert_eq!(digest.len(), 64);

    let (loaded, meta) = load_classifier::<f32>(&path, Some(2)).unwrap();
    assert_eq!(params(&loaded), params(&model));
    assert_eq!(meta.class_names, info.class_names);
    assert_eq!(meta.provenance["fold"], "3");
    let x = input(2, 12, 5);
    assert_eq!(loaded.logits(&x).unwrap(), model.logits(&x).unwrap());

    assert!(matches!(load_classifier::<f32>(&path, Some(3)), Err(XensError::Metadata(_) | XensError::Shape(_))));
    assert!(load_ensemble::<f32>(&path, None).is_err());

    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    let bad = tmp.path().join("bad.ckpt");
    std::fs::write(&bad, &bytes).unwrap();
    assert!(matches!(load_classifier::<f32>(&bad, None), Err(XensError::Integrity(_))));
    std::fs::write(&bad, &bytes[..20]).unwrap();
    assert!(matches!(load_classifier::<f32>(&bad, None), Err(XensError::Integrity(_))));
}

#[test]
fn ensemble_checkpoint_round_trip_is_byte_stable() {
    let tmp = tempfile::tempdir().unwrap();
    let e = assemble_ensemble(vec![frozen_member(1), frozen_member(2)], 3, 5).unwrap();
    let info = CheckpointInfo {
        class_names: vec!["normal".into(), "pneumonia".into(), "covid19".into()],
        member_names: vec!["a".into(), "b".into()],
        member_digests: vec![Some("d1".into()), None],
        ..Default::default()
    };
    let p1 = tmp.path().join("1.ckpt");
    let p2 = tmp.path().join("2.ckpt");
    save_ensemble(&e, &info, &p1).unwrap();
    let (loaded, meta) = load_ensemble::<f32>(&p1, Some(3)).unwrap();
    assert!(loaded.members.iter().all(|m| m.is_frozen()));
    assert_eq!(meta.members[0].source_digest.as_deref(), Some("d1"));
    save_ensemble(&loaded, &info, &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}
