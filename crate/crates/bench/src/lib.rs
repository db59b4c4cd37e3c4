//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xens_core::{attach_head, build_extractor, ArchSpec, ClassifierModel, ExtractorInit, Tensor, TinyConfig};

pub fn input(batch: usize, size: usize, seed: u64) -> Tensor<f32> {
    Tensor::uniform(&[batch, 3, size, size], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// The desk-scale classifier (`configs/desk.toml`).
pub fn desk_classifier(classes: usize) -> ClassifierModel<f32> {
    let arch = ArchSpec::Tiny(TinyConfig { width: 8, feature_dim: 32 });
    attach_head(build_extractor(arch, &ExtractorInit::Seed(1)).expect("tiny builds"), classes, 1).expect("head attaches")
}

/// `n` labels and predictions with roughly `skill` agreement.
pub fn predictions(n: usize, k: usize, skill: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    let pred = truth
        .iter()
        .map(|&y| if rng.gen::<f64>() < skill { y } else { rng.gen_range(0..k) })
        .collect();
    (pred, truth)
}
