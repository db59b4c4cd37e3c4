//! Holdout split, stratified folds, class-balancing oversampling, training
//! augmentation, and the ordered batch loader.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Condvar, Mutex};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curation::DatasetManifest;
use crate::error::{Result, XensError};
use crate::imaging::{self, Plane};
use crate::tsv::Table;

/// splitmix64 finalizer over a sequence of words; used to derive independent
/// per-purpose seeds from one run seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

pub fn rng_from(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

/// Per-class test count: round-half-up of `(1 - ratio) * n`, at least 1 and
/// at most `n - 1`.
pub fn test_count(n: usize, ratio: f64) -> usize {
    // the epsilon absorbs representation error such as 4245 * 0.1 = 424.4999...
    let raw = ((1.0 - ratio) * n as f64 + 0.5 + 1e-9).floor() as usize;
    raw.max(1).min(n.saturating_sub(1))
}

fn group_by_class(ids: &[(String, usize)]) -> BTreeMap<usize, Vec<String>> {
    let mut by_class: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (id, label) in ids {
        by_class.entry(*label).or_default().push(id.clone());
    }
    for members in by_class.values_mut() {
        members.sort();
    }
    by_class
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitPlan {
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    /// Train share.
    pub ratio: f64,
    pub seed: u64,
}

pub fn holdout_split(manifest: &DatasetManifest, ratio: f64, seed: u64) -> Result<SplitPlan> {
    let ids: Vec<(String, usize)> = manifest.entries.iter().map(|e| (e.id.clone(), e.label)).collect();
    holdout_split_ids(&ids, ratio, seed)
}

/// Stratified holdout over `(id, class)` pairs.
pub fn holdout_split_ids(ids: &[(String, usize)], ratio: f64, seed: u64) -> Result<SplitPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(XensError::InvalidArgument(format!("split ratio {ratio} must lie in (0, 1)")));
    }
    let mut train_ids = Vec::new();
    let mut test_ids = Vec::new();
    for (class, mut members) in group_by_class(ids) {
        if members.len() < 2 {
            return Err(XensError::EmptyClass(format!(
                "class {class} has {} member(s); a holdout split needs at least 2",
                members.len()
            )));
        }
        let n_test = test_count(members.len(), ratio);
        members.shuffle(&mut rng_from(&[seed, 0x5350_4c49, class as u64]));
        test_ids.extend(members.drain(..n_test));
        train_ids.extend(members);
    }
    train_ids.sort();
    test_ids.sort();
    Ok(SplitPlan {
        train_ids,
        test_ids,
        ratio,
        seed,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldPlan {
    pub k: usize,
    /// Each fold sorted by id.
    pub folds: Vec<Vec<String>>,
    pub seed: u64,
}

/// Stratified k-fold partition. Within each class the ids are shuffled and
/// dealt in contiguous runs; the remainder goes to the lowest-index folds.
pub fn make_folds(ids: &[(String, usize)], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(XensError::InvalidArgument(format!("fold count {k} must be at least 2")));
    }
    let mut folds = vec![Vec::new(); k];
    for (class, mut members) in group_by_class(ids) {
        let n = members.len();
        if n < k {
            return Err(XensError::EmptyClass(format!(
                "class {class} has {n} member(s), fewer than the {k} folds"
            )));
        }
        members.shuffle(&mut rng_from(&[seed, 0x464f_4c44, class as u64]));
        let (base, extra) = (n / k, n % k);
        let mut it = members.into_iter();
        for (f, fold) in folds.iter_mut().enumerate() {
            let size = base + usize::from(f < extra);
            fold.extend(it.by_ref().take(size));
        }
    }
    for fold in &mut folds {
        fold.sort();
    }
    Ok(FoldPlan { k, folds, seed })
}

impl FoldPlan {
    /// `(training ids, validation ids)` for cross-validation round `i`.
    pub fn round(&self, i: usize) -> Result<(Vec<String>, Vec<String>)> {
        if i >= self.k {
            return Err(XensError::InvalidArgument(format!("fold {i} out of range 0..{}", self.k)));
        }
        let mut train: Vec<String> = self
            .folds
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect();
        train.sort();
        Ok((train, self.folds[i].clone()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub resize_to: usize,
    pub crop_size: usize,
    /// Degrees; angles are drawn uniformly from `[-range, +range]`.
    pub rotation_range: f64,
    pub hflip_prob: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            resize_to: 256,
            crop_size: 224,
            rotation_range: 10.0,
            hflip_prob: 0.5,
        }
    }
}

impl AugmentationConfig {
    /// Resize to the crop size and nothing else.
    pub fn identity(size: usize) -> Self {
        AugmentationConfig {
            resize_to: size,
            crop_size: size,
            rotation_range: 0.0,
            hflip_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 || self.crop_size > self.resize_to {
            return Err(XensError::InvalidArgument(format!(
                "crop_size {} must be in 1..={}",
                self.crop_size, self.resize_to
            )));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(XensError::InvalidArgument(format!("hflip_prob {} outside [0, 1]", self.hflip_prob)));
        }
        if !(self.rotation_range >= 0.0 && self.rotation_range.is_finite()) {
            return Err(XensError::InvalidArgument(format!(
                "rotation_range {} must be a finite non-negative angle",
                self.rotation_range
            )));
        }
        Ok(())
    }
}

/// Training view: resize, random rotation, random crop, random horizontal flip.
pub fn augment<R: Rng>(image: &Plane, config: &AugmentationConfig, rng: &mut R) -> Plane {
    augment_resized(&imaging::resize(image, config.resize_to), config, rng)
}

/// [`augment`] for an image already at `resize_to`.
pub fn augment_resized<R: Rng>(resized: &Plane, config: &AugmentationConfig, rng: &mut R) -> Plane {
    let angle = if config.rotation_range > 0.0 {
        rng.gen_range(-config.rotation_range..=config.rotation_range)
    } else {
        0.0
    };
    let span = config.resize_to - config.crop_size;
    let x = rng.gen_range(0..=span);
    let y = rng.gen_range(0..=span);
    let flip = rng.gen::<f64>() < config.hflip_prob;
    let rotated = imaging::rotate(resized, angle);
    let cropped = imaging::crop(&rotated, x, y, config.crop_size).expect("crop fits by construction");
    if flip {
        imaging::hflip(&cropped)
    } else {
        cropped
    }
}

/// Validation/test view: resize then center crop.
pub fn eval_view(image: &Plane, config: &AugmentationConfig) -> Plane {
    eval_view_resized(&imaging::resize(image, config.resize_to), config)
}

pub fn eval_view_resized(resized: &Plane, config: &AugmentationConfig) -> Plane {
    imaging::center_crop(resized, config.crop_size).expect("crop fits by construction")
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingPlan {
    /// Unnormalized draw weight per image, aligned with the label list.
    pub weights: Vec<f64>,
    pub epoch_length: usize,
}

/// Inverse-class-frequency weights: image of class `c` gets `1 / N_c`.
pub fn oversample_weights(labels: &[usize], num_classes: usize) -> Result<SamplingPlan> {
    let mut counts = vec![0usize; num_classes];
    for &l in labels {
        if l >= num_classes {
            return Err(XensError::InvalidArgument(format!("label {l} outside 0..{num_classes}")));
        }
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(XensError::EmptyClass(format!("class {c} has no training images (counts {counts:?})")));
    }
    Ok(SamplingPlan {
        weights: labels.iter().map(|&l| 1.0 / counts[l] as f64).collect(),
        epoch_length: labels.len(),
    })
}

/// Equal weights; used when oversampling is disabled.
pub fn uniform_plan(n: usize) -> SamplingPlan {
    SamplingPlan {
        weights: vec![1.0; n],
        epoch_length: n,
    }
}

/// `epoch_length` draws with replacement under the plan weights, cut into
/// batches in draw order. Entries are indices into the plan's image list.
pub fn epoch_batches(plan: &SamplingPlan, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(XensError::InvalidArgument("batch_size must be at least 1".into()));
    }
    let dist = WeightedIndex::new(&plan.weights)
        .map_err(|e| XensError::InvalidArgument(format!("sampling weights: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<usize> = (0..plan.epoch_length).map(|_| dist.sample(&mut rng)).collect();
    Ok(draws.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// Prepares batches `0..n_batches` with `realize` on `producers` worker
/// threads and hands them to `consume` strictly in index order. With zero or
/// one producer everything runs inline on the calling thread.
///
/// Producers run at most `2 * producers` batches ahead of the consumer.
pub fn run_batches<T, R, C>(n_batches: usize, producers: usize, realize: R, mut consume: C) -> Result<()>
where
    T: Send,
    R: Fn(usize) -> Result<T> + Sync,
    C: FnMut(usize, T) -> Result<()>,
{
    if producers <= 1 {
        for i in 0..n_batches {
            consume(i, realize(i)?)?;
        }
        return Ok(());
    }
    let window = 2 * producers;
    let next_index = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let consumed = (Mutex::new(0usize), Condvar::new());
    let (tx, rx) = mpsc::sync_channel::<(usize, Result<T>)>(window);

    std::thread::scope(|scope| {
        for _ in 0..producers {
            let tx = tx.clone();
            let (next_index, stop, consumed, realize) = (&next_index, &stop, &consumed, &realize);
            scope.spawn(move || loop {
                let i = next_index.fetch_add(1, Ordering::SeqCst);
                if i >= n_batches || stop.load(Ordering::SeqCst) {
                    break;
                }
                {
                    let (lock, cv) = consumed;
                    let mut done = lock.lock().expect("loader lock");
                    while i >= *done + window && !stop.load(Ordering::SeqCst) {
                        done = cv.wait(done).expect("loader lock");
                    }
                }
                if stop.load(Ordering::SeqCst) || tx.send((i, realize(i))).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut pending: BTreeMap<usize, Result<T>> = BTreeMap::new();
        let mut outcome = Ok(());
        let mut next = 0;
        while next < n_batches {
            let item = match pending.remove(&next) {
                Some(item) => item,
                None => match rx.recv() {
                    Ok((i, item)) => {
                        pending.insert(i, item);
                        continue;
                    }
                    Err(_) => break,
                },
            };
            let step = item.and_then(|batch| consume(next, batch));
            next += 1;
            {
                let (lock, cv) = &consumed;
                *lock.lock().expect("loader lock") = next;
                cv.notify_all();
            }
            if let Err(e) = step {
                outcome = Err(e);
                break;
            }
        }
        {
            let _guard = consumed.0.lock().expect("loader lock");
            stop.store(true, Ordering::SeqCst);
        }
        consumed.1.notify_all();
        drop(rx);
        outcome
    })
}

const SPLIT_COLUMNS: [&str; 2] = ["id", "set"];
const FOLD_COLUMNS: [&str; 2] = ["id", "fold"];

impl SplitPlan {
    pub fn to_table(&self) -> Table {
        let mut t = Table::new(&SPLIT_COLUMNS);
        t.push_meta("format", "xens-split-v1");
        t.push_meta("seed", self.seed);
        t.push_meta("ratio", self.ratio);
        let mut rows: Vec<(String, &str)> = self
            .train_ids
            .iter()
            .map(|id| (id.clone(), "train"))
            .chain(self.test_ids.iter().map(|id| (id.clone(), "test")))
            .collect();
        rows.sort();
        t.rows = rows.into_iter().map(|(id, s)| vec![id, s.to_string()]).collect();
        t
    }

    pub fn from_table(t: &Table, ctx: &str) -> Result<Self> {
        let seed = parse_meta(t, "seed", ctx)?;
        let ratio = parse_meta(t, "ratio", ctx)?;
        let (ci, cs) = (t.require_column("id", ctx)?, t.require_column("set", ctx)?);
        let mut plan = SplitPlan {
            train_ids: Vec::new(),
            test_ids: Vec::new(),
            ratio,
            seed,
        };
        for row in &t.rows {
            match row[cs].as_str() {
                "train" => plan.train_ids.push(row[ci].clone()),
                "test" => plan.test_ids.push(row[ci].clone()),
                other => return Err(XensError::parse(ctx, format!("unknown set {other:?}"))),
            }
        }
        plan.train_ids.sort();
        plan.test_ids.sort();
        Ok(plan)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_table().write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_table(&Table::read(path)?, &path.display().to_string())
    }

    /// Checks that the plan partitions exactly the manifest's ids.
    pub fn check_against(&self, manifest: &DatasetManifest) -> Result<()> {
        let plan: BTreeSet<&str> = self.train_ids.iter().chain(&self.test_ids).map(String::as_str).collect();
        let have: BTreeSet<&str> = manifest.entries.iter().map(|e| e.id.as_str()).collect();
        if plan.len() != self.train_ids.len() + self.test_ids.len() || plan != have {
            return Err(XensError::InvalidArgument(format!(
                "split plan does not partition the {} manifest ids",
                have.len()
            )));
        }
        Ok(())
    }
}

impl FoldPlan {
    pub fn to_table(&self) -> Table {
        let mut t = Table::new(&FOLD_COLUMNS);
        t.push_meta("format", "xens-folds-v1");
        t.push_meta("seed", self.seed);
        t.push_meta("k", self.k);
        let mut rows: Vec<(String, usize)> = self
            .folds
            .iter()
            .enumerate()
            .flat_map(|(f, ids)| ids.iter().map(move |id| (id.clone(), f)))
            .collect();
        rows.sort();
        t.rows = rows.into_iter().map(|(id, f)| vec![id, f.to_string()]).collect();
        t
    }

    pub fn from_table(t: &Table, ctx: &str) -> Result<Self> {
        let seed = parse_meta(t, "seed", ctx)?;
        let k: usize = parse_meta(t, "k", ctx)?;
        let (ci, cf) = (t.require_column("id", ctx)?, t.require_column("fold", ctx)?);
        let mut folds = vec![Vec::new(); k];
        for row in &t.rows {
            let f: usize = row[cf]
                .parse()
                .ok()
                .filter(|&f| f < k)
                .ok_or_else(|| XensError::parse(ctx, format!("bad fold index {:?}", row[cf])))?;
            folds[f].push(row[ci].clone());
        }
        for fold in &mut folds {
            fold.sort();
        }
        Ok(FoldPlan { k, folds, seed })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_table().write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_table(&Table::read(path)?, &path.display().to_string())
    }
}

fn parse_meta<T: std::str::FromStr>(t: &Table, key: &str, ctx: &str) -> Result<T> {
    t.require_meta(key, ctx)?
        .parse()
        .map_err(|_| XensError::parse(ctx, format!("invalid {key} value")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_class(n: usize) -> Vec<(String, usize)> {
        (0..n).map(|i| (format!("s/{i:03}"), 0)).collect()
    }

    #[test]
    fn full_scale_counts_give_601_test_images() {
        let counts = [1579, 4245, 184].map(|n| test_count(n, 0.9));
        assert_eq!(counts, [158, 425, 18]);
    }

    #[test]
    fn eleven_ids_in_five_folds() {
        let plan = make_folds(&one_class(11), 5, 3).unwrap();
        let sizes: Vec<usize> = plan.folds.iter().map(Vec::len).collect();
        assert_eq!(sizes, [3, 2, 2, 2, 2]);
    }

    #[test]
    fn batch_partition_sizes() {
        let batches = epoch_batches(&uniform_plan(10), 4, 1).unwrap();
        let sizes: Vec<usize> = batches.iter().map(Vec::len).collect();
        assert_eq!(sizes, [4, 4, 2]);
    }

    #[test]
    fn loader_order_is_sequential_for_any_producer_count() {
        for producers in [0, 1, 2, 4] {
            let mut seen = Vec::new();
            run_batches(37, producers, |i| Ok(i * 3), |i, v| {
                seen.push((i, v));
                Ok(())
            })
            .unwrap();
            assert_eq!(seen, (0..37).map(|i| (i, i * 3)).collect::<Vec<_>>());
        }
    }

    #[test]
    fn loader_propagates_errors_and_stops() {
        let err = run_batches(
            100,
            3,
            |i| if i == 5 { Err(XensError::Missing("x".into())) } else { Ok(i) },
            |_, _| Ok(()),
        );
        assert!(err.is_err());
    }
}
