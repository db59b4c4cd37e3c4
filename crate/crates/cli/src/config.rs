//! Run configuration file: every key has a default and unknown keys are
//! rejected. Relative paths resolve against the config file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use xens_core::model::ArchSpec;
use xens_core::{AugmentationConfig, PipelineConfig, TrainConfig};

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Duplicates removed, no artifact exclusions.
    Raw,
    /// Raw plus the curated exclusion list.
    Refined,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Raw => "raw",
            Variant::Refined => "refined",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Train share of the holdout split.
    pub ratio: f64,
    pub folds: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { ratio: 0.9, folds: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub variant: Variant,
    /// Run directory holding every artifact.
    pub out: PathBuf,
    /// Ingestion sources, each `<dir>:<label>:<source_id>`.
    pub sources: Vec<String>,
    /// Exclusion list applied for the refined variant.
    pub exclusions: Option<PathBuf>,
    /// Cross-validation rounds to run; all when empty.
    pub run_folds: Vec<usize>,
    pub split: SplitConfig,
    pub arch: ArchSpec,
    pub pretrained: Option<PathBuf>,
    pub augmentation: AugmentationConfig,
    pub sub_models: TrainConfig,
    pub baseline: TrainConfig,
    pub ensembles: TrainConfig,
    pub ensemble_feature_cache: bool,
    pub eval_batch_size: usize,
    pub parallel_sub_models: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = PipelineConfig::default();
        RunConfig {
            seed: 0,
            variant: Variant::Raw,
            out: PathBuf::from("run"),
            sources: Vec::new(),
            exclusions: None,
            run_folds: Vec::new(),
            split: SplitConfig::default(),
            arch: p.arch,
            pretrained: p.pretrained,
            augmentation: p.augmentation,
            sub_models: p.sub_models,
            baseline: p.baseline,
            ensembles: p.ensembles,
            ensemble_feature_cache: p.ensemble_feature_cache,
            eval_batch_size: p.eval_batch_size,
            parallel_sub_models: p.parallel_sub_models,
        }
    }
}

/// Command-line overrides of config keys.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub variant: Option<Variant>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn resolve_source(base: &Path, spec: &str) -> String {
    match spec.split_once(':') {
        Some((dir, rest)) if !Path::new(dir).is_absolute() => format!("{}:{rest}", base.join(dir).display()),
        _ => spec.to_string(),
    }
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("{origin}: {}", e.to_string().trim())))
    }

    /// Reads `path`, resolves relative paths against its directory, and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> CliResult<Self> {
        let mut cfg = match path {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| xens_core::XensError::io(path, e))?;
                let mut cfg = Self::parse(&text, &path.display().to_string())?;
                let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
                cfg.resolve_paths(&base);
                cfg
            }
            None => RunConfig::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        self.out = resolve(base, &self.out);
        self.sources = self.sources.iter().map(|s| resolve_source(base, s)).collect();
        self.exclusions = self.exclusions.as_deref().map(|p| resolve(base, p));
        self.pretrained = self.pretrained.as_deref().map(|p| resolve(base, p));
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(v) = o.variant {
            self.variant = v;
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.pipeline().validate()?;
        if !(self.split.ratio > 0.0 && self.split.ratio < 1.0) {
            return Err(CliError::Config(format!("split.ratio {} must lie in (0, 1)", self.split.ratio)));
        }
        if self.split.folds < 2 {
            return Err(CliError::Config(format!("split.folds {} must be at least 2", self.split.folds)));
        }
        if let Some(&f) = self.run_folds.iter().find(|&&f| f >= self.split.folds) {
            return Err(CliError::Config(format!("run_folds entry {f} outside 0..{}", self.split.folds)));
        }
        Ok(())
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            arch: self.arch,
            pretrained: self.pretrained.clone(),
            augmentation: self.augmentation.clone(),
            sub_models: self.sub_models.clone(),
            baseline: self.baseline.clone(),
            ensembles: self.ensembles.clone(),
            ensemble_feature_cache: self.ensemble_feature_cache,
            eval_batch_size: self.eval_batch_size,
            parallel_sub_models: self.parallel_sub_models,
        }
    }

    pub fn folds_to_run(&self) -> Vec<usize> {
        if self.run_folds.is_empty() {
            (0..self.split.folds).collect()
        } else {
            self.run_folds.clone()
        }
    }

    /// SHA-256 of every result-affecting setting. The run directory is left
    /// out so the same experiment reproduces byte-identically elsewhere.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn layout(&self) -> RunPaths {
        RunPaths { root: self.out.clone() }
    }
}

/// Fixed artifact locations inside a run directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn collection(&self) -> PathBuf {
        self.root.join("collection.tsv")
    }

    pub fn manifest(&self, scheme: xens_core::Scheme) -> PathBuf {
        self.root.join("manifests").join(format!("dataset_{scheme}.tsv"))
    }

    pub fn split(&self) -> PathBuf {
        self.root.join("plans").join("split.tsv")
    }

    pub fn folds(&self) -> PathBuf {
        self.root.join("plans").join("folds.tsv")
    }

    pub fn test_manifest(&self) -> PathBuf {
        self.root.join("manifests").join("test.tsv")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("seed = 1\nbogus = 2\n", "t").is_err());
        assert!(RunConfig::parse("[sub_models]\nmax_epoch = 2\n", "t").is_err());
    }

    #[test]
    fn tiny_arch_and_overrides() {
        let cfg = RunConfig::parse(
            "seed = 3\n[arch]\narch_id = \"tiny\"\nwidth = 8\nfeature_dim = 32\n[ensembles]\ntrainable_scope = \"head-only\"\n",
            "t",
        )
        .unwrap();
        assert_eq!(cfg.pipeline().arch.name(), "tiny");
        let mut c2 = cfg.clone();
        c2.out = PathBuf::from("/elsewhere");
        assert_eq!(cfg.digest(), c2.digest());
        c2.apply(&Overrides {
            seed: Some(4),
            ..Default::default()
        });
        assert_ne!(cfg.digest(), c2.digest());
    }
}
