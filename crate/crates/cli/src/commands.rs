//! One function per subcommand. Each writes only beneath its output path.

use std::collections::BTreeMap;
use std::path::Path;

use xens_core::checkpoint::load_model;
use xens_core::curation::{
    apply_exclusions, compose_dataset, deduplicate, ingest_sources, Collection, CurationReport, DatasetManifest,
    ExclusionList, Scheme, SourceSpec,
};
use xens_core::evaluation::{aggregate_folds, mean_ppv, pooled_t_test, EvalReport, TTestResult};
use xens_core::imaging::ImageStore;
use xens_core::pipeline::{self, DataContext, Item, RunLayout, MAIN_MODELS};
use xens_core::sampling::{holdout_split, make_folds, FoldPlan, SplitPlan};
use xens_core::tsv::Table;
use xens_core::XensError;

use crate::config::{RunConfig, RunPaths, Variant};
use crate::error::{CliError, CliResult};
use crate::report::{render_report, ModelSummary, RenderedReport};
use crate::synth::{self, SyntheticCorpusSpec, TruthEntry};
use xens_core::TrainingHistory;

/// Metadata stamped into every artifact a configured command writes.
pub fn stamp(cfg: &RunConfig) -> Vec<(String, String)> {
    vec![
        ("config_digest".into(), cfg.digest()),
        ("seed".into(), cfg.seed.to_string()),
        ("variant".into(), cfg.variant.as_str().into()),
    ]
}

fn write_stamped(mut t: Table, stamp: &[(String, String)], path: &Path) -> CliResult<()> {
    for (k, v) in stamp {
        t.push_meta(k, v);
    }
    ensure_parent(path)?;
    Ok(t.write(path)?)
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| XensError::io(dir, e))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    ensure_parent(path)?;
    std::fs::write(path, text).map_err(|e| XensError::io(path, e).into())
}

/// Ingests and deduplicates the sources. The report's skip count is the
/// number of undecodable files.
pub fn ingest(sources: &[String], out: &Path, stamp: &[(String, String)]) -> CliResult<(Collection, CurationReport, usize)> {
    if sources.is_empty() {
        return Err(CliError::Config("no --source given".into()));
    }
    let specs = sources.iter().map(|s| s.parse()).collect::<xens_core::Result<Vec<SourceSpec>>>()?;
    let raw = ingest_sources(&specs)?;
    for s in &raw.skipped {
        log::warn!("skipped {}: {}", s.path.display(), s.reason);
    }
    let skipped = raw.skipped.len();
    let (collection, report) = deduplicate(raw);
    write_stamped(collection.to_table(), stamp, out)?;
    Ok((collection, report, skipped))
}

pub fn exclusions_for(cfg: &RunConfig, explicit: Option<&str>) -> CliResult<ExclusionList> {
    match (explicit, cfg.variant) {
        (Some(spec), _) => Ok(ExclusionList::load(spec)?),
        (None, Variant::Raw) => Ok(ExclusionList::default()),
        (None, Variant::Refined) => match &cfg.exclusions {
            Some(path) => Ok(ExclusionList::load_path(path)?),
            None => Err(CliError::Config("variant refined needs an exclusions file".into())),
        },
    }
}

pub fn compose(collection: &Path, scheme: Scheme, exclusions: &ExclusionList, out: &Path, stamp: &[(String, String)]) -> CliResult<DatasetManifest> {
    let collection = Collection::read(collection)?;
    let (active, report) = apply_exclusions(collection, exclusions);
    for id in &report.stale_ids {
        log::warn!("exclusion list names unknown id {id}");
    }
    let manifest = compose_dataset(&active, scheme, &exclusions.digest())?;
    write_stamped(manifest.to_table(), stamp, out)?;
    Ok(manifest)
}

pub fn split(manifest: &Path, ratio: f64, folds: usize, seed: u64, out: &Path, stamp: &[(String, String)]) -> CliResult<(SplitPlan, FoldPlan)> {
    let manifest = DatasetManifest::read(manifest)?;
    let plan = holdout_split(&manifest, ratio, seed)?;
    let labeled: Vec<(String, usize)> = plan
        .train_ids
        .iter()
        .map(|id| (id.clone(), manifest.entry(id).expect("split ids come from the manifest").label))
        .collect();
    let fold_plan = make_folds(&labeled, folds, seed)?;
    write_stamped(plan.to_table(), stamp, &out.join("split.tsv"))?;
    write_stamped(fold_plan.to_table(), stamp, &out.join("folds.tsv"))?;
    Ok((plan, fold_plan))
}

fn context(cfg: &RunConfig) -> CliResult<DataContext> {
    let paths = cfg.layout();
    let manifest = DatasetManifest::read(&paths.manifest(Scheme::D))?;
    let split = SplitPlan::read(&paths.split())?;
    let folds = FoldPlan::read(&paths.folds())?;
    let mut provenance: BTreeMap<String, String> = stamp(cfg).into_iter().collect();
    provenance.insert("resize_to".into(), cfg.augmentation.resize_to.to_string());
    provenance.insert("crop_size".into(), cfg.augmentation.crop_size.to_string());
    Ok(DataContext::new(manifest, split, folds, ImageStore::from_env(), cfg.seed, provenance)?)
}

fn run_layout(cfg: &RunConfig) -> RunLayout {
    RunLayout::new(&cfg.out)
}

pub fn train_sub(cfg: &RunConfig, scheme: Scheme, fold: usize) -> CliResult<TrainingHistory> {
    let name = match scheme {
        Scheme::A => "a",
        Scheme::B => "b",
        Scheme::C => "c",
        Scheme::D => return Err(CliError::Config("sub-models use schemes A, B, or C; see train-baseline".into())),
    };
    let ctx = context(cfg)?;
    Ok(pipeline::run_sub_model(&ctx, &cfg.pipeline(), &run_layout(cfg), name, fold)?)
}

pub fn train_baseline(cfg: &RunConfig, fold: usize) -> CliResult<TrainingHistory> {
    let ctx = context(cfg)?;
    Ok(pipeline::run_baseline(&ctx, &cfg.pipeline(), &run_layout(cfg), fold)?)
}

/// Canonical ensemble name for a member list.
pub fn ensemble_name(members: &[String]) -> CliResult<&'static str> {
    let mut sorted = members.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != members.len() {
        return Err(CliError::Config(format!("duplicate ensemble members {members:?}")));
    }
    pipeline::ENSEMBLES
        .iter()
        .find(|(_, m)| m.len() == sorted.len() && m.iter().zip(&sorted).all(|(a, b)| a == b))
        .map(|(n, _)| *n)
        .ok_or_else(|| CliError::Config(format!("members {members:?} do not form one of B_ab, C_ac, D_bc, E_abc")))
}

pub fn train_ensemble(cfg: &RunConfig, members: &[String], fold: usize) -> CliResult<TrainingHistory> {
    let name = ensemble_name(members)?;
    let ctx = context(cfg)?;
    Ok(pipeline::run_ensemble(&ctx, &cfg.pipeline(), &run_layout(cfg), name, members, fold)?)
}

/// Evaluates any checkpoint on any manifest with matching classes.
pub fn evaluate(cfg: &RunConfig, model: &Path, manifest: &Path, out: &Path) -> CliResult<EvalReport> {
    let (saved, meta) = load_model::<pipeline::P>(model, None)?;
    let manifest = DatasetManifest::read(manifest)?;
    if !meta.class_names.is_empty() && meta.class_names != manifest.class_names {
        return Err(XensError::Metadata(format!(
            "checkpoint classes {:?} differ from manifest classes {:?}",
            meta.class_names, manifest.class_names
        ))
        .into());
    }
    let mut pcfg = cfg.pipeline();
    let size = |k: &str| meta.provenance.get(k).and_then(|v| v.parse::<usize>().ok());
    if let (Some(r), Some(c)) = (size("resize_to"), size("crop_size")) {
        pcfg.augmentation.resize_to = r;
        pcfg.augmentation.crop_size = c;
    }
    let items: Vec<Item> = manifest
        .entries
        .iter()
        .map(|e| Item {
            id: e.id.clone(),
            path: e.path.clone(),
            hash: e.hash.clone(),
            label: e.label,
        })
        .collect();
    let model_id = meta
        .provenance
        .get("model")
        .cloned()
        .unwrap_or_else(|| model.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
    let mut report = pipeline::evaluate_items(
        saved.as_network(),
        &items,
        &ImageStore::from_env(),
        &pcfg,
        &model_id,
        &format!("scheme-{}", manifest.scheme),
        &manifest.class_names,
    )?;
    report.provenance = stamp(cfg).into_iter().collect();
    report.write(out)?;
    Ok(report)
}

/// One-sided test that the candidate's PPVs exceed the baseline's.
pub fn ttest(candidate: &Path, baseline: &Path) -> CliResult<(String, String, TTestResult)> {
    let c = EvalReport::read(candidate)?;
    let b = EvalReport::read(baseline)?;
    let r = pooled_t_test(&c.ppv, &b.ppv)?;
    Ok((c.model_id, b.model_id, r))
}

/// Aggregates the fold reports of a run into summary and t-test tables.
pub fn report(cfg: &RunConfig) -> CliResult<RenderedReport> {
    let layout = run_layout(cfg);
    let folds = cfg.folds_to_run();
    let mut models = BTreeMap::new();
    for name in MAIN_MODELS {
        let reports = folds
            .iter()
            .map(|&f| {
                let dir = layout.report_dir(f, name);
                if !dir.join(xens_core::evaluation::REPORT_FILE).is_file() {
                    return Err(XensError::Missing(format!("report for model {name}, fold {f} ({})", dir.display())));
                }
                EvalReport::read(&dir)
            })
            .collect::<xens_core::Result<Vec<_>>>()?;
        models.insert(
            name.to_string(),
            ModelSummary {
                aggregate: aggregate_folds(&reports)?,
                ppv: mean_ppv(&reports)?,
            },
        );
    }
    let rendered = render_report(&models, &stamp(cfg))?;
    let dir = layout.reports_root();
    write_text(&dir.join("summary.tsv"), &rendered.summary_tsv)?;
    write_text(&dir.join("summary.txt"), &rendered.summary_txt)?;
    write_text(&dir.join("ttest.tsv"), &rendered.ttest_tsv)?;
    write_text(&dir.join("ttest.txt"), &rendered.ttest_txt)?;
    Ok(rendered)
}

/// Writes the corpus; with `probe`, also returns the pixel-statistic probe
/// accuracy.
pub fn synth(spec: &SyntheticCorpusSpec, out: &Path, probe: bool) -> CliResult<(Vec<TruthEntry>, Option<f64>)> {
    let truth = synth::generate_synthetic_corpus(spec, out)?;
    Ok((truth, probe.then(|| synth::corpus_probe_accuracy(spec))))
}

/// Ingest, compose, split, train every model for every configured fold,
/// evaluate, and report.
pub fn run_all(cfg: &RunConfig) -> CliResult<RenderedReport> {
    let paths: RunPaths = cfg.layout();
    let stamp = stamp(cfg);
    ingest(&cfg.sources, &paths.collection(), &stamp)?;
    let exclusions = exclusions_for(cfg, None)?;
    for scheme in Scheme::ALL {
        compose(&paths.collection(), scheme, &exclusions, &paths.manifest(scheme), &stamp)?;
    }
    let (plan, _) = split(
        &paths.manifest(Scheme::D),
        cfg.split.ratio,
        cfg.split.folds,
        cfg.seed,
        &paths.root.join("plans"),
        &stamp,
    )?;
    let d = DatasetManifest::read(&paths.manifest(Scheme::D))?;
    write_stamped(d.subset(&plan.test_ids)?.to_table(), &stamp, &paths.test_manifest())?;

    let ctx = context(cfg)?;
    pipeline::run_pipeline(&ctx, &cfg.pipeline(), &run_layout(cfg), &cfg.folds_to_run())?;
    report(cfg)
}
