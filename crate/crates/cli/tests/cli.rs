use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use xens_cli::report::{render_report, ttest_rows, ModelSummary};
use xens_cli::synth::{self, SyntheticCorpusSpec};
use xens_core::{aggregate_folds, DatasetManifest, EvalReport, Tensor};

fn xens(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xens"))
        .current_dir(dir)
        .args(args)
        .env_remove("XENS_CACHE")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_spec() -> SyntheticCorpusSpec {
    let mut s = SyntheticCorpusSpec::default();
    s.size = 24;
    s.counts.normal = 12;
    s.counts.pneumonia = 12;
    s.counts.covid19 = 12;
    s
}

#[test]
fn help_and_version_exit_zero() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(xens(tmp.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(xens(tmp.path(), &["--version"]).status.code(), Some(0));
    assert_eq!(xens(tmp.path(), &["run-all", "--help"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(xens(tmp.path(), &[]).status.code(), Some(2));
    assert_eq!(xens(tmp.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(xens(tmp.path(), &["split", "--bogus"]).status.code(), Some(2));
    assert_eq!(xens(tmp.path(), &["compose", "--scheme", "Q"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_are_one_line_and_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let o = xens(tmp.path(), &["--out", "c.tsv", "ingest", "--source", "nowhere:normal:s"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: missing-directory: "), "{err}");
    assert!(err.contains("nowhere"), "{err}");

    fs::write(tmp.path().join("bad.toml"), "seed = 1\nfrobs = 2\n").unwrap();
    let o = xens(tmp.path(), &["--config", "bad.toml", "report"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: config: "), "{}", stderr(&o));

    let o = xens(tmp.path(), &["--out", "r", "train-ensemble", "--members", "a,a", "--fold", "0"]);
    assert_eq!(o.status.code(), Some(1));

    let o = xens(tmp.path(), &["--variant", "refined", "--out", "m.tsv", "compose", "--collection", "c.tsv", "--scheme", "D"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("exclusions"), "{}", stderr(&o));
}

#[test]
fn synthetic_corpus_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = small_spec();
    let a = synth::generate_synthetic_corpus(&spec, &tmp.path().join("a")).unwrap();
    let b = synth::generate_synthetic_corpus(&spec, &tmp.path().join("b")).unwrap();
    assert_eq!(a.len(), 36);
    for t in &a {
        let rel = &t.path;
        assert_eq!(fs::read(tmp.path().join("a").join(rel)).unwrap(), fs::read(tmp.path().join("b").join(rel)).unwrap());
    }
    assert_eq!(a, b);
    assert_eq!(
        fs::read(tmp.path().join("a").join(synth::TRUTH_FILE)).unwrap(),
        fs::read(tmp.path().join("b").join(synth::TRUTH_FILE)).unwrap()
    );
}

#[test]
fn synthetic_classes_are_separable_without_confound() {
    let spec = SyntheticCorpusSpec::default();
    assert!(synth::corpus_probe_accuracy(&spec) >= 0.9);
}

#[test]
fn confound_marks_exactly_the_chosen_class() {
    let mut spec = small_spec();
    spec.confound = Some(synth::ConfoundSpec {
        class: xens_core::RawLabel::Covid19,
        fraction: 1.0,
    });
    let tmp = tempfile::tempdir().unwrap();
    let truth = synth::generate_synthetic_corpus(&spec, tmp.path()).unwrap();
    for t in &truth {
        assert_eq!(t.marker, t.label == xens_core::RawLabel::Covid19);
    }
}

#[test]
fn invalid_synth_specs_are_rejected() {
    let mut spec = small_spec();
    spec.counts.pneumonia = 3;
    assert!(spec.validate().is_err());
    let mut spec = small_spec();
    spec.size = 4;
    assert!(spec.validate().is_err());
}

#[test]
fn ingest_compose_split_chain_is_stamped() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth::generate_synthetic_corpus(&small_spec(), &d.join("corpus")).unwrap();
    let mut args = vec!["--seed", "5", "--out", "col.tsv", "ingest"];
    let sources = synth::source_specs(Path::new("corpus"), "s1");
    for s in &sources {
        args.extend(["--source", s.as_str()]);
    }
    let o = xens(d, &args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("covid19\t12\t12"));

    let o = xens(d, &["--seed", "5", "--out", "d.tsv", "compose", "--collection", "col.tsv", "--scheme", "D"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = xens(d, &["--seed", "5", "--out", "plans", "split", "--manifest", "d.tsv", "--ratio", "0.75", "--folds", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(String::from_utf8_lossy(&o.stdout), "train\t27\ntest\t9\nfolds\t3\n");

    let m = DatasetManifest::read(&d.join("d.tsv")).unwrap();
    assert_eq!(m.class_counts, [12, 12, 12]);
    for f in ["col.tsv", "d.tsv", "plans/split.tsv", "plans/folds.tsv"] {
        let text = fs::read_to_string(d.join(f)).unwrap();
        assert!(text.contains("#seed=5"), "{f}");
        assert!(text.contains("#variant=raw"), "{f}");
        assert!(text.contains("#config_digest="), "{f}");
    }

    // same inputs, same bytes
    let o = xens(d, &["--seed", "5", "--out", "plans2", "split", "--manifest", "d.tsv", "--ratio", "0.75", "--folds", "3"]);
    assert!(o.status.success());
    for f in ["split.tsv", "folds.tsv"] {
        assert_eq!(fs::read(d.join("plans").join(f)).unwrap(), fs::read(d.join("plans2").join(f)).unwrap());
    }
}

#[test]
fn refined_variant_applies_exclusions() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth::generate_synthetic_corpus(&small_spec(), &d.join("corpus")).unwrap();
    let mut args = vec!["--out", "col.tsv", "ingest"];
    let sources = synth::source_specs(Path::new("corpus"), "s1");
    for s in &sources {
        args.extend(["--source", s.as_str()]);
    }
    assert!(xens(d, &args).status.success());
    fs::write(d.join("excl.tsv"), "s1/covid19_0000.png\tarrow\ns1/normal_0003.png\twire\n").unwrap();
    fs::write(d.join("run.toml"), "variant = \"refined\"\nexclusions = \"excl.tsv\"\n").unwrap();
    let o = xens(d, &["--config", "run.toml", "--out", "d.tsv", "compose", "--collection", "col.tsv", "--scheme", "D"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = DatasetManifest::read(&d.join("d.tsv")).unwrap();
    assert_eq!(m.class_counts, [11, 12, 11]);
}

fn fake_report(model: &str, right: f64, n: usize) -> EvalReport {
    let names: Vec<String> = ["normal", "pneumonia", "covid19"].iter().map(|s| s.to_string()).collect();
    let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let mut probs = Vec::new();
    for (i, &y) in labels.iter().enumerate() {
        let p = (right + 0.01 * (i % 5) as f64).min(0.98);
        let mut row = [(1.0 - p) / 2.0; 3];
        row[y] = p;
        probs.extend(row);
    }
    let probs = Tensor::from_vec(&[n, 3], probs).unwrap();
    EvalReport::from_probabilities(model, "test", &names, (0..n).map(|i| format!("s/{i}")).collect(), labels, &probs)
        .unwrap()
}

#[test]
fn ttest_table_orientation() {
    let mut models = BTreeMap::new();
    for (name, right) in [("A", 0.5), ("B_ab", 0.6), ("C_ac", 0.62), ("D_bc", 0.64), ("E_abc", 0.8)] {
        let folds = vec![fake_report(name, right, 30), fake_report(name, right + 0.01, 30)];
        models.insert(
            name.to_string(),
            ModelSummary {
                aggregate: aggregate_folds(&folds).unwrap(),
                ppv: xens_core::evaluation::mean_ppv(&folds).unwrap(),
            },
        );
    }
    let rows = ttest_rows(&models).unwrap();
    let by: BTreeMap<_, _> = rows.iter().map(|r| (r.model.as_str(), r)).collect();
    assert!(by["A"].vs_baseline.is_none());
    assert!(by["E_abc"].vs_reference.is_none());
    // ensembles beat A: positive t in the A column
    for m in ["B_ab", "C_ac", "D_bc", "E_abc"] {
        assert!(by[m].vs_baseline.unwrap().t > 0.0, "{m}");
    }
    // E_abc beats everyone: positive t in the E_abc column
    for m in ["A", "B_ab", "C_ac", "D_bc"] {
        assert!(by[m].vs_reference.unwrap().t > 0.0, "{m}");
    }
    assert_eq!(by["A"].vs_reference.unwrap().t, by["E_abc"].vs_baseline.unwrap().t);

    let header = vec![("seed".to_string(), "1".to_string())];
    let r = render_report(&models, &header).unwrap();
    assert_eq!(r, render_report(&models, &header).unwrap());
    for text in [&r.summary_tsv, &r.summary_txt, &r.ttest_tsv, &r.ttest_txt] {
        assert!(text.starts_with("# seed: 1"), "{text}");
        for m in ["A", "B_ab", "C_ac", "D_bc", "E_abc"] {
            assert!(text.contains(m));
        }
    }
    assert!(r.summary_tsv.lines().any(|l| l.starts_with("model\t")));
}

#[test]
fn report_requires_every_model() {
    let mut models = BTreeMap::new();
    let folds = vec![fake_report("A", 0.5, 9), fake_report("A", 0.6, 9)];
    models.insert(
        "A".to_string(),
        ModelSummary {
            aggregate: aggregate_folds(&folds).unwrap(),
            ppv: xens_core::evaluation::mean_ppv(&folds).unwrap(),
        },
    );
    assert!(render_report(&models, &[]).is_err());
}
