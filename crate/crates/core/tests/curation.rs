use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use proptest::prelude::*;
use xens_core::curation::{ManifestEntry, SourceSpec};
use xens_core::{
    apply_exclusions, compose_dataset, deduplicate, ingest_sources, Collection, DatasetManifest, ExclusionList,
    ImageRecord, RawLabel, Scheme, XensError,
};

fn png(path: &Path, shade: u8) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    GrayImage::from_pixel(8, 6, Luma([shade])).save(path).unwrap();
}

fn spec(dir: &Path, label: RawLabel, id: &str) -> SourceSpec {
    SourceSpec {
        dir: dir.to_path_buf(),
        label,
        source_id: id.into(),
    }
}

fn record(id: &str, label: RawLabel, hash: &str) -> ImageRecord {
    ImageRecord {
        id: id.into(),
        path: PathBuf::from(id),
        source_id: id.split('/').next().unwrap().into(),
        raw_label: label,
        content_hash: hash.into(),
        excluded: false,
        exclusion_reason: None,
        dims: None,
    }
}

/// Collection with the given active counts per raw label and unique hashes.
fn synthetic(normal: usize, pneumonia: usize, covid: usize) -> Collection {
    let mut records = Vec::new();
    for (label, n) in [(RawLabel::Normal, normal), (RawLabel::Pneumonia, pneumonia), (RawLabel::Covid19, covid)] {
        for i in 0..n {
            let id = format!("{}/{i:05}", label.as_str());
            records.push(record(&id, label, &format!("{}-{i}", label.as_str())));
        }
    }
    Collection::from_records(records).unwrap()
}

fn counts(m: &DatasetManifest) -> Vec<(String, usize)> {
    m.class_names.iter().cloned().zip(m.class_counts.iter().copied()).collect()
}

#[test]
fn ingest_three_sources() {
    let tmp = tempfile::tempdir().unwrap();
    let labels = [RawLabel::Normal, RawLabel::Pneumonia, RawLabel::Covid19];
    let mut specs = Vec::new();
    for (i, label) in labels.iter().enumerate() {
        let dir = tmp.path().join(format!("d{i}"));
        png(&dir.join("x.png"), 10 * i as u8);
        png(&dir.join("y.png"), 10 * i as u8 + 1);
        specs.push(spec(&dir, *label, &format!("s{i}")));
    }
    let c = ingest_sources(&specs).unwrap();
    assert_eq!(c.records.len(), 6);
    assert!(c.skipped.is_empty());
    for r in &c.records {
        let i: usize = r.source_id[1..].parse().unwrap();
        assert_eq!(r.raw_label, labels[i]);
        assert!(r.id.starts_with(&format!("s{i}/")));
        assert_eq!(r.dims, Some((8, 6)));
        assert_eq!(r.content_hash.len(), 64);
    }
}

#[test]
fn corrupt_file_goes_to_skip_list() {
    let tmp = tempfile::tempdir().unwrap();
    png(&tmp.path().join("ok.png"), 3);
    fs::write(tmp.path().join("bad.png"), b"not an image").unwrap();
    let c = ingest_sources(&[spec(tmp.path(), RawLabel::Normal, "s")]).unwrap();
    assert_eq!(c.records.len(), 1);
    assert_eq!(c.skipped.len(), 1);
    assert!(c.skipped[0].path.ends_with("bad.png"));
}

#[test]
fn same_filename_under_two_sources_gets_two_ids() {
    let tmp = tempfile::tempdir().unwrap();
    png(&tmp.path().join("a/x.png"), 1);
    png(&tmp.path().join("b/x.png"), 2);
    let c = ingest_sources(&[
        spec(&tmp.path().join("a"), RawLabel::Normal, "a"),
        spec(&tmp.path().join("b"), RawLabel::Normal, "b"),
    ])
    .unwrap();
    let ids: Vec<_> = c.records.iter().map(|r| r.id.as_str()).collect();
    assert_eq!(ids, ["a/x.png", "b/x.png"]);
}

#[test]
fn missing_directory_and_empty_input_are_fatal() {
    let tmp = tempfile::tempdir().unwrap();
    let gone = tmp.path().join("gone");
    match ingest_sources(&[spec(&gone, RawLabel::Normal, "s")]) {
        Err(XensError::MissingDirectory(p)) => assert_eq!(p, gone),
        other => panic!("expected missing directory, got {other:?}"),
    }
    fs::write(tmp.path().join("junk.png"), b"junk").unwrap();
    assert!(ingest_sources(&[spec(tmp.path(), RawLabel::Normal, "s")]).is_err());
}

#[test]
fn content_hash_is_sha256_of_bytes() {
    use sha2::{Digest, Sha256};
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("i.png");
    png(&p, 77);
    let c = ingest_sources(&[spec(tmp.path(), RawLabel::Covid19, "s")]).unwrap();
    assert_eq!(c.records[0].content_hash, hex::encode(Sha256::digest(fs::read(&p).unwrap())));
}

#[test]
fn duplicates_keep_smallest_id() {
    let tmp = tempfile::tempdir().unwrap();
    png(&tmp.path().join("a/x.png"), 9);
    png(&tmp.path().join("b/x.png"), 9);
    let c = ingest_sources(&[
        spec(&tmp.path().join("b"), RawLabel::Pneumonia, "b"),
        spec(&tmp.path().join("a"), RawLabel::Pneumonia, "a"),
    ])
    .unwrap();
    let (kept, report) = deduplicate(c);
    assert_eq!(kept.records.len(), 1);
    assert_eq!(kept.records[0].id, "a/x.png");
    assert_eq!(report.duplicates_removed, vec![("a/x.png".to_string(), vec!["b/x.png".to_string()])]);
    assert_eq!(report.counts_before[&RawLabel::Pneumonia], 2);
    assert_eq!(report.counts_after[&RawLabel::Pneumonia], 1);
}

#[test]
fn unique_collection_is_unchanged_by_dedup() {
    let c = synthetic(3, 4, 5);
    let (d, report) = deduplicate(c.clone());
    assert_eq!(d, c);
    assert!(report.duplicates_removed.is_empty());
}

#[test]
fn exclusions_mark_records_and_report_stale_ids() {
    let c = synthetic(4, 3, 3);
    let target = c.records[2].id.clone();
    let list = ExclusionList::parse(&format!("{target}\tarrow marker\nnowhere/1\twire\n"));
    let (out, report) = apply_exclusions(c, &list);
    assert_eq!(out.active().count(), 9);
    let hit = out.records.iter().find(|r| r.id == target).unwrap();
    assert!(hit.excluded);
    assert_eq!(hit.exclusion_reason.as_deref(), Some("arrow marker"));
    assert_eq!(report.excluded, vec![(target, "arrow marker".to_string())]);
    assert_eq!(report.stale_ids, vec!["nowhere/1".to_string()]);

    let c = synthetic(2, 2, 2);
    let (same, report) = apply_exclusions(c.clone(), &ExclusionList::default());
    assert_eq!(same, c);
    assert!(report.excluded.is_empty() && report.stale_ids.is_empty());
}

#[test]
fn full_scale_counts_compose_into_the_four_datasets() {
    let c = synthetic(1579, 4245, 184);
    let a = compose_dataset(&c, Scheme::A, "").unwrap();
    assert_eq!(counts(&a), [("normal".to_string(), 1579), ("diseased".to_string(), 4429)]);
    let b = compose_dataset(&c, Scheme::B, "").unwrap();
    assert_eq!(counts(&b), [("pneumonia".to_string(), 4245), ("non-pneumonia".to_string(), 1763)]);
    let cc = compose_dataset(&c, Scheme::C, "").unwrap();
    assert_eq!(counts(&cc), [("covid19".to_string(), 184), ("non-covid19".to_string(), 5824)]);
    let d = compose_dataset(&c, Scheme::D, "").unwrap();
    assert_eq!(
        counts(&d),
        [("normal".to_string(), 1579), ("pneumonia".to_string(), 4245), ("covid19".to_string(), 184)]
    );
}

#[test]
fn empty_scheme_class_is_fatal_with_counts() {
    let c = synthetic(5, 5, 0);
    match compose_dataset(&c, Scheme::C, "") {
        Err(XensError::EmptyClass(msg)) => assert!(msg.contains("covid19"), "{msg}"),
        other => panic!("expected empty class, got {other:?}"),
    }
}

#[test]
fn manifest_round_trips_through_tsv() {
    let tmp = tempfile::tempdir().unwrap();
    let c = synthetic(3, 2, 4);
    let m = compose_dataset(&c, Scheme::B, "abc").unwrap();
    let p = tmp.path().join("m.tsv");
    m.write(&p).unwrap();
    assert_eq!(DatasetManifest::read(&p).unwrap(), m);

    let p = tmp.path().join("c.tsv");
    c.write(&p).unwrap();
    assert_eq!(Collection::read(&p).unwrap().records, c.records);
}

fn entries_by_id(m: &DatasetManifest) -> Vec<&ManifestEntry> {
    let mut v: Vec<_> = m.entries.iter().collect();
    v.sort_by(|a, b| a.id.cmp(&b.id));
    v
}

proptest! {
    #[test]
    fn composition_algebra(n in 1usize..60, p in 1usize..60, c in 1usize..60, dup in 0usize..10, excl in 0usize..10) {
        let mut col = synthetic(n, p, c);
        // duplicate some hashes so dedup has work to do
        let total = col.records.len();
        for i in 0..dup.min(total - 1) {
            let h = col.records[i].content_hash.clone();
            col.records[total - 1 - i].content_hash = h;
        }
        let (once, _) = deduplicate(col);
        let (twice, again) = deduplicate(once.clone());
        prop_assert_eq!(&twice, &once);
        prop_assert!(again.duplicates_removed.is_empty());

        let ids: Vec<String> = once.records.iter().step_by(3).take(excl).map(|r| r.id.clone()).collect();
        let list = ExclusionList::parse(&ids.iter().map(|i| format!("{i}\tmarker\n")).collect::<String>());
        let (active, report) = apply_exclusions(once.clone(), &list);
        for label in RawLabel::ALL {
            let before = report.counts_before.get(&label).copied().unwrap_or(0);
            let after = report.counts_after.get(&label).copied().unwrap_or(0);
            let gone = report.excluded.iter().filter(|(id, _)| active.records.iter().any(|r| &r.id == id && r.raw_label == label)).count();
            prop_assert_eq!(before - gone, after);
        }

        let m: Vec<_> = [Scheme::A, Scheme::B, Scheme::C, Scheme::D].iter().map(|&s| compose_dataset(&active, s, "")).collect();
        if m.iter().any(|r| r.is_err()) {
            return Ok(());
        }
        let m: Vec<_> = m.into_iter().map(Result::unwrap).collect();
        let (a, b, c) = (&m[0].class_counts, &m[1].class_counts, &m[2].class_counts);
        prop_assert_eq!(a[1], b[0] + c[0]);
        prop_assert_eq!(b[1], a[0] + c[0]);
        let active_ids: Vec<&str> = active.active().map(|r| r.id.as_str()).collect();
        for manifest in &m {
            let ids: Vec<&str> = entries_by_id(manifest).iter().map(|e| e.id.as_str()).collect();
            prop_assert_eq!(&ids, &active_ids);
            let mut tally = vec![0usize; manifest.num_classes()];
            for e in &manifest.entries {
                tally[e.label] += 1;
            }
            prop_assert_eq!(&tally, &manifest.class_counts);
        }
    }
}
