//! Ingestion of labelled image folders, duplicate removal, artifact exclusion
//! lists, and composition of the four relabelled training datasets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, XensError};
use crate::tsv::Table;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RawLabel {
    Normal,
    Pneumonia,
    Covid19,
}

impl RawLabel {
    pub const ALL: [RawLabel; 3] = [RawLabel::Normal, RawLabel::Pneumonia, RawLabel::Covid19];

    pub fn as_str(self) -> &'static str {
        match self {
            RawLabel::Normal => "normal",
            RawLabel::Pneumonia => "pneumonia",
            RawLabel::Covid19 => "covid19",
        }
    }
}

impl fmt::Display for RawLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RawLabel {
    type Err = XensError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "normal" => Ok(RawLabel::Normal),
            "pneumonia" => Ok(RawLabel::Pneumonia),
            "covid19" | "covid-19" | "covid" => Ok(RawLabel::Covid19),
            other => Err(XensError::InvalidArgument(format!(
                "unknown label {other:?} (expected normal, pneumonia, covid19)"
            ))),
        }
    }
}

/// Class-mapping scheme for the four training datasets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Scheme {
    /// normal vs. diseased (pneumonia + COVID-19)
    A,
    /// pneumonia vs. non-pneumonia (normal + COVID-19)
    B,
    /// COVID-19 vs. non-COVID-19 (normal + pneumonia)
    C,
    /// normal / pneumonia / COVID-19
    D,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::A, Scheme::B, Scheme::C, Scheme::D];

    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            Scheme::A => &["normal", "diseased"],
            Scheme::B => &["pneumonia", "non-pneumonia"],
            Scheme::C => &["covid19", "non-covid19"],
            Scheme::D => &["normal", "pneumonia", "covid19"],
        }
    }

    pub fn num_classes(self) -> usize {
        self.class_names().len()
    }

    /// Class index of a raw label under this scheme.
    pub fn map(self, raw: RawLabel) -> usize {
        use RawLabel::*;
        match (self, raw) {
            (Scheme::A, Normal) => 0,
            (Scheme::A, _) => 1,
            (Scheme::B, Pneumonia) => 0,
            (Scheme::B, _) => 1,
            (Scheme::C, Covid19) => 0,
            (Scheme::C, _) => 1,
            (Scheme::D, Normal) => 0,
            (Scheme::D, Pneumonia) => 1,
            (Scheme::D, Covid19) => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::A => "A",
            Scheme::B => "B",
            Scheme::C => "C",
            Scheme::D => "D",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = XensError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(Scheme::A),
            "B" | "b" => Ok(Scheme::B),
            "C" | "c" => Ok(Scheme::C),
            "D" | "d" => Ok(Scheme::D),
            other => Err(XensError::InvalidArgument(format!("unknown scheme {other:?} (expected A, B, C, D)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRecord {
    /// `<source_id>/<path relative to the source directory>`
    pub id: String,
    pub path: PathBuf,
    pub source_id: String,
    pub raw_label: RawLabel,
    /// Hex SHA-256 of the file bytes.
    pub content_hash: String,
    pub excluded: bool,
    pub exclusion_reason: Option<String>,
    /// Pixel dimensions; unknown for records reloaded from a collection file.
    pub dims: Option<(u32, u32)>,
}

/// One `<dir>:<label>:<source_id>` ingestion source.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceSpec {
    pub dir: PathBuf,
    pub label: RawLabel,
    pub source_id: String,
}

impl FromStr for SourceSpec {
    type Err = XensError;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.rsplitn(3, ':');
        let (source_id, label, dir) = match (parts.next(), parts.next(), parts.next()) {
            (Some(id), Some(label), Some(dir)) if !id.is_empty() && !dir.is_empty() => (id, label, dir),
            _ => {
                return Err(XensError::InvalidArgument(format!(
                    "source {s:?} must look like <dir>:<label>:<source_id>"
                )))
            }
        };
        if source_id.contains('/') {
            return Err(XensError::InvalidArgument(format!("source id {source_id:?} may not contain '/'")));
        }
        Ok(SourceSpec {
            dir: PathBuf::from(dir),
            label: label.parse()?,
            source_id: source_id.to_string(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

/// Image records sorted by id, plus the files ingestion could not decode.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Collection {
    pub records: Vec<ImageRecord>,
    pub skipped: Vec<SkippedFile>,
}

pub type ClassCounts = BTreeMap<RawLabel, usize>;

impl Collection {
    pub fn from_records(mut records: Vec<ImageRecord>) -> Result<Self> {
        records.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = records.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(XensError::InvalidArgument(format!("duplicate record id {}", w[0].id)));
        }
        Ok(Collection {
            records,
            skipped: Vec::new(),
        })
    }

    pub fn active(&self) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(|r| !r.excluded)
    }

    pub fn active_counts(&self) -> ClassCounts {
        tally(self.active())
    }

    /// SHA-256 over the sorted `(id, hash)` pairs.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for r in &self.records {
            h.update(r.id.as_bytes());
            h.update(b"\t");
            h.update(r.content_hash.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

fn tally<'a>(records: impl Iterator<Item = &'a ImageRecord>) -> ClassCounts {
    let mut counts: ClassCounts = RawLabel::ALL.iter().map(|&l| (l, 0)).collect();
    for r in records {
        *counts.entry(r.raw_label).or_default() += 1;
    }
    counts
}

fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn probe_image(bytes: &[u8]) -> std::result::Result<(u32, u32), String> {
    let img = image::ImageReader::new(std::io::Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| e.to_string())?
        .decode()
        .map_err(|e| e.to_string())?;
    if img.width() == 0 || img.height() == 0 {
        return Err("zero-sized image".into());
    }
    Ok((img.width(), img.height()))
}

/// Reads every file under each source directory. Undecodable files are
/// recorded in `skipped` rather than failing the ingest.
pub fn ingest_sources(specs: &[SourceSpec]) -> Result<Collection> {
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for spec in specs {
        if !spec.dir.is_dir() {
            return Err(XensError::MissingDirectory(spec.dir.clone()));
        }
        let mut files: Vec<PathBuf> = walkdir::WalkDir::new(&spec.dir)
            .follow_links(true)
            .into_iter()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().is_file())
            .map(|e| e.into_path())
            .collect();
        files.sort();
        for path in files {
            let rel = path.strip_prefix(&spec.dir).expect("walkdir yields children");
            let rel = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join("/");
            let bytes = std::fs::read(&path).map_err(|e| XensError::io(&path, e))?;
            match probe_image(&bytes) {
                Ok(dims) => records.push(ImageRecord {
                    id: format!("{}/{}", spec.source_id, rel),
                    path: path.clone(),
                    source_id: spec.source_id.clone(),
                    raw_label: spec.label,
                    content_hash: hash_bytes(&bytes),
                    excluded: false,
                    exclusion_reason: None,
                    dims: Some(dims),
                }),
                Err(reason) => skipped.push(SkippedFile { path, reason }),
            }
        }
    }
    if records.is_empty() {
        return Err(XensError::NoImages);
    }
    let mut collection = Collection::from_records(records)?;
    collection.skipped = skipped;
    Ok(collection)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CurationReport {
    /// `(kept id, removed ids)` per duplicate group.
    pub duplicates_removed: Vec<(String, Vec<String>)>,
    pub excluded: Vec<(String, String)>,
    /// Exclusion-list ids with no matching record.
    pub stale_ids: Vec<String>,
    pub counts_before: ClassCounts,
    pub counts_after: ClassCounts,
}

impl CurationReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("class\tbefore\tafter\n");
        for l in RawLabel::ALL {
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                l,
                self.counts_before.get(&l).copied().unwrap_or(0),
                self.counts_after.get(&l).copied().unwrap_or(0)
            ));
        }
        for (kept, removed) in &self.duplicates_removed {
            out.push_str(&format!("duplicate\t{}\t{}\n", kept, removed.join(",")));
        }
        for (id, reason) in &self.excluded {
            out.push_str(&format!("excluded\t{id}\t{reason}\n"));
        }
        for id in &self.stale_ids {
            out.push_str(&format!("stale-exclusion\t{id}\n"));
        }
        out
    }
}

/// Keeps the smallest-id record of each content hash.
pub fn deduplicate(collection: Collection) -> (Collection, CurationReport) {
    let counts_before = collection.active_counts();
    let Collection { mut records, skipped } = collection;
    records.sort_by(|a, b| a.id.cmp(&b.id));
    let mut first_by_hash: BTreeMap<String, usize> = BTreeMap::new();
    let mut removed_for: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    let mut keep = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        match first_by_hash.get(&r.content_hash) {
            Some(&k) => {
                removed_for.entry(k).or_default().push(r.id.clone());
                keep.push(false);
            }
            None => {
                first_by_hash.insert(r.content_hash.clone(), i);
                keep.push(true);
            }
        }
    }
    let duplicates_removed = removed_for
        .into_iter()
        .map(|(k, removed)| (records[k].id.clone(), removed))
        .collect();
    let records: Vec<ImageRecord> = records
        .into_iter()
        .zip(keep)
        .filter_map(|(r, k)| k.then_some(r))
        .collect();
    let out = Collection { records, skipped };
    let report = CurationReport {
        duplicates_removed,
        counts_before,
        counts_after: out.active_counts(),
        ..Default::default()
    };
    (out, report)
}

/// Curated list of ids to drop, each with an optional reason.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExclusionList {
    pub entries: Vec<(String, String)>,
}

impl ExclusionList {
    /// One id per line, optional tab-separated reason; `#` lines and blank lines ignored.
    pub fn parse(text: &str) -> Self {
        let entries = text
            .lines()
            .map(|l| l.trim_end_matches('\r'))
            .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
            .map(|l| match l.split_once('\t') {
                Some((id, reason)) => (id.trim().to_string(), reason.trim().to_string()),
                None => (l.trim().to_string(), String::new()),
            })
            .collect();
        ExclusionList { entries }
    }

    /// `none` yields the empty (raw) list.
    pub fn load(spec: &str) -> Result<Self> {
        if spec == "none" {
            return Ok(ExclusionList::default());
        }
        let text = std::fs::read_to_string(spec).map_err(|e| XensError::io(spec, e))?;
        Ok(Self::parse(&text))
    }

    pub fn load_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| XensError::io(path, e))?;
        Ok(Self::parse(&text))
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (id, reason) in &self.entries {
            h.update(id.as_bytes());
            h.update(b"\t");
            h.update(reason.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(id, r)| if r.is_empty() { format!("{id}\n") } else { format!("{id}\t{r}\n") })
            .collect()
    }
}

/// Marks listed records as excluded. Unknown ids become stale warnings.
pub fn apply_exclusions(collection: Collection, list: &ExclusionList) -> (Collection, CurationReport) {
    let counts_before = collection.active_counts();
    let mut collection = collection;
    let mut excluded = Vec::new();
    let mut stale_ids = Vec::new();
    let mut seen = BTreeSet::new();
    for (id, reason) in &list.entries {
        if !seen.insert(id.clone()) {
            continue;
        }
        match collection.records.binary_search_by(|r| r.id.as_str().cmp(id)) {
            Ok(i) => {
                let r = &mut collection.records[i];
                if !r.excluded {
                    r.excluded = true;
                    r.exclusion_reason = Some(reason.clone());
                    excluded.push((id.clone(), reason.clone()));
                }
            }
            Err(_) => stale_ids.push(id.clone()),
        }
    }
    let report = CurationReport {
        excluded,
        stale_ids,
        counts_before,
        counts_after: collection.active_counts(),
        ..Default::default()
    };
    (collection, report)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub hash: String,
    pub raw_label: RawLabel,
    /// Index into the manifest's `class_names`.
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub collection_digest: String,
    pub exclusions_digest: String,
    /// Seconds since the Unix epoch; taken from `SOURCE_DATE_EPOCH`, else 0,
    /// so reruns produce identical files.
    pub created_unix: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub scheme: Scheme,
    pub entries: Vec<ManifestEntry>,
    pub class_names: Vec<String>,
    pub class_counts: Vec<usize>,
    pub provenance: Provenance,
}

pub fn creation_timestamp() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0)
}

/// Relabels the active records under `scheme`.
pub fn compose_dataset(collection: &Collection, scheme: Scheme, exclusions_digest: &str) -> Result<DatasetManifest> {
    let raw_counts = collection.active_counts();
    let class_names: Vec<String> = scheme.class_names().iter().map(|s| s.to_string()).collect();
    let entries: Vec<ManifestEntry> = collection
        .active()
        .map(|r| ManifestEntry {
            id: r.id.clone(),
            path: r.path.clone(),
            hash: r.content_hash.clone(),
            raw_label: r.raw_label,
            label: scheme.map(r.raw_label),
        })
        .collect();
    let mut class_counts = vec![0; class_names.len()];
    for e in &entries {
        class_counts[e.label] += 1;
    }
    let missing_raw = raw_counts.iter().any(|(_, &n)| n == 0);
    if missing_raw || class_counts.contains(&0) {
        let dump = raw_counts
            .iter()
            .map(|(l, n)| format!("{l}={n}"))
            .chain(class_names.iter().zip(&class_counts).map(|(c, n)| format!("{scheme}:{c}={n}")))
            .collect::<Vec<_>>()
            .join(", ");
        return Err(XensError::EmptyClass(format!("scheme {scheme} has an empty class ({dump})")));
    }
    Ok(DatasetManifest {
        scheme,
        entries,
        class_names,
        class_counts,
        provenance: Provenance {
            collection_digest: collection.digest(),
            exclusions_digest: exclusions_digest.to_string(),
            created_unix: creation_timestamp(),
        },
    })
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn entry(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries
            .binary_search_by(|e| e.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.entries[i])
    }

    /// The same image set relabelled under another scheme.
    pub fn relabel(&self, scheme: Scheme) -> DatasetManifest {
        let entries: Vec<ManifestEntry> = self
            .entries
            .iter()
            .map(|e| ManifestEntry {
                label: scheme.map(e.raw_label),
                ..e.clone()
            })
            .collect();
        let mut class_counts = vec![0; scheme.num_classes()];
        for e in &entries {
            class_counts[e.label] += 1;
        }
        DatasetManifest {
            scheme,
            entries,
            class_names: scheme.class_names().iter().map(|s| s.to_string()).collect(),
            class_counts,
            provenance: self.provenance.clone(),
        }
    }

    /// Sub-manifest restricted to `ids` (which must all be present).
    pub fn subset(&self, ids: &[String]) -> Result<DatasetManifest> {
        let mut entries = ids
            .iter()
            .map(|id| {
                self.entry(id)
                    .cloned()
                    .ok_or_else(|| XensError::Missing(format!("id {id} not in manifest")))
            })
            .collect::<Result<Vec<_>>>()?;
        entries.sort_by(|a, b| a.id.cmp(&b.id));
        let mut class_counts = vec![0; self.num_classes()];
        for e in &entries {
            class_counts[e.label] += 1;
        }
        Ok(DatasetManifest {
            scheme: self.scheme,
            entries,
            class_names: self.class_names.clone(),
            class_counts,
            provenance: self.provenance.clone(),
        })
    }
}

pub const RECORD_COLUMNS: [&str; 6] = ["id", "path", "label", "hash", "excluded", "reason"];

fn record_row(id: &str, path: &Path, label: &str, hash: &str, excluded: bool, reason: &str) -> Vec<String> {
    vec![
        id.to_string(),
        path.to_string_lossy().into_owned(),
        label.to_string(),
        hash.to_string(),
        excluded.to_string(),
        reason.to_string(),
    ]
}

fn parse_bool(s: &str, ctx: &str) -> Result<bool> {
    match s {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(XensError::parse(ctx, format!("expected true/false, got {other:?}"))),
    }
}

impl Collection {
    pub fn to_table(&self) -> Table {
        let mut t = Table::new(&RECORD_COLUMNS);
        t.push_meta("format", "xens-collection-v1");
        t.push_meta("collection_digest", self.digest());
        for r in &self.records {
            t.rows.push(record_row(
                &r.id,
                &r.path,
                r.raw_label.as_str(),
                &r.content_hash,
                r.excluded,
                r.exclusion_reason.as_deref().unwrap_or(""),
            ));
        }
        t
    }

    pub fn from_table(t: &Table, ctx: &str) -> Result<Self> {
        let cols = RECORD_COLUMNS
            .iter()
            .map(|c| t.require_column(c, ctx))
            .collect::<Result<Vec<_>>>()?;
        let mut records = Vec::with_capacity(t.rows.len());
        for row in &t.rows {
            let id = row[cols[0]].clone();
            let source_id = id.split('/').next().unwrap_or_default().to_string();
            let excluded = parse_bool(&row[cols[4]], ctx)?;
            let reason = row[cols[5]].clone();
            records.push(ImageRecord {
                id,
                path: PathBuf::from(&row[cols[1]]),
                source_id,
                raw_label: row[cols[2]].parse()?,
                content_hash: row[cols[3]].clone(),
                excluded,
                exclusion_reason: excluded.then_some(reason),
                dims: None,
            });
        }
        Collection::from_records(records)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_table().write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_table(&Table::read(path)?, &path.display().to_string())
    }
}

impl DatasetManifest {
    pub fn to_table(&self) -> Table {
        let mut t = Table::new(&RECORD_COLUMNS);
        t.push_meta("format", "xens-manifest-v1");
        t.push_meta("scheme", self.scheme);
        t.push_meta("classes", self.class_names.join(","));
        t.push_meta(
            "class_counts",
            self.class_counts.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
        );
        t.push_meta("collection_digest", &self.provenance.collection_digest);
        t.push_meta("exclusions_digest", &self.provenance.exclusions_digest);
        t.push_meta("created_unix", self.provenance.created_unix);
        for e in &self.entries {
            t.rows.push(record_row(&e.id, &e.path, &self.class_names[e.label], &e.hash, false, e.raw_label.as_str()));
        }
        t
    }

    pub fn from_table(t: &Table, ctx: &str) -> Result<Self> {
        let scheme: Scheme = t.require_meta("scheme", ctx)?.parse()?;
        let class_names: Vec<String> = scheme.class_names().iter().map(|s| s.to_string()).collect();
        let listed = t.require_meta("classes", ctx)?;
        if listed != class_names.join(",") {
            return Err(XensError::parse(ctx, format!("classes {listed:?} do not match scheme {scheme}")));
        }
        let cols = RECORD_COLUMNS
            .iter()
            .map(|c| t.require_column(c, ctx))
            .collect::<Result<Vec<_>>>()?;
        let mut entries = Vec::with_capacity(t.rows.len());
        for row in &t.rows {
            let label_name = &row[cols[2]];
            let label = class_names
                .iter()
                .position(|c| c == label_name)
                .ok_or_else(|| XensError::parse(ctx, format!("label {label_name:?} not in scheme {scheme}")))?;
            let raw_label: RawLabel = row[cols[5]].parse()?;
            if scheme.map(raw_label) != label {
                return Err(XensError::parse(ctx, format!("row {} label disagrees with raw label", row[cols[0]])));
            }
            entries.push(ManifestEntry {
                id: row[cols[0]].clone(),
                path: PathBuf::from(&row[cols[1]]),
                hash: row[cols[3]].clone(),
                raw_label,
                label,
            });
        }
        entries.sort_by(|a, b| a.id.cmp(&b.id));
        let mut class_counts = vec![0; class_names.len()];
        for e in &entries {
            class_counts[e.label] += 1;
        }
        let created_unix = t
            .require_meta("created_unix", ctx)?
            .parse()
            .map_err(|_| XensError::parse(ctx, "created_unix is not an integer"))?;
        Ok(DatasetManifest {
            scheme,
            entries,
            class_names,
            class_counts,
            provenance: Provenance {
                collection_digest: t.require_meta("collection_digest", ctx)?.to_string(),
                exclusions_digest: t.require_meta("exclusions_digest", ctx)?.to_string(),
                created_unix,
            },
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_table().write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_table(&Table::read(path)?, &path.display().to_string())
    }
}
