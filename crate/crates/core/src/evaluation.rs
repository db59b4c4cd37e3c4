//! Confusion matrices, the metric suite, predictive probabilities of the true
//! class, the pooled-variance t-test, and cross-fold aggregation.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Result, XensError};
use crate::nn::{Scalar, Tensor};
use crate::tsv::Table;

/// `cm[true][predicted]`.
pub type ConfusionMatrix = Vec<Vec<u64>>;

pub fn confusion_matrix(predictions: &[usize], labels: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(XensError::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut cm = vec![vec![0u64; k]; k];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= k || y >= k {
            return Err(XensError::InvalidArgument(format!("class index ({y}, {p}) outside 0..{k}")));
        }
        cm[y][p] += 1;
    }
    Ok(cm)
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn argmax_rows<F: Scalar>(probs: &Tensor<F>) -> Vec<usize> {
    (0..probs.batch())
        .map(|i| {
            let row = probs.row(i);
            let mut best = 0;
            for j in 1..row.len() {
                if row[j].to_f64() > row[best].to_f64() {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub per_class: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub mcc: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Precision/recall/F1 per class, accuracy, and the multiclass R_K
/// correlation. Any zero denominator yields 0 for that quantity.
pub fn classification_metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let k = cm.len();
    if k == 0 || cm.iter().any(|r| r.len() != k) {
        return Err(XensError::Shape("confusion matrix must be square and non-empty".into()));
    }
    let rows: Vec<f64> = cm.iter().map(|r| r.iter().sum::<u64>() as f64).collect();
    let cols: Vec<f64> = (0..k).map(|j| cm.iter().map(|r| r[j]).sum::<u64>() as f64).collect();
    let total: f64 = rows.iter().sum();
    if total == 0.0 {
        return Err(XensError::InvalidArgument("confusion matrix has no samples".into()));
    }
    let trace: f64 = (0..k).map(|c| cm[c][c] as f64).sum();
    let per_class = (0..k)
        .map(|c| {
            let tp = cm[c][c] as f64;
            let precision = ratio(tp, cols[c]);
            let recall = ratio(tp, rows[c]);
            ClassMetrics {
                precision,
                recall,
                f1: ratio(2.0 * precision * recall, precision + recall),
            }
        })
        .collect();
    let pt: f64 = rows.iter().zip(&cols).map(|(t, p)| t * p).sum();
    let pp: f64 = cols.iter().map(|p| p * p).sum();
    let tt: f64 = rows.iter().map(|t| t * t).sum();
    let s2 = total * total;
    let den = ((s2 - pp) * (s2 - tt)).sqrt();
    Ok(Metrics {
        per_class,
        accuracy: trace / total,
        mcc: ratio(trace * total - pt, den),
    })
}

/// Probability each row assigns to its true class.
pub fn ppv_true_class<F: Scalar>(probs: &Tensor<F>, labels: &[usize]) -> Result<Vec<f64>> {
    if probs.batch() != labels.len() {
        return Err(XensError::Shape(format!("{} rows for {} labels", probs.batch(), labels.len())));
    }
    let k = probs.row_len();
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            if y >= k {
                return Err(XensError::InvalidArgument(format!("label {y} outside 0..{k}")));
            }
            let row = probs.row(i);
            let sum: f64 = row.iter().map(|v| v.to_f64()).sum();
            if (sum - 1.0).abs() > 1e-5 {
                return Err(XensError::InvalidArgument(format!("probability row {i} sums to {sum}")));
            }
            Ok(row[y].to_f64())
        })
        .collect()
}

/// ln Γ(x) for x > 0 (Lanczos, g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..20_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta I_x(a, b).
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Upper tail P(T > t) of Student's t with `df` degrees of freedom.
pub fn student_t_sf(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 0.5;
    }
    if t.is_infinite() {
        return if t > 0.0 { 0.0 } else { 1.0 };
    }
    let tail = 0.5 * incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
    if t > 0.0 {
        tail
    } else {
        1.0 - tail
    }
}

pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    1.0 - student_t_sf(t, df)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TTestResult {
    pub mean_1: f64,
    pub mean_2: f64,
    pub std_1: f64,
    pub std_2: f64,
    pub n_1: usize,
    pub n_2: usize,
    pub t: f64,
    pub df: usize,
    /// One-sided P(T ≥ t) under the null; small values favor sample 1.
    pub p: f64,
}

/// Sample mean and (n−1) standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Two-sample pooled-variance t-test from summary statistics.
pub fn pooled_t_test_summary(mean_1: f64, std_1: f64, n_1: usize, mean_2: f64, std_2: f64, n_2: usize) -> Result<TTestResult> {
    if n_1 < 2 || n_2 < 2 {
        return Err(XensError::InvalidArgument(format!(
            "t-test needs at least 2 samples per group, got {n_1} and {n_2}"
        )));
    }
    let (a, b) = (n_1 as f64, n_2 as f64);
    let df = n_1 + n_2 - 2;
    let pooled = (((a - 1.0) * std_1 * std_1 + (b - 1.0) * std_2 * std_2) / df as f64).sqrt();
    let diff = mean_1 - mean_2;
    let t = if diff == 0.0 {
        0.0
    } else if pooled == 0.0 {
        diff.signum() * f64::INFINITY
    } else {
        diff / (pooled * (1.0 / a + 1.0 / b).sqrt())
    };
    Ok(TTestResult {
        mean_1,
        mean_2,
        std_1,
        std_2,
        n_1,
        n_2,
        t,
        df,
        p: student_t_sf(t, df as f64),
    })
}

/// Sample 1 is the candidate, sample 2 the baseline; positive t favors the candidate.
pub fn pooled_t_test(candidate: &[f64], baseline: &[f64]) -> Result<TTestResult> {
    if candidate.len() < 2 || baseline.len() < 2 {
        return Err(XensError::InvalidArgument(format!(
            "t-test needs at least 2 samples per group, got {} and {}",
            candidate.len(),
            baseline.len()
        )));
    }
    let (m1, s1) = mean_std(candidate);
    let (m2, s2) = mean_std(baseline);
    pooled_t_test_summary(m1, s1, candidate.len(), m2, s2, baseline.len())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub model_id: String,
    pub dataset_id: String,
    pub class_names: Vec<String>,
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
    /// Image ids aligned with `labels`, `predictions`, and `ppv`.
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub predictions: Vec<usize>,
    pub ppv: Vec<f64>,
    /// Run metadata written into the report header.
    pub provenance: BTreeMap<String, String>,
}

const REPORT_KEYS: [&str; 8] = ["format", "model_id", "dataset_id", "classes", "n", "accuracy", "mcc", "ppv_file"];

impl EvalReport {
    pub fn from_probabilities<F: Scalar>(
        model_id: &str,
        dataset_id: &str,
        class_names: &[String],
        ids: Vec<String>,
        labels: Vec<usize>,
        probs: &Tensor<F>,
    ) -> Result<Self> {
        let k = class_names.len();
        if probs.row_len() != k {
            return Err(XensError::Shape(format!("{} probability columns for {k} classes", probs.row_len())));
        }
        if ids.len() != labels.len() {
            return Err(XensError::Shape(format!("{} ids for {} labels", ids.len(), labels.len())));
        }
        let predictions = argmax_rows(probs);
        let confusion = confusion_matrix(&predictions, &labels, k)?;
        let metrics = classification_metrics(&confusion)?;
        let ppv = ppv_true_class(probs, &labels)?;
        Ok(EvalReport {
            model_id: model_id.to_string(),
            dataset_id: dataset_id.to_string(),
            class_names: class_names.to_vec(),
            confusion,
            metrics,
            ids,
            labels,
            predictions,
            ppv,
            provenance: BTreeMap::new(),
        })
    }

    /// Named scalar metrics in display order: per class precision, recall,
    /// F1, then accuracy and MCC.
    pub fn metric_values(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for (name, m) in self.class_names.iter().zip(&self.metrics.per_class) {
            out.push((format!("{name}.precision"), m.precision));
            out.push((format!("{name}.recall"), m.recall));
            out.push((format!("{name}.f1"), m.f1));
        }
        out.push(("accuracy".into(), self.metrics.accuracy));
        out.push(("mcc".into(), self.metrics.mcc));
        out
    }

    fn summary_table(&self) -> Table {
        let mut cols = vec!["class".to_string(), "precision".into(), "recall".into(), "f1".into()];
        cols.extend(self.class_names.iter().map(|c| format!("predicted.{c}")));
        let col_refs: Vec<&str> = cols.iter().map(String::as_str).collect();
        let mut t = Table::new(&col_refs);
        t.push_meta("format", "xens-report-v1");
        t.push_meta("model_id", &self.model_id);
        t.push_meta("dataset_id", &self.dataset_id);
        t.push_meta("classes", self.class_names.join(","));
        t.push_meta("n", self.labels.len());
        t.push_meta("accuracy", self.metrics.accuracy);
        t.push_meta("mcc", self.metrics.mcc);
        t.push_meta("ppv_file", PPV_FILE);
        for (k, v) in &self.provenance {
            t.push_meta(k, v);
        }
        for (c, name) in self.class_names.iter().enumerate() {
            let m = self.metrics.per_class[c];
            let mut row = vec![name.clone(), m.precision.to_string(), m.recall.to_string(), m.f1.to_string()];
            row.extend(self.confusion[c].iter().map(u64::to_string));
            t.rows.push(row);
        }
        t
    }

    fn ppv_table(&self) -> Table {
        let mut t = Table::new(&["id", "label", "predicted", "ppv"]);
        t.push_meta("format", "xens-ppv-v1");
        t.push_meta("model_id", &self.model_id);
        for i in 0..self.ids.len() {
            t.rows.push(vec![
                self.ids[i].clone(),
                self.labels[i].to_string(),
                self.predictions[i].to_string(),
                self.ppv[i].to_string(),
            ]);
        }
        t
    }

    /// Writes `report.tsv` and `ppv.tsv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| XensError::io(dir, e))?;
        self.summary_table().write(&dir.join(REPORT_FILE))?;
        self.ppv_table().write(&dir.join(PPV_FILE))
    }

    /// Reads a report directory (or the `report.tsv` inside it).
    pub fn read(path: &Path) -> Result<Self> {
        let dir = if path.is_dir() {
            path.to_path_buf()
        } else {
            path.parent().map(Path::to_path_buf).unwrap_or_default()
        };
        let report_path = dir.join(REPORT_FILE);
        let ctx = report_path.display().to_string();
        let t = Table::read(&report_path)?;
        let class_names: Vec<String> = t.require_meta("classes", &ctx)?.split(',').map(str::to_string).collect();
        let k = class_names.len();
        let mut confusion = vec![vec![0u64; k]; k];
        if t.rows.len() != k {
            return Err(XensError::parse(&ctx, format!("expected {k} class rows")));
        }
        for (c, row) in t.rows.iter().enumerate() {
            for (j, cell) in row[4..].iter().enumerate().take(k) {
                confusion[c][j] = cell
                    .parse()
                    .map_err(|_| XensError::parse(&ctx, format!("bad count {cell:?}")))?;
            }
        }
        let ppv_path = dir.join(t.meta("ppv_file").unwrap_or(PPV_FILE));
        let pctx = ppv_path.display().to_string();
        let p = Table::read(&ppv_path)?;
        let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| XensError::parse(&pctx, format!("bad number {s:?}"))) };
        let idx = |s: &str| -> Result<usize> { s.parse().map_err(|_| XensError::parse(&pctx, format!("bad index {s:?}"))) };
        let (mut ids, mut labels, mut predictions, mut ppv) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for row in &p.rows {
            ids.push(row[0].clone());
            labels.push(idx(&row[1])?);
            predictions.push(idx(&row[2])?);
            ppv.push(num(&row[3])?);
        }
        let recount = confusion_matrix(&predictions, &labels, k)?;
        if recount != confusion {
            return Err(XensError::parse(&ctx, "confusion matrix disagrees with per-image predictions"));
        }
        Ok(EvalReport {
            model_id: t.require_meta("model_id", &ctx)?.to_string(),
            dataset_id: t.require_meta("dataset_id", &ctx)?.to_string(),
            metrics: classification_metrics(&confusion)?,
            class_names,
            confusion,
            ids,
            labels,
            predictions,
            ppv,
            provenance: t
                .preamble
                .iter()
                .filter(|(k, _)| !REPORT_KEYS.contains(&k.as_str()))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        })
    }
}

pub const REPORT_FILE: &str = "report.tsv";
pub const PPV_FILE: &str = "ppv.tsv";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldAggregate {
    pub model_id: String,
    pub class_names: Vec<String>,
    pub folds: usize,
    /// Same order as [`EvalReport::metric_values`].
    pub metrics: Vec<(String, MeanStd)>,
}

impl FoldAggregate {
    pub fn get(&self, name: &str) -> Option<MeanStd> {
        self.metrics.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

/// Mean and (n−1) standard deviation of every metric across fold reports.
/// A single fold yields std 0.
pub fn aggregate_folds(reports: &[EvalReport]) -> Result<FoldAggregate> {
    if reports.is_empty() {
        return Err(XensError::InvalidArgument("aggregation needs at least one fold report".into()));
    }
    let first = &reports[0];
    if let Some(r) = reports.iter().find(|r| r.class_names != first.class_names) {
        return Err(XensError::InvalidArgument(format!(
            "class sets differ across folds: {:?} vs {:?}",
            first.class_names, r.class_names
        )));
    }
    let per_fold: Vec<Vec<(String, f64)>> = reports.iter().map(EvalReport::metric_values).collect();
    let metrics = per_fold[0]
        .iter()
        .enumerate()
        .map(|(i, (name, _))| {
            let xs: Vec<f64> = per_fold.iter().map(|f| f[i].1).collect();
            let (mean, std) = mean_std(&xs);
            (name.clone(), MeanStd { mean, std })
        })
        .collect();
    Ok(FoldAggregate {
        model_id: first.model_id.clone(),
        class_names: first.class_names.clone(),
        folds: reports.len(),
        metrics,
    })
}

/// Per-image PPV averaged over fold models evaluated on the same images.
pub fn mean_ppv(reports: &[EvalReport]) -> Result<Vec<f64>> {
    let first = reports
        .first()
        .ok_or_else(|| XensError::InvalidArgument("no reports to average".into()))?;
    if let Some(r) = reports.iter().find(|r| r.ids != first.ids) {
        return Err(XensError::InvalidArgument(format!(
            "report {} covers different images than {}",
            r.model_id, first.model_id
        )));
    }
    let n = reports.len() as f64;
    Ok((0..first.ppv.len())
        .map(|i| reports.iter().map(|r| r.ppv[i]).sum::<f64>() / n)
        .collect())
}

/// `mean±std` with the mean to three decimals and the spread without its
/// leading zero: `0.955±.01`. A zero spread prints the mean alone.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    let m = format!("{mean:.3}");
    if std == 0.0 {
        return m;
    }
    let s = if std < 0.01 { format!("{std:.3}") } else { format!("{std:.2}") };
    let s = s.strip_prefix('0').unwrap_or(&s);
    format!("{m}±{s}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_at_integers() {
        for n in 1..15u32 {
            let fact: f64 = (1..n).map(f64::from).product();
            assert!((ln_gamma(n as f64) - fact.ln()).abs() < 1e-11, "n = {n}");
        }
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-12);
    }

    #[test]
    fn t_tail_at_one_df_is_cauchy() {
        for t in [0.3, 1.0, 2.5, 10.0] {
            let expect = 0.5 - (t as f64).atan() / std::f64::consts::PI;
            assert!((student_t_sf(t, 1.0) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn report_format() {
        assert_eq!(format_mean_std(0.955, 0.012), "0.955±.01");
        assert_eq!(format_mean_std(0.9, 0.0), "0.900");
        assert_eq!(format_mean_std(0.9, 0.004), "0.900±.004");
    }
}
