//! Cross-validated summary tables: per-model metrics as `mean±std` and the
//! PPV t-test table against the baseline and the three-member ensemble.

use std::collections::BTreeMap;

use xens_core::evaluation::{format_mean_std, mean_std, pooled_t_test, FoldAggregate, TTestResult};
use xens_core::pipeline::{BASELINE, MAIN_MODELS};
use xens_core::XensError;

use crate::error::CliResult;

/// One model's fold aggregate and its per-image PPVs averaged over folds.
#[derive(Clone, Debug)]
pub struct ModelSummary {
    pub aggregate: FoldAggregate,
    pub ppv: Vec<f64>,
}

pub const REFERENCE: &str = "E_abc";

#[derive(Clone, Debug)]
pub struct TTestRow {
    pub model: String,
    pub ppv_mean: f64,
    pub ppv_std: f64,
    /// `t(model, A)`; absent for A itself.
    pub vs_baseline: Option<TTestResult>,
    /// `t(E_abc, model)`; absent for E_abc itself.
    pub vs_reference: Option<TTestResult>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedReport {
    pub summary_tsv: String,
    pub summary_txt: String,
    pub ttest_tsv: String,
    pub ttest_txt: String,
}

pub fn ttest_rows(models: &BTreeMap<String, ModelSummary>) -> CliResult<Vec<TTestRow>> {
    let get = |name: &str| {
        models
            .get(name)
            .ok_or_else(|| XensError::Missing(format!("report for model {name}")))
    };
    let base = get(BASELINE)?;
    let reference = get(REFERENCE)?;
    MAIN_MODELS
        .iter()
        .map(|&name| {
            let m = get(name)?;
            let (ppv_mean, ppv_std) = mean_std(&m.ppv);
            Ok(TTestRow {
                model: name.to_string(),
                ppv_mean,
                ppv_std,
                vs_baseline: (name != BASELINE).then(|| pooled_t_test(&m.ppv, &base.ppv)).transpose()?,
                vs_reference: (name != REFERENCE).then(|| pooled_t_test(&reference.ppv, &m.ppv)).transpose()?,
            })
        })
        .collect()
}

fn format_p(p: f64) -> String {
    if p >= 1e-5 {
        format!("{p:.5}")
    } else {
        format!("{p:.1e}")
    }
}

/// Pads every column to its widest cell.
pub fn align(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, s)| format!("{s}{}", " ".repeat(widths[c] - s.chars().count())))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

fn tsv(rows: &[Vec<String>]) -> String {
    rows.iter().map(|r| r.join("\t") + "\n").collect()
}

/// `header` lines are prepended as `# key: value` comments to both renderings.
pub fn render_report(models: &BTreeMap<String, ModelSummary>, header: &[(String, String)]) -> CliResult<RenderedReport> {
    let missing: Vec<&str> = MAIN_MODELS.iter().copied().filter(|m| !models.contains_key(*m)).collect();
    if !missing.is_empty() {
        return Err(XensError::Missing(format!("reports for model(s) {}", missing.join(", "))).into());
    }
    let first = &models[BASELINE].aggregate;
    let mut summary = vec![{
        let mut h = vec!["model".to_string()];
        h.extend(first.metrics.iter().map(|(n, _)| n.clone()));
        h
    }];
    for name in MAIN_MODELS {
        let agg = &models[name].aggregate;
        if agg.class_names != first.class_names {
            return Err(XensError::InvalidArgument(format!("model {name} was evaluated on different classes")).into());
        }
        let mut row = vec![name.to_string()];
        row.extend(agg.metrics.iter().map(|(_, v)| format_mean_std(v.mean, v.std)));
        summary.push(row);
    }

    let rows = ttest_rows(models)?;
    let mut ttab = vec![vec![
        "model".to_string(),
        "ppv".into(),
        format!("t_vs_{BASELINE}"),
        format!("p_vs_{BASELINE}"),
        format!("t_vs_{REFERENCE}"),
        format!("p_vs_{REFERENCE}"),
        "n".into(),
    ]];
    for r in &rows {
        let cell = |t: &Option<TTestResult>| match t {
            Some(t) => (format!("{:.3}", t.t), format_p(t.p)),
            None => ("-".to_string(), "-".to_string()),
        };
        let (ta, pa) = cell(&r.vs_baseline);
        let (te, pe) = cell(&r.vs_reference);
        ttab.push(vec![
            r.model.clone(),
            format_mean_std(r.ppv_mean, r.ppv_std),
            ta,
            pa,
            te,
            pe,
            models[&r.model].ppv.len().to_string(),
        ]);
    }

    let head: String = header.iter().map(|(k, v)| format!("# {k}: {v}\n")).collect();
    let spread = format!("# values are mean±sample std over {} folds\n", first.folds);
    let tnote = "# one-sided pooled-variance t-test on per-image PPV averaged over folds\n";
    Ok(RenderedReport {
        summary_tsv: format!("{head}{spread}{}", tsv(&summary)),
        summary_txt: format!("{head}{spread}{}", align(&summary)),
        ttest_tsv: format!("{head}{tnote}{}", tsv(&ttab)),
        ttest_txt: format!("{head}{tnote}{}", align(&ttab)),
    })
}
