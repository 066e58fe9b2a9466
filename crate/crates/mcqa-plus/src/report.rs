//! Report emission: markdown tables (one section per metric family) and a
//! single wide RFC-4180 CSV table, one row per (model, dataset).

use std::collections::BTreeMap;
use std::io::Write;

use thiserror::Error;

use crate::scoring::{Metrics, METRICS_SCHEMA_VERSION};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("metrics schema version {0} not supported (this build reads {METRICS_SCHEMA_VERSION})")]
    SchemaMismatch(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Csv,
}

/// One report row: metrics files sharing a (model, dataset) key are merged,
/// so a full-profile run and an x1 run fill different columns of the same
/// row.
#[derive(Debug, Default, Clone)]
struct Row {
    per_setting: BTreeMap<String, f64>,
    mcqa: Option<f64>,
    mcqa_plus: Option<f64>,
    mcqa_plus_hard: Option<f64>,
    mcqa_plus_x1: Option<f64>,
    confidence: Option<crate::scoring::ConfidenceReport>,
    multi_select: Option<crate::scoring::MultiSelectReport>,
    no_answer_ratio: Option<f64>,
    replacement_recovery: Option<f64>,
    unparseable: usize,
    records: usize,
    digests: Vec<String>,
}

fn merge_rows(all: &[Metrics]) -> Result<BTreeMap<(String, String), Row>, ReportError> {
    let mut rows: BTreeMap<(String, String), Row> = BTreeMap::new();
    for metrics in all {
        if metrics.schema_version != METRICS_SCHEMA_VERSION {
            return Err(ReportError::SchemaMismatch(metrics.schema_version));
        }
        let key = (metrics.model_id.clone(), metrics.dataset.clone());
        let row = rows.entry(key).or_default();
        for (setting, acc) in &metrics.per_setting_accuracy {
            row.per_setting.insert(setting.clone(), *acc);
        }
        row.mcqa = row.mcqa.or(metrics.mcqa);
        row.mcqa_plus = row.mcqa_plus.or(metrics.mcqa_plus);
        row.mcqa_plus_hard = row.mcqa_plus_hard.or(metrics.mcqa_plus_hard);
        row.mcqa_plus_x1 = row.mcqa_plus_x1.or(metrics.mcqa_plus_x1);
        if row.confidence.is_none() {
            row.confidence = metrics.confidence.clone();
        }
        if row.multi_select.is_none() {
            row.multi_select = metrics.multi_select.clone();
        }
        row.no_answer_ratio = row.no_answer_ratio.or(metrics.no_answer_ratio);
        row.replacement_recovery = row.replacement_recovery.or(metrics.replacement_recovery);
        row.unparseable += metrics.counts.unparseable;
        row.records += metrics.counts.records;
        if let Some(digest) = &metrics.run_config_digest {
            if !row.digests.contains(digest) {
                row.digests.push(digest.clone());
            }
        }
    }
    Ok(rows)
}

fn pct(value: Option<f64>) -> String {
    value
        .map(|v| format!("{:.1}", v * 100.0))
        .unwrap_or_else(|| "-".to_string())
}

fn num(value: Option<f64>) -> String {
    value
        .map(|v| format!("{v:.3}"))
        .unwrap_or_else(|| "-".to_string())
}

const SETTING_CODES: [&str; 6] = ["a", "b", "c", "d", "e", "f"];

/// Write the markdown report: accuracy per setting, the aggregate
/// comparison, confidence, and the diagnostic metrics.
pub fn write_markdown(all: &[Metrics], mut writer: impl Write) -> Result<(), ReportError> {
    let rows = merge_rows(all)?;

    writeln!(writer, "# Evaluation report\n")?;
    writeln!(writer, "## Accuracy per setting (%)\n")?;
    writeln!(writer, "| Model | Dataset | a | b | c | d | e | f |")?;
    writeln!(writer, "|---|---|---:|---:|---:|---:|---:|---:|")?;
    for ((model, dataset), row) in &rows {
        let cells: Vec<String> = SETTING_CODES
            .iter()
            .map(|code| pct(row.per_setting.get(*code).copied()))
            .collect();
        writeln!(writer, "| {model} | {dataset} | {} |", cells.join(" | "))?;
    }

    writeln!(writer, "\n## Aggregate comparison (%)\n")?;
    writeln!(
        writer,
        "| Model | Dataset | MCQA | MCQA+ | MCQA+hard | MCQA+(x1) |"
    )?;
    writeln!(writer, "|---|---|---:|---:|---:|---:|")?;
    for ((model, dataset), row) in &rows {
        writeln!(
            writer,
            "| {model} | {dataset} | {} | {} | {} | {} |",
            pct(row.mcqa),
            pct(row.mcqa_plus),
            pct(row.mcqa_plus_hard),
            pct(row.mcqa_plus_x1),
        )?;
    }

    writeln!(writer, "\n## Confidence\n")?;
    writeln!(
        writer,
        "| Model | Dataset | C_correct | C_incorrect* | relative (%) | N | M | estimator |"
    )?;
    writeln!(writer, "|---|---|---:|---:|---:|---:|---:|---|")?;
    for ((model, dataset), row) in &rows {
        match &row.confidence {
            Some(c) => writeln!(
                writer,
                "| {model} | {dataset} | {:.3} | {:.3} | {} | {} | {} | {:?} |",
                c.c_correct,
                c.c_incorrect_star,
                c.relative_percent
                    .map(|r| format!("{r:.1}"))
                    .unwrap_or_else(|| "-".to_string()),
                c.n_correct,
                c.m_incorrect,
                c.estimator,
            )?,
            None => writeln!(writer, "| {model} | {dataset} | - | - | - | - | - | - |")?,
        }
    }

    writeln!(writer, "\n## Diagnostics\n")?;
    writeln!(
        writer,
        "| Model | Dataset | no-answer ratio | recall (gold) | recall (misleading) | recovery | unparseable | records |"
    )?;
    writeln!(writer, "|---|---|---:|---:|---:|---:|---:|---:|")?;
    for ((model, dataset), row) in &rows {
        let (gold, misleading) = row
            .multi_select
            .as_ref()
            .map(|m| (Some(m.recall_correct), Some(m.recall_misleading)))
            .unwrap_or((None, None));
        writeln!(
            writer,
            "| {model} | {dataset} | {} | {} | {} | {} | {} | {} |",
            num(row.no_answer_ratio),
            num(gold),
            num(misleading),
            num(row.replacement_recovery),
            row.unparseable,
            row.records,
        )?;
    }

    writeln!(writer, "\n## Provenance\n")?;
    for ((model, dataset), row) in &rows {
        let digests = if row.digests.is_empty() {
            "-".to_string()
        } else {
            row.digests.join(", ")
        };
        writeln!(writer, "- {model} / {dataset}: run config {digests}")?;
    }
    Ok(())
}

/// Write the CSV report: a single wide table, one row per (model, dataset).
pub fn write_csv(all: &[Metrics], writer: impl Write) -> Result<(), ReportError> {
    let rows = merge_rows(all)?;
    let mut csv = csv::Writer::from_writer(writer);
    let mut header = vec!["model".to_string(), "dataset".to_string()];
    header.extend(SETTING_CODES.iter().map(|c| format!("acc_{c}")));
    header.extend(
        [
            "mcqa",
            "mcqa_plus",
            "mcqa_plus_hard",
            "mcqa_plus_x1",
            "c_correct",
            "c_incorrect_star",
            "relative_percent",
            "n_correct",
            "m_incorrect",
            "no_answer_ratio",
            "recall_correct",
            "recall_misleading",
            "replacement_recovery",
            "unparseable",
            "records",
            "run_config_digest",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    csv.write_record(&header)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for ((model, dataset), row) in &rows {
        let mut record = vec![model.clone(), dataset.clone()];
        for code in SETTING_CODES {
            record.push(opt(row.per_setting.get(code).copied()));
        }
        record.push(opt(row.mcqa));
        record.push(opt(row.mcqa_plus));
        record.push(opt(row.mcqa_plus_hard));
        record.push(opt(row.mcqa_plus_x1));
        match &row.confidence {
            Some(c) => {
                record.push(c.c_correct.to_string());
                record.push(c.c_incorrect_star.to_string());
                record.push(opt(c.relative_percent));
                record.push(c.n_correct.to_string());
                record.push(c.m_incorrect.to_string());
            }
            None => record.extend(std::iter::repeat_n(String::new(), 5)),
        }
        record.push(opt(row.no_answer_ratio));
        match &row.multi_select {
            Some(m) => {
                record.push(m.recall_correct.to_string());
                record.push(m.recall_misleading.to_string());
            }
            None => record.extend(std::iter::repeat_n(String::new(), 2)),
        }
        record.push(opt(row.replacement_recovery));
        record.push(row.unparseable.to_string());
        record.push(row.records.to_string());
        record.push(row.digests.join("; "));
        csv.write_record(&record)?;
    }
    csv.flush()?;
    Ok(())
}
