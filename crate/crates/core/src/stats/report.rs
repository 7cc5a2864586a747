//! `stats.json` plus one flat CSV per figure-style table.

use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CorrelationResult, KSweep, NetAdvantageMatrix, Summary, TopicConditionAccuracy};
use crate::digest::{write_atomic, write_json_atomic};
use crate::selector::Style;

pub const STATS_JSON: &str = "stats.json";
pub const BOXPLOT_CSV: &str = "boxplot.csv";
pub const NET_ADVANTAGE_CSV: &str = "net_advantage.csv";
pub const K_SWEEP_CSV: &str = "k_sweep.csv";
pub const CORRELATIONS_CSV: &str = "correlations.csv";
pub const PER_TOPIC_CSV: &str = "per_topic.csv";

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub condition: String,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleMatrix {
    pub style: Style,
    pub matrix: NetAdvantageMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleSweep {
    pub style: Style,
    pub sweep: KSweep,
}

/// Input accuracy (mean over the selected real images) against output
/// accuracy (mean over generated samples) across topics, for one k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KCorrelation {
    pub k: usize,
    pub style: Style,
    pub result: Option<CorrelationResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub topics: Vec<String>,
    pub per_topic: Vec<TopicConditionAccuracy>,
    pub conditions: Vec<ConditionSummary>,
    pub net_advantage: Vec<StyleMatrix>,
    pub k_sweep: Vec<StyleSweep>,
    pub input_output: Vec<KCorrelation>,
    pub popularity: Option<CorrelationResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub popularity_error: Option<String>,
    /// Units that were skipped or excluded, with reasons.
    pub notes: Vec<String>,
}

fn pct(v: f64) -> String {
    format!("{:.4}", v * 100.0)
}

fn opt_pct(v: Option<f64>) -> String {
    v.map(pct).unwrap_or_default()
}

fn csv_bytes(header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| ReportError::Io(e.into_error()))
}

/// Writes every report file into `dir`. Output holds no timestamps, so
/// equal inputs give byte-identical files.
pub fn write_report(dir: &Path, report: &EvaluationReport) -> Result<(), ReportError> {
    write_json_atomic(&dir.join(STATS_JSON), report)?;

    let rows = report
        .conditions
        .iter()
        .map(|c| {
            let s = &c.summary;
            vec![
                c.condition.clone(),
                s.n.to_string(),
                pct(s.mean),
                pct(s.median),
                opt_pct(s.std),
                pct(s.min),
                pct(s.q1),
                pct(s.q3),
                pct(s.max),
            ]
        })
        .collect();
    let header = ["condition", "n", "mean_pct", "median_pct", "std_pct", "min_pct", "q1_pct", "q3_pct", "max_pct"];
    write_atomic(&dir.join(BOXPLOT_CSV), &csv_bytes(&header, rows)?)?;

    let mut rows = Vec::new();
    for sm in &report.net_advantage {
        let m = &sm.matrix;
        for (i, row) in m.conditions.iter().enumerate() {
            for (j, col) in m.conditions.iter().enumerate() {
                rows.push(vec![
                    sm.style.as_str().to_string(),
                    row.clone(),
                    col.clone(),
                    m.cells[i][j].to_string(),
                    m.compared[i][j].to_string(),
                    m.excluded[i][j].to_string(),
                ]);
            }
        }
    }
    let header = ["style", "row", "col", "net_advantage", "compared", "excluded"];
    write_atomic(&dir.join(NET_ADVANTAGE_CSV), &csv_bytes(&header, rows)?)?;

    let mut rows = Vec::new();
    for ss in &report.k_sweep {
        for p in &ss.sweep.points {
            rows.push(vec![
                ss.style.as_str().to_string(),
                p.k.to_string(),
                p.n.to_string(),
                pct(p.mean),
                opt_pct(p.ci95.map(|c| c.0)),
                opt_pct(p.ci95.map(|c| c.1)),
            ]);
        }
    }
    let header = ["style", "k", "n", "mean_pct", "ci95_low_pct", "ci95_high_pct"];
    write_atomic(&dir.join(K_SWEEP_CSV), &csv_bytes(&header, rows)?)?;

    let corr_row = |analysis: &str, style: &str, k: String, c: &CorrelationResult| {
        vec![
            analysis.to_string(),
            style.to_string(),
            k,
            c.n.to_string(),
            c.r.to_string(),
            c.r_squared.to_string(),
            c.slope.to_string(),
            c.intercept.to_string(),
            c.p_value.to_string(),
        ]
    };
    let mut rows = Vec::new();
    for kc in &report.input_output {
        if let Some(c) = &kc.result {
            rows.push(corr_row("input_output", kc.style.as_str(), kc.k.to_string(), c));
        }
    }
    if let Some(c) = &report.popularity {
        rows.push(corr_row("popularity", "", String::new(), c));
    }
    let header = ["analysis", "style", "k", "n", "r", "r_squared", "slope", "intercept", "p_value"];
    write_atomic(&dir.join(CORRELATIONS_CSV), &csv_bytes(&header, rows)?)?;

    let rows = report
        .per_topic
        .iter()
        .map(|t| {
            vec![
                t.topic_id.clone(),
                t.condition.label(),
                t.per_sample_accuracies.len().to_string(),
                pct(t.mean_accuracy),
            ]
        })
        .collect();
    write_atomic(
        &dir.join(PER_TOPIC_CSV),
        &csv_bytes(&["topic", "condition", "samples", "mean_pct"], rows)?,
    )?;
    Ok(())
}
