//! Assembles the evaluation report from per-topic results.

use std::collections::BTreeMap;

use super::{Pipeline, PipelineConfig, UnitStatus};
use crate::corpus::Topic;
use crate::digest::read_json;
use crate::rng::derive_seed;
use crate::selector::{Condition, ConditionKind, Style};
use crate::stats::{
    aggregate, correlate, k_sweep, net_advantage, popularity_correlation, sample_topics, AccuracyTable,
    ConditionSummary, EvaluationReport, KCorrelation, StatsError, StyleMatrix, StyleSweep, TopicConditionAccuracy,
};

/// Everything the report needs, keyed by topic id.
#[derive(Debug, Clone, Default)]
pub struct ReportData {
    pub topics: Vec<String>,
    /// (topic, condition label) -> accuracy
    pub evals: BTreeMap<(String, String), TopicConditionAccuracy>,
    /// (topic, k) -> mean accuracy of the real images a top-k LoRA trained on
    pub input_accuracy: BTreeMap<(String, usize), f64>,
    /// topic -> images listed by the source
    pub available: BTreeMap<String, u64>,
    pub notes: Vec<String>,
}

fn column(data: &ReportData, cond: &Condition) -> Vec<(String, f64)> {
    data.topics
        .iter()
        .filter_map(|t| {
            data.evals
                .get(&(t.clone(), cond.label()))
                .map(|e| (t.clone(), e.mean_accuracy))
        })
        .collect()
}

pub fn build_report(cfg: &PipelineConfig, data: &ReportData) -> Result<EvaluationReport, StatsError> {
    let mut report = EvaluationReport {
        topics: data.topics.clone(),
        notes: data.notes.clone(),
        ..Default::default()
    };
    for t in &data.topics {
        for c in &cfg.conditions {
            if let Some(e) = data.evals.get(&(t.clone(), c.label())) {
                report.per_topic.push(e.clone());
            }
        }
    }
    for c in &cfg.conditions {
        let values: Vec<f64> = column(data, c).into_iter().map(|(_, v)| v).collect();
        report.conditions.push(ConditionSummary {
            condition: c.label(),
            summary: aggregate(&c.label(), &values)?,
        });
    }

    for style in cfg.styles() {
        let conds: Vec<&Condition> = cfg.conditions.iter().filter(|c| c.style == style).collect();
        if conds.len() >= 2 {
            let mut table: AccuracyTable<String> = BTreeMap::new();
            for c in &conds {
                for (t, v) in column(data, c) {
                    table.entry(t).or_default().insert(c.label(), v);
                }
            }
            let labels: Vec<String> = conds.iter().map(|c| c.label()).collect();
            report.net_advantage.push(StyleMatrix {
                style,
                matrix: net_advantage(&table, &labels)?,
            });
        }

        let ks: Vec<usize> = cfg
            .ks
            .iter()
            .copied()
            .filter(|&k| cfg.has(ConditionKind::QZLoRATopK, k, style))
            .collect();
        if !ks.is_empty() {
            let subset = sample_topics(
                &data.topics,
                cfg.k_sweep_topics,
                derive_seed(&["k-sweep", &cfg.seed.to_string()]),
            );
            let mut table: AccuracyTable<usize> = BTreeMap::new();
            for &k in &ks {
                let c = Condition::new(ConditionKind::QZLoRATopK, k, style).expect("k >= 1");
                for (t, v) in column(data, &c) {
                    table.entry(t).or_default().insert(k, v);
                }
            }
            report.k_sweep.push(StyleSweep {
                style,
                sweep: k_sweep(&table, &ks, &subset)?,
            });
            for &k in &ks {
                let c = Condition::new(ConditionKind::QZLoRATopK, k, style).expect("k >= 1");
                let (mut xs, mut ys) = (Vec::new(), Vec::new());
                for (t, y) in column(data, &c) {
                    if let Some(x) = data.input_accuracy.get(&(t, k)) {
                        xs.push(*x);
                        ys.push(y);
                    }
                }
                let (result, error) = match correlate(&xs, &ys) {
                    Ok(r) => (Some(r), None),
                    Err(e) => (None, Some(e.to_string())),
                };
                report.input_output.push(KCorrelation { k, style, result, error });
            }
        }
    }

    let baseline = cfg
        .conditions
        .iter()
        .find(|c| c.kind == ConditionKind::NoLoRA && c.style == Style::Realistic)
        .or_else(|| cfg.conditions.iter().find(|c| c.kind == ConditionKind::NoLoRA));
    if let Some(b) = baseline {
        let (mut acc, mut counts) = (Vec::new(), Vec::new());
        for (t, v) in column(data, b) {
            if let Some(n) = data.available.get(&t) {
                acc.push(v);
                counts.push(*n);
            }
        }
        match popularity_correlation(&acc, &counts) {
            Ok(r) => report.popularity = Some(r),
            Err(e) => report.popularity_error = Some(e.to_string()),
        }
    }
    Ok(report)
}

impl Pipeline {
    pub(crate) fn report_data(&self, topics: &[Topic]) -> Result<ReportData, String> {
        let mut data = ReportData {
            topics: topics.iter().map(|t| t.topic_id.clone()).collect(),
            ..Default::default()
        };
        let corpus = self.corpus_store();
        for t in topics {
            let id = &t.topic_id;
            for c in &self.config.conditions {
                let e: TopicConditionAccuracy = read_json(&self.eval_path(id, c)).map_err(|e| format!("{id} {c}: {e}"))?;
                data.evals.insert((id.clone(), c.label()), e);
            }
            let manifest = corpus.read_manifest(id).map_err(|e| e.to_string())?;
            data.available.insert(id.clone(), manifest.available_count as u64);
            let records = self.load_rankings(id).map_err(|e| e.to_string())?;
            let by_id: BTreeMap<&str, f64> = records.iter().map(|r| (r.subject_id.as_str(), r.accuracy)).collect();
            for c in self.config.conditions.iter().filter(|c| c.kind == ConditionKind::QZLoRATopK) {
                if data.input_accuracy.contains_key(&(id.clone(), c.k)) {
                    continue;
                }
                let sel = self.selection_store().load(id, c).map_err(|e| e.to_string())?;
                let vals: Vec<f64> = sel.image_ids.iter().filter_map(|i| by_id.get(i.as_str()).copied()).collect();
                if !vals.is_empty() {
                    data.input_accuracy
                        .insert((id.clone(), c.k), vals.iter().sum::<f64>() / vals.len() as f64);
                }
            }
        }
        // notes carried over from earlier stages, e.g. short selections
        let state = self.state();
        for (key, rec) in &state.units {
            let topic = key.split('/').nth(1).unwrap_or_default();
            if key.starts_with("select/") && data.topics.iter().any(|t| t == topic) {
                if let (UnitStatus::Done, Some(n)) = (&rec.status, &rec.note) {
                    data.notes.push(format!("{key}: {n}"));
                }
            }
        }
        Ok(data)
    }

    pub fn build_report(&self, topics: &[Topic]) -> Result<EvaluationReport, String> {
        let data = self.report_data(topics)?;
        build_report(&self.config, &data).map_err(|e| e.to_string())
    }
}
