//! Condition aggregates, pairwise net advantage, k-sweeps and correlations.
//!
//! Accuracies are fractions in `[0, 1]` throughout; percentages only appear
//! in the CSV tables written by [`report`]. Sums run in a fixed order so
//! results do not depend on how the inputs were produced.

mod report;
pub mod special;

pub use report::{
    write_report, ConditionSummary, EvaluationReport, KCorrelation, ReportError, StyleMatrix, StyleSweep, BOXPLOT_CSV,
    CORRELATIONS_CSV, PER_TOPIC_CSV,
    K_SWEEP_CSV, NET_ADVANTAGE_CSV, STATS_JSON,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::rng::SplitMix64;
use crate::selector::Condition;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("no values for {0}")]
    EmptyGroup(String),
    #[error("no topic has both {row} and {col}")]
    NoComparableTopics { row: String, col: String },
    #[error("no accuracies for k = {0}")]
    MissingKColumn(usize),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

/// topic id -> column (condition label, k, ...) -> accuracy
pub type AccuracyTable<K> = BTreeMap<String, BTreeMap<K, f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicConditionAccuracy {
    pub topic_id: String,
    pub condition: Condition,
    pub per_sample_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
}

impl TopicConditionAccuracy {
    pub fn new(topic_id: &str, condition: Condition, per_sample_accuracies: Vec<f64>) -> Result<Self, StatsError> {
        if per_sample_accuracies.is_empty() {
            return Err(StatsError::EmptyGroup(format!("{topic_id} {condition}")));
        }
        let mean_accuracy = per_sample_accuracies.iter().sum::<f64>() / per_sample_accuracies.len() as f64;
        Ok(Self {
            topic_id: topic_id.into(),
            condition,
            per_sample_accuracies,
            mean_accuracy,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    /// Sample (n - 1) standard deviation; `None` for a single value.
    pub std: Option<f64>,
    pub min: f64,
    pub max: f64,
    /// Quartiles by linear interpolation between order statistics.
    pub q1: f64,
    pub q3: f64,
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Summary statistics of one group. Values are sorted before summing, so
/// the result is identical for any permutation of the input.
pub fn aggregate(label: &str, values: &[f64]) -> Result<Summary, StatsError> {
    if values.is_empty() {
        return Err(StatsError::EmptyGroup(label.into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let std = (n > 1).then(|| {
        let ss: f64 = sorted.iter().map(|v| (v - mean) * (v - mean)).sum();
        (ss / (n - 1) as f64).sqrt()
    });
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    Ok(Summary {
        n,
        mean,
        median,
        std,
        min: sorted[0],
        max: sorted[n - 1],
        q1: quantile_sorted(&sorted, 0.25),
        q3: quantile_sorted(&sorted, 0.75),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetAdvantageMatrix {
    pub conditions: Vec<String>,
    /// `cells[i][j]` = topics where condition i beats j minus topics where j beats i.
    pub cells: Vec<Vec<i64>>,
    /// Topics having both cells, per pair.
    pub compared: Vec<Vec<usize>>,
    /// Topics dropped from a pair because one of its cells is missing.
    pub excluded: Vec<Vec<usize>>,
}

pub fn net_advantage(table: &AccuracyTable<String>, conditions: &[String]) -> Result<NetAdvantageMatrix, StatsError> {
    let m = conditions.len();
    let mut cells = vec![vec![0i64; m]; m];
    let mut compared = vec![vec![0usize; m]; m];
    let mut excluded = vec![vec![0usize; m]; m];
    for i in 0..m {
        for j in (i + 1)..m {
            let (mut net, mut both, mut dropped) = (0i64, 0usize, 0usize);
            for row in table.values() {
                match (row.get(&conditions[i]), row.get(&conditions[j])) {
                    (Some(a), Some(b)) => {
                        both += 1;
                        if a > b {
                            net += 1;
                        } else if b > a {
                            net -= 1;
                        }
                    }
                    _ => dropped += 1,
                }
            }
            if both == 0 {
                return Err(StatsError::NoComparableTopics {
                    row: conditions[i].clone(),
                    col: conditions[j].clone(),
                });
            }
            cells[i][j] = net;
            cells[j][i] = -net;
            compared[i][j] = both;
            compared[j][i] = both;
            excluded[i][j] = dropped;
            excluded[j][i] = dropped;
        }
    }
    Ok(NetAdvantageMatrix {
        conditions: conditions.to_vec(),
        cells,
        compared,
        excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KPoint {
    pub k: usize,
    pub n: usize,
    pub mean: f64,
    /// Two-sided 95% t-interval; `None` with fewer than two topics.
    pub ci95: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSweep {
    pub topics: Vec<String>,
    pub points: Vec<KPoint>,
}

/// Mean accuracy per k over `topics`. Topics lacking a k cell are left out of
/// that k only.
pub fn k_sweep(table: &AccuracyTable<usize>, ks: &[usize], topics: &[String]) -> Result<KSweep, StatsError> {
    let mut points = Vec::with_capacity(ks.len());
    for &k in ks {
        let values: Vec<f64> = topics
            .iter()
            .filter_map(|t| table.get(t).and_then(|row| row.get(&k)).copied())
            .collect();
        if values.is_empty() {
            return Err(StatsError::MissingKColumn(k));
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let ci95 = (n > 1).then(|| {
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
            let half = special::t_quantile(0.975, (n - 1) as f64) * (var / n as f64).sqrt();
            (mean - half, mean + half)
        });
        points.push(KPoint { k, n, mean, ci95 });
    }
    Ok(KSweep {
        topics: topics.to_vec(),
        points,
    })
}

/// Seeded subset of `size` topics (all of them when fewer exist), sorted.
pub fn sample_topics(topic_ids: &[String], size: usize, seed: u64) -> Vec<String> {
    let mut sorted = topic_ids.to_vec();
    sorted.sort();
    sorted.dedup();
    if size >= sorted.len() {
        return sorted;
    }
    let mut rng = SplitMix64::new(seed);
    let mut picked: Vec<String> = rng
        .sample_indices(sorted.len(), size)
        .into_iter()
        .map(|i| sorted[i].clone())
        .collect();
    picked.sort();
    picked
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub n: usize,
    pub r: f64,
    pub r_squared: f64,
    pub slope: f64,
    pub intercept: f64,
    /// Two-sided, t-distribution with n - 2 degrees of freedom.
    pub p_value: f64,
}

/// Pearson correlation and least-squares fit of `ys` on `xs`.
pub fn correlate(xs: &[f64], ys: &[f64]) -> Result<CorrelationResult, StatsError> {
    if xs.len() != ys.len() {
        return Err(StatsError::LengthMismatch(xs.len(), ys.len()));
    }
    let n = xs.len();
    if n < 3 {
        return Err(StatsError::DegenerateInput(format!("need at least 3 points, got {n}")));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(StatsError::DegenerateInput("non-finite value".into()));
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::DegenerateInput("constant series".into()));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let df = nf - 2.0;
    let p_value = if r.abs() >= 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        special::t_two_sided_p(t, df)
    };
    Ok(CorrelationResult {
        n,
        r,
        r_squared: r * r,
        slope,
        intercept,
        p_value,
    })
}

/// Correlation of baseline accuracy (y) against available image count (x).
pub fn popularity_correlation(baseline_acc: &[f64], image_counts: &[u64]) -> Result<CorrelationResult, StatsError> {
    let xs: Vec<f64> = image_counts.iter().map(|&c| c as f64).collect();
    correlate(&xs, baseline_acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_basics() {
        let s = aggregate("g", &[0.5, 0.6, 0.7]).unwrap();
        assert!((s.mean - 0.6).abs() < 1e-15);
        assert_eq!(s.median, 0.6);
        assert!((s.std.unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(aggregate("g", &[0.4]).unwrap().std, None);
        assert_eq!(aggregate("g", &[]), Err(StatsError::EmptyGroup("g".into())));
        let s = aggregate("g", &[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!((s.median, s.q1, s.q3), (2.5, 1.75, 3.25));
    }

    fn table(rows: &[(&str, &[(&str, f64)])]) -> AccuracyTable<String> {
        rows.iter()
            .map(|(t, cells)| (t.to_string(), cells.iter().map(|(c, v)| (c.to_string(), *v)).collect()))
            .collect()
    }

    #[test]
    fn net_advantage_examples() {
        let conds = vec!["a".to_string(), "b".to_string()];
        let t = table(&[
            ("t1", &[("a", 0.9), ("b", 0.1)]),
            ("t2", &[("a", 0.8), ("b", 0.2)]),
            ("t3", &[("a", 0.7), ("b", 0.3)]),
        ]);
        let m = net_advantage(&t, &conds).unwrap();
        assert_eq!(m.cells, vec![vec![0, 3], vec![-3, 0]]);
        let ties = table(&[("t1", &[("a", 0.5), ("b", 0.5)]), ("t2", &[("a", 0.2), ("b", 0.2)])]);
        assert_eq!(net_advantage(&ties, &conds).unwrap().cells, vec![vec![0, 0], vec![0, 0]]);
        let partial = table(&[("t1", &[("a", 0.5), ("b", 0.4)]), ("t2", &[("a", 0.2)])]);
        let m = net_advantage(&partial, &conds).unwrap();
        assert_eq!((m.cells[0][1], m.compared[0][1], m.excluded[0][1]), (1, 1, 1));
        let disjoint = table(&[("t1", &[("a", 0.5)]), ("t2", &[("b", 0.2)])]);
        assert!(matches!(
            net_advantage(&disjoint, &conds),
            Err(StatsError::NoComparableTopics { .. })
        ));
    }

    #[test]
    fn k_sweep_examples() {
        let topics: Vec<String> = (0..4).map(|i| format!("t{i}")).collect();
        let flat: AccuracyTable<usize> = topics
            .iter()
            .map(|t| (t.clone(), [2, 5].iter().map(|&k| (k, 0.5)).collect()))
            .collect();
        let s = k_sweep(&flat, &[2, 5], &topics).unwrap();
        for p in &s.points {
            assert_eq!(p.mean, 0.5);
            assert_eq!(p.ci95, Some((0.5, 0.5)));
        }
        assert_eq!(k_sweep(&flat, &[2, 10], &topics), Err(StatsError::MissingKColumn(10)));
    }

    #[test]
    fn correlate_examples() {
        let xs = [0.1, 0.4, 0.35, 0.8, 0.62];
        let c = correlate(&xs, &xs).unwrap();
        assert_eq!((c.r, c.slope, c.intercept, c.p_value), (1.0, 1.0, 0.0, 0.0));
        let ys: Vec<f64> = xs.iter().map(|x| -2.0 * x + 3.0).collect();
        let c = correlate(&xs, &ys).unwrap();
        assert!((c.r + 1.0).abs() < 1e-12 && (c.slope + 2.0).abs() < 1e-12 && (c.intercept - 3.0).abs() < 1e-12);
        assert!(matches!(correlate(&xs, &[1.0; 5]), Err(StatsError::DegenerateInput(_))));
        assert!(matches!(correlate(&xs[..2], &xs[..2]), Err(StatsError::DegenerateInput(_))));
        assert_eq!(correlate(&xs, &xs[..4]), Err(StatsError::LengthMismatch(5, 4)));
    }

    #[test]
    fn popularity_examples() {
        assert!(matches!(
            popularity_correlation(&[0.1, 0.2, 0.3], &[40, 40, 40]),
            Err(StatsError::DegenerateInput(_))
        ));
        let c = popularity_correlation(&[0.1, 0.2, 0.3], &[10, 20, 30]).unwrap();
        assert!((c.r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn topic_subset_is_seeded_and_sorted() {
        let ids: Vec<String> = (0..60).map(|i| format!("topic-{i:02}")).collect();
        let a = sample_topics(&ids, 20, 7);
        assert_eq!(a, sample_topics(&ids, 20, 7));
        assert_eq!(a.len(), 20);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_ne!(a, sample_topics(&ids, 20, 8));
        assert_eq!(sample_topics(&ids[..5], 20, 7).len(), 5);
    }
}
