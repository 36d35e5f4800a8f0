//! Metrics: top-1 accuracy, mean average precision, group breakdowns and the
//! true-negative rate of pseudo-absent labels.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::labels::{argmax, AbsentLabels};
use crate::synthgen::{Label, Truth};

/// Percentage of rows whose argmax equals the label.
pub fn top1(probs: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    ensure!(
        probs.nrows() == labels.len(),
        "{} predictions for {} labels",
        probs.nrows(),
        labels.len()
    );
    ensure!(!labels.is_empty(), "top-1 needs at least one sample");
    let correct = probs
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &y)| argmax(row.as_slice().expect("standard layout")) == Some(y))
        .count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

/// Average of precision at each positive, ranking by descending score with
/// ties broken by the smaller index. `None` when there is no positive.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positive[i] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| total / hits as f64)
}

/// Mean over classes with at least one positive of the per-class average
/// precision, as a percentage.
pub fn mean_ap(scores: &Array2<f64>, labels: &[Vec<bool>]) -> Result<f64> {
    ensure!(
        scores.nrows() == labels.len(),
        "{} score rows for {} label rows",
        scores.nrows(),
        labels.len()
    );
    let k = scores.ncols();
    ensure!(labels.iter().all(|l| l.len() == k), "label rows must have {k} entries");
    let mut aps = Vec::new();
    for c in 0..k {
        let col: Vec<f64> = scores.column(c).to_vec();
        let pos: Vec<bool> = labels.iter().map(|l| l[c]).collect();
        if let Some(ap) = average_precision(&col, &pos) {
            aps.push(ap);
        }
    }
    ensure!(!aps.is_empty(), "no class has a positive sample");
    Ok(100.0 * aps.iter().sum::<f64>() / aps.len() as f64)
}

/// The headline metric for a label type: top-1 for single-label data, mAP
/// for multi-label data.
pub fn headline(probs: &Array2<f64>, labels: &[&Label]) -> Result<f64> {
    ensure!(!labels.is_empty(), "no samples to evaluate");
    match labels[0] {
        Label::Single(_) => {
            let ys: Result<Vec<usize>> = labels
                .iter()
                .map(|l| l.single().ok_or_else(|| Error::Validation("mixed label types".into())))
                .collect();
            top1(probs, &ys?)
        }
        Label::Multi(_) => {
            let k = probs.ncols();
            let rows: Vec<Vec<bool>> = labels.iter().map(|l| (0..k).map(|c| l.contains(c)).collect()).collect();
            mean_ap(probs, &rows)
        }
    }
}

/// Long-tail bin of an activity/interaction pair by its source count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FrequencyBin {
    /// Seen at most once in the source domain.
    Rare,
    /// Seen 2 to 10 times.
    Uncommon,
    /// Seen more than 10 times.
    Frequent,
}

impl FrequencyBin {
    pub fn of(count: usize) -> Self {
        match count {
            0..=1 => FrequencyBin::Rare,
            2..=10 => FrequencyBin::Uncommon,
            _ => FrequencyBin::Frequent,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FrequencyBin::Rare => "bin_0_1",
            FrequencyBin::Uncommon => "bin_2_10",
            FrequencyBin::Frequent => "bin_over_10",
        }
    }
}

/// Primary class of a label (the label itself, or the lowest active class).
fn primary(label: &Label) -> Option<usize> {
    label.classes().first().copied()
}

/// Source counts of every `(class, cluster)` pair.
pub fn pair_counts(source: &[&Truth]) -> BTreeMap<(usize, usize), usize> {
    let mut counts = BTreeMap::new();
    for t in source {
        if let Some(y) = primary(&t.label) {
            *counts.entry((y, t.cluster)).or_insert(0) += 1;
        }
    }
    counts
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    SilentAudible,
    FrequencyBins,
}

impl std::str::FromStr for Grouping {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "silent_audible" => Ok(Grouping::SilentAudible),
            "frequency_bins" => Ok(Grouping::FrequencyBins),
            other => Err(Error::Validation(format!("unknown grouping {other:?}"))),
        }
    }
}

/// Metric restricted to one group. Empty groups have no value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetric {
    pub group: String,
    pub count: usize,
    pub value: Option<f64>,
}

/// Group name of every evaluated video.
pub fn group_names(truths: &[&Truth], grouping: Grouping, source: &[&Truth]) -> Vec<&'static str> {
    match grouping {
        Grouping::SilentAudible => truths
            .iter()
            .map(|t| if t.audible { "audible" } else { "silent" })
            .collect(),
        Grouping::FrequencyBins => {
            let counts = pair_counts(source);
            truths
                .iter()
                .map(|t| {
                    let n = primary(&t.label)
                        .and_then(|y| counts.get(&(y, t.cluster)))
                        .copied()
                        .unwrap_or(0);
                    FrequencyBin::of(n).as_str()
                })
                .collect()
        }
    }
}

/// Every group a grouping can produce, in report order.
pub fn all_groups(grouping: Grouping) -> &'static [&'static str] {
    match grouping {
        Grouping::SilentAudible => &["silent", "audible"],
        Grouping::FrequencyBins => &["bin_0_1", "bin_2_10", "bin_over_10"],
    }
}

/// The headline metric on each group's subset of videos. `source` supplies
/// the source-domain pair counts for frequency bins.
pub fn group_metrics(
    probs: &Array2<f64>,
    truths: &[&Truth],
    grouping: Grouping,
    source: &[&Truth],
) -> Result<Vec<GroupMetric>> {
    ensure!(
        probs.nrows() == truths.len(),
        "{} predictions for {} videos",
        probs.nrows(),
        truths.len()
    );
    let names = group_names(truths, grouping, source);
    all_groups(grouping)
        .iter()
        .map(|&g| {
            let idx: Vec<usize> = (0..truths.len()).filter(|&i| names[i] == g).collect();
            let value = if idx.is_empty() {
                None
            } else {
                let sub = probs.select(ndarray::Axis(0), &idx);
                let labels: Vec<&Label> = idx.iter().map(|&i| &truths[i].label).collect();
                match headline(&sub, &labels) {
                    Ok(v) => Some(v),
                    // A subset may hold no positives for any class under mAP.
                    Err(Error::Validation(_)) => None,
                    Err(e) => return Err(e),
                }
            };
            Ok(GroupMetric {
                group: g.to_string(),
                count: idx.len(),
                value,
            })
        })
        .collect()
}

/// Percentage of absent markings whose class is truly absent.
pub fn tnr_absent(absent: &AbsentLabels, truth: &[&Label]) -> Result<f64> {
    ensure!(
        absent.len() == truth.len(),
        "{} absent-label rows for {} videos",
        absent.len(),
        truth.len()
    );
    let mut marked = 0usize;
    let mut correct = 0usize;
    for (row, label) in absent.mask.iter().zip(truth) {
        for (c, &m) in row.iter().enumerate() {
            if m {
                marked += 1;
                if !label.contains(c) {
                    correct += 1;
                }
            }
        }
    }
    ensure!(marked > 0, "no absent markings to score");
    Ok(100.0 * correct as f64 / marked as f64)
}

/// One `metric x group` value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub group: String,
    pub value: f64,
}

/// A flat list of metric rows with a CSV form.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
}

impl MetricsReport {
    pub fn push(&mut self, metric: &str, group: &str, value: f64) {
        self.rows.push(MetricRow {
            metric: metric.to_string(),
            group: group.to_string(),
            value,
        });
    }

    pub fn get(&self, metric: &str, group: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.metric == metric && r.group == group)
            .map(|r| r.value)
    }

    /// Adds non-empty group values under `metric`.
    pub fn push_groups(&mut self, metric: &str, groups: &[GroupMetric]) {
        for g in groups {
            if let Some(v) = g.value {
                self.push(metric, &g.group, v);
            }
        }
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["metric", "group", "value"]).expect("in-memory write");
        for r in &self.rows {
            w.write_record([r.metric.as_str(), r.group.as_str(), &r.value.to_string()])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}
