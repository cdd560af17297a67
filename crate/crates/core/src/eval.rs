//! Benchmark-style scoring of prediction files against gold records.

use std::collections::BTreeMap;
use std::io::BufRead;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataset::QaRecord;
use crate::error::{Error, Result};
use crate::interleave::AnswerOption;
use crate::span::{mean_iou, multi_span_tiou, normalize_spans, recall_at_iou, SpanSet};

pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

/// Grounding prediction line `{item_id, spans: [[s, e], ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanPrediction {
    pub item_id: String,
    pub spans: Vec<(f64, f64)>,
}

/// QA prediction line `{item_id, answer}`; `answer` may be null or junk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerPrediction {
    pub item_id: String,
    #[serde(default)]
    pub answer: Option<String>,
}

/// Task label line `{item_id, task}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskLabel {
    pub item_id: String,
    pub task: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub items: usize,
    /// Items without a prediction, scored as zero / wrong.
    pub missing: usize,
    /// `(threshold, recall %)` in threshold order.
    pub recalls: Vec<(f64, f64)>,
    pub miou: Option<f64>,
    pub accuracy: Option<f64>,
    /// Task name to `(item count, accuracy %)`.
    pub per_task: BTreeMap<String, (usize, f64)>,
    pub macro_avg: Option<f64>,
}

impl EvalReport {
    fn empty(items: usize, missing: usize) -> Self {
        Self { items, missing, recalls: Vec::new(), miou: None, accuracy: None, per_task: BTreeMap::new(), macro_avg: None }
    }

    /// `(metric, value)` rows in display order.
    pub fn rows(&self) -> Vec<(String, f64)> {
        let mut rows: Vec<(String, f64)> = self.recalls.iter().map(|(t, r)| (format!("R@{t}"), *r)).collect();
        rows.extend(self.miou.map(|m| ("mIoU".to_string(), m)));
        rows.extend(self.accuracy.map(|a| ("Accuracy".to_string(), a)));
        rows.extend(self.per_task.iter().map(|(task, (_, acc))| (format!("Acc[{task}]"), *acc)));
        rows.extend(self.macro_avg.map(|m| ("M-Avg".to_string(), m)));
        rows
    }

    /// Aligned two-column table.
    pub fn render_table(&self) -> String {
        let rows = self.rows();
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0).max("Metric".len());
        let mut out = format!("{:<width$}  {:>7}\n", "Metric", "Value");
        for (k, v) in rows {
            out.push_str(&format!("{k:<width$}  {v:>7.2}\n"));
        }
        out.push_str(&format!("{:<width$}  {:>7}\n", "Items", self.items));
        out.push_str(&format!("{:<width$}  {:>7}\n", "Missing", self.missing));
        out
    }

    /// One JSON object per metric.
    pub fn render_ndjson(&self) -> String {
        let mut out = String::new();
        for (metric, value) in self.rows() {
            out.push_str(&json!({ "metric": metric, "value": value }).to_string());
            out.push('\n');
        }
        out.push_str(&json!({ "metric": "items", "value": self.items }).to_string());
        out.push('\n');
        out.push_str(&json!({ "metric": "missing", "value": self.missing }).to_string());
        out.push('\n');
        out
    }
}

/// Reads line-delimited JSON, skipping blank lines.
pub fn read_lines<T: DeserializeOwned, R: BufRead>(input: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::Record { id: format!("line {}", n + 1), reason: e.to_string() })?,
        );
    }
    Ok(out)
}

fn gold_index(gold: &[QaRecord]) -> Result<BTreeMap<String, &QaRecord>> {
    let mut index = BTreeMap::new();
    for g in gold {
        if index.insert(g.item_id(), g).is_some() {
            return Err(Error::DuplicateId(g.item_id()));
        }
    }
    if index.is_empty() {
        return Err(Error::EmptyInput("gold records"));
    }
    Ok(index)
}

fn pred_index<'a, T>(preds: &'a [T], id: impl Fn(&T) -> &str, gold: &BTreeMap<String, &QaRecord>) -> Result<BTreeMap<&'a str, &'a T>> {
    let mut index = BTreeMap::new();
    for p in preds {
        let key = id(p);
        if !gold.contains_key(key) {
            return Err(Error::UnmatchedId(key.to_string()));
        }
        if index.insert(key, p).is_some() {
            return Err(Error::DuplicateId(key.to_string()));
        }
    }
    Ok(index)
}

fn best_single(pred: &SpanSet, gold: &SpanSet) -> Result<f64> {
    let mut best: f64 = 0.0;
    for s in pred {
        best = best.max(multi_span_tiou(&SpanSet::single(*s), gold)?);
    }
    Ok(best)
}

/// Recall@IoU and mIoU over all gold items.
///
/// By default each item's IoU is the multi-span tIoU of the normalized
/// prediction against the gold set. With `single_best`, it is the best
/// IoU achieved by any single predicted span.
pub fn eval_grounding(preds: &[SpanPrediction], gold: &[QaRecord], thresholds: &[f64], single_best: bool) -> Result<EvalReport> {
    let gold = gold_index(gold)?;
    let preds = pred_index(preds, |p| p.item_id.as_str(), &gold)?;
    let mut ious = Vec::with_capacity(gold.len());
    for (id, g) in &gold {
        let iou = match preds.get(id.as_str()) {
            Some(p) => {
                let pred = normalize_spans(&p.spans, f64::INFINITY, 0.0).0;
                if single_best {
                    best_single(&pred, &g.time_spans)?
                } else {
                    multi_span_tiou(&pred, &g.time_spans)?
                }
            }
            None => 0.0,
        };
        ious.push(iou);
    }
    ious.sort_by(f64::total_cmp);
    let mut report = EvalReport::empty(gold.len(), gold.len() - preds.len());
    for &t in thresholds {
        report.recalls.push((t, recall_at_iou(&ious, t)?));
    }
    report.miou = Some(mean_iou(&ious)?);
    Ok(report)
}

/// Accuracy, optionally broken down by task with an unweighted macro average.
pub fn eval_qa(preds: &[AnswerPrediction], gold: &[QaRecord], tasks: Option<&[TaskLabel]>) -> Result<EvalReport> {
    let gold = gold_index(gold)?;
    let preds = pred_index(preds, |p| p.item_id.as_str(), &gold)?;
    let correct: BTreeMap<&str, bool> = gold
        .iter()
        .map(|(id, g)| {
            let hit = preds
                .get(id.as_str())
                .and_then(|p| p.answer.as_deref())
                .and_then(|a| a.trim().parse::<AnswerOption>().ok())
                == Some(g.correct_answer);
            (id.as_str(), hit)
        })
        .collect();
    let pct = |hits: usize, n: usize| 100.0 * hits as f64 / n as f64;
    let mut report = EvalReport::empty(gold.len(), gold.len() - preds.len());
    report.accuracy = Some(pct(correct.values().filter(|c| **c).count(), correct.len()));

    if let Some(labels) = tasks {
        let mut task_of: BTreeMap<&str, &str> = BTreeMap::new();
        for l in labels {
            if !gold.contains_key(&l.item_id) {
                return Err(Error::UnmatchedId(l.item_id.clone()));
            }
            if task_of.insert(&l.item_id, &l.task).is_some() {
                return Err(Error::DuplicateId(l.item_id.clone()));
            }
        }
        let mut per_task: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for (id, hit) in &correct {
            let task = task_of
                .get(id)
                .ok_or_else(|| Error::Record { id: id.to_string(), reason: "no task label".into() })?;
            let entry = per_task.entry(task.to_string()).or_default();
            entry.0 += 1;
            entry.1 += usize::from(*hit);
        }
        report.per_task = per_task.into_iter().map(|(t, (n, hits))| (t, (n, pct(hits, n)))).collect();
        let accs: Vec<f64> = report.per_task.values().map(|(_, a)| *a).collect();
        report.macro_avg = Some(accs.iter().sum::<f64>() / accs.len() as f64);
    }
    Ok(report)
}
