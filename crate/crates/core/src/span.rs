//! Interval arithmetic over absolute video time.
//!
//! Spans are closed intervals in seconds. A [`SpanSet`] is always kept in
//! normal form: sorted by start, pairwise disjoint, no two members touching.
//! Every constructor that can produce a `SpanSet` goes through
//! [`normalize_spans`], so downstream code may rely on that form.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// A closed interval `[start_s, end_s]` in absolute seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Span {
    start_s: f64,
    end_s: f64,
}

impl Span {
    pub fn new(start_s: f64, end_s: f64) -> Result<Self> {
        let invalid = |reason| Error::InvalidSpan { start: start_s, end: end_s, reason };
        if !start_s.is_finite() || !end_s.is_finite() {
            return Err(invalid("non-finite bound"));
        }
        if start_s < 0.0 {
            return Err(invalid("negative start"));
        }
        if start_s >= end_s {
            return Err(invalid("start must precede end"));
        }
        Ok(Self { start_s, end_s })
    }

    pub fn start(&self) -> f64 {
        self.start_s
    }

    pub fn end(&self) -> f64 {
        self.end_s
    }

    pub fn length(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub fn contains(&self, t: f64) -> bool {
        self.start_s <= t && t <= self.end_s
    }

    fn intersection_len(&self, other: &Span) -> f64 {
        let lo = self.start_s.max(other.start_s);
        let hi = self.end_s.min(other.end_s);
        (hi - lo).max(0.0)
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.start_s, self.end_s)
    }
}

impl Serialize for Span {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        [self.start_s, self.end_s].serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Span {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let [s, e] = <[f64; 2]>::deserialize(deserializer)?;
        Span::new(s, e).map_err(serde::de::Error::custom)
    }
}

/// Sorted, pairwise disjoint, non-abutting collection of spans.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
#[serde(transparent)]
pub struct SpanSet {
    spans: Vec<Span>,
}

impl SpanSet {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Normalizes arbitrary spans with no duration bound and zero merge gap.
    pub fn from_spans<I: IntoIterator<Item = Span>>(spans: I) -> Self {
        let raw: Vec<(f64, f64)> = spans.into_iter().map(|s| (s.start_s, s.end_s)).collect();
        normalize_spans(&raw, f64::INFINITY, 0.0).0
    }

    pub fn single(span: Span) -> Self {
        Self { spans: vec![span] }
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Span> {
        self.spans.iter()
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    pub fn first(&self) -> Option<&Span> {
        self.spans.first()
    }

    pub fn total_length(&self) -> f64 {
        self.spans.iter().map(Span::length).sum()
    }

    pub fn contains(&self, t: f64) -> bool {
        // Sorted and disjoint, so binary search on starts.
        let idx = self.spans.partition_point(|s| s.start_s <= t);
        idx > 0 && self.spans[idx - 1].contains(t)
    }

    /// Keeps only the first `k` spans (in temporal order).
    pub fn truncated(&self, k: usize) -> Self {
        Self { spans: self.spans.iter().take(k).copied().collect() }
    }

    pub fn to_pairs(&self) -> Vec<(f64, f64)> {
        self.spans.iter().map(|s| (s.start_s, s.end_s)).collect()
    }
}

impl<'de> Deserialize<'de> for SpanSet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let raw = Vec::<[f64; 2]>::deserialize(deserializer)?;
        let pairs: Vec<(f64, f64)> = raw.iter().map(|p| (p[0], p[1])).collect();
        let (set, report) = normalize_spans(&pairs, f64::INFINITY, 0.0);
        if report.dropped > 0 {
            return Err(serde::de::Error::custom(format!(
                "{} invalid span(s) in span list",
                report.dropped
            )));
        }
        Ok(set)
    }
}

impl<'a> IntoIterator for &'a SpanSet {
    type Item = &'a Span;
    type IntoIter = std::slice::Iter<'a, Span>;

    fn into_iter(self) -> Self::IntoIter {
        self.spans.iter()
    }
}

/// Bookkeeping returned alongside a normalized set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct NormalizeReport {
    /// Raw pairs rejected as invalid or out of range.
    pub dropped: usize,
    /// Merge events (each one removes a span from the output).
    pub merged: usize,
}

/// Drops invalid pairs, sorts, and merges spans whose gap is at most `gap_eps`.
///
/// A pair is invalid when a bound is non-finite, `start < 0`, `start >= end`
/// or `end > duration_s`. Pass `f64::INFINITY` as the duration when no
/// upper bound is known.
pub fn normalize_spans(raw: &[(f64, f64)], duration_s: f64, gap_eps: f64) -> (SpanSet, NormalizeReport) {
    let mut report = NormalizeReport::default();
    let mut valid: Vec<Span> = Vec::with_capacity(raw.len());
    for &(s, e) in raw {
        match Span::new(s, e) {
            Ok(span) if span.end_s <= duration_s => valid.push(span),
            _ => report.dropped += 1,
        }
    }
    valid.sort_by(|a, b| a.start_s.total_cmp(&b.start_s).then(a.end_s.total_cmp(&b.end_s)));

    let gap_eps = gap_eps.max(0.0);
    let mut out: Vec<Span> = Vec::with_capacity(valid.len());
    for span in valid {
        match out.last_mut() {
            Some(open) if span.start_s - open.end_s <= gap_eps => {
                open.end_s = open.end_s.max(span.end_s);
                report.merged += 1;
            }
            _ => out.push(span),
        }
    }
    (SpanSet { spans: out }, report)
}

/// Total intersection length between two normalized sets.
pub fn intersection_length(a: &SpanSet, b: &SpanSet) -> f64 {
    let (mut i, mut j) = (0, 0);
    let mut total = 0.0;
    while i < a.spans.len() && j < b.spans.len() {
        let (x, y) = (&a.spans[i], &b.spans[j]);
        total += x.intersection_len(y);
        if x.end_s < y.end_s {
            i += 1;
        } else {
            j += 1;
        }
    }
    total
}

/// Multi-span temporal IoU: total intersection over total union length.
pub fn multi_span_tiou(pred: &SpanSet, gold: &SpanSet) -> Result<f64> {
    if gold.is_empty() {
        return Err(Error::EmptyGold);
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let inter = intersection_length(pred, gold);
    let union = pred.total_length() + gold.total_length() - inter;
    if union <= 0.0 {
        return Ok(0.0);
    }
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Base relation of Allen's interval algebra.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AllenKind {
    Before,
    Meets,
    Overlaps,
    Starts,
    During,
    Finishes,
    Equals,
}

/// An Allen relation from the first interval's perspective. `inverse` marks
/// the converse relation (e.g. `Before` + inverse reads "after").
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IntervalRelation {
    pub kind: AllenKind,
    pub inverse: bool,
}

impl IntervalRelation {
    pub fn converse(self) -> Self {
        match self.kind {
            AllenKind::Equals => self,
            _ => Self { kind: self.kind, inverse: !self.inverse },
        }
    }
}

impl fmt::Display for IntervalRelation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match (self.kind, self.inverse) {
            (AllenKind::Before, false) => "before",
            (AllenKind::Before, true) => "after",
            (AllenKind::Meets, false) => "meets",
            (AllenKind::Meets, true) => "met-by",
            (AllenKind::Overlaps, false) => "overlaps",
            (AllenKind::Overlaps, true) => "overlapped-by",
            (AllenKind::Starts, false) => "starts",
            (AllenKind::Starts, true) => "started-by",
            (AllenKind::During, false) => "during",
            (AllenKind::During, true) => "contains",
            (AllenKind::Finishes, false) => "finishes",
            (AllenKind::Finishes, true) => "finished-by",
            (AllenKind::Equals, _) => "equals",
        };
        f.write_str(name)
    }
}

fn forward_relation(a: &Span, b: &Span) -> Option<AllenKind> {
    let (as_, ae, bs, be) = (a.start_s, a.end_s, b.start_s, b.end_s);
    let kind = if ae < bs {
        AllenKind::Before
    } else if ae == bs {
        AllenKind::Meets
    } else if as_ == bs && ae == be {
        AllenKind::Equals
    } else if as_ == bs && ae < be {
        AllenKind::Starts
    } else if ae == be && as_ > bs {
        AllenKind::Finishes
    } else if as_ > bs && ae < be {
        AllenKind::During
    } else if as_ < bs && bs < ae && ae < be {
        AllenKind::Overlaps
    } else {
        return None;
    };
    Some(kind)
}

/// The unique Allen relation holding between `a` and `b`.
pub fn interval_relation(a: &Span, b: &Span) -> IntervalRelation {
    if let Some(kind) = forward_relation(a, b) {
        return IntervalRelation { kind, inverse: false };
    }
    // Every configuration not covered forward is the converse of one that is.
    let kind = forward_relation(b, a).expect("Allen relations are jointly exhaustive");
    IntervalRelation { kind, inverse: kind != AllenKind::Equals }
}

fn check_ratios(ious: &[f64]) -> Result<()> {
    if ious.is_empty() {
        return Err(Error::EmptyInput("IoU list"));
    }
    if let Some(bad) = ious.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!("IoU {bad} outside [0, 1]")));
    }
    Ok(())
}

/// Percentage of items whose IoU reaches `threshold` (inclusive).
pub fn recall_at_iou(ious: &[f64], threshold: f64) -> Result<f64> {
    check_ratios(ious)?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} outside (0, 1)")));
    }
    let hits = ious.iter().filter(|&&v| v >= threshold).count();
    Ok(100.0 * hits as f64 / ious.len() as f64)
}

/// Mean IoU in percent.
pub fn mean_iou(ious: &[f64]) -> Result<f64> {
    check_ratios(ious)?;
    Ok(100.0 * ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Stable ordering for spans (start, then end).
pub fn span_order(a: &Span, b: &Span) -> Ordering {
    a.start_s.total_cmp(&b.start_s).then(a.end_s.total_cmp(&b.end_s))
}
