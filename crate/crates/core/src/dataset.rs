//! Span-grounded MCQA records: construction from event nodes, layered review,
//! near-duplicate removal, label balancing, video-level splits and statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::sync::LazyLock;

use rand::seq::{IndexedRandom, SliceRandom};
use regex::Regex;
use serde::ser::SerializeSeq;
use serde::{Deserialize, Serialize, Serializer};
use serde_json::value::RawValue;

use crate::error::{Error, Result};
use crate::graph::{EventGraph, EventNode};
use crate::interleave::{format_seconds, AnswerOption};
use crate::provider::{token_jaccard, TextSimilarity};
use crate::seed::{derive_seed, rng_for};
use crate::span::{normalize_spans, SpanSet};

/// One training instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaRecord {
    pub video_id: String,
    pub event_id: String,
    #[serde(serialize_with = "serialize_two_decimal_spans")]
    pub time_spans: SpanSet,
    pub event_description: String,
    pub grounding_query: String,
    pub question: String,
    pub options: BTreeMap<AnswerOption, String>,
    pub correct_answer: AnswerOption,
    #[serde(default)]
    pub stage1_reason: Option<String>,
    #[serde(default)]
    pub stage2_reason: Option<String>,
}

fn serialize_two_decimal_spans<S: Serializer>(spans: &SpanSet, s: S) -> std::result::Result<S::Ok, S::Error> {
    let mut seq = s.serialize_seq(Some(spans.len()))?;
    for span in spans {
        let pair = [span.start(), span.end()]
            .map(|v| RawValue::from_string(format_seconds(v)).expect("formatted seconds are valid JSON numbers"));
        seq.serialize_element(&pair)?;
    }
    seq.end()
}

impl QaRecord {
    /// Identifier used to join predictions to gold records.
    pub fn item_id(&self) -> String {
        format!("{}/{}", self.video_id, self.event_id)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: &str| Err(Error::Record { id: self.item_id(), reason: reason.to_string() });
        if self.video_id.trim().is_empty() || self.event_id.trim().is_empty() {
            return fail("empty video_id or event_id");
        }
        if self.time_spans.is_empty() {
            return fail("time_spans is empty");
        }
        if self.question.trim().is_empty() || self.grounding_query.trim().is_empty() {
            return fail("empty question or grounding_query");
        }
        if self.options.len() != 4 {
            return fail("exactly four options required");
        }
        if self.options.values().any(|o| o.trim().is_empty()) {
            return fail("empty option text");
        }
        let distinct: BTreeSet<String> = self.options.values().map(|o| o.trim().to_lowercase()).collect();
        if distinct.len() != 4 {
            return fail("options are not distinct");
        }
        if !self.options.contains_key(&self.correct_answer) {
            return fail("correct_answer does not key into options");
        }
        Ok(())
    }

    pub fn correct_text(&self) -> &str {
        self.options.get(&self.correct_answer).map(String::as_str).unwrap_or("")
    }
}

/// Snaps span bounds to the 0.01 s grid used on the wire, then renormalizes.
pub fn quantize_spans(spans: &SpanSet) -> SpanSet {
    let q = |v: f64| format_seconds(v).parse::<f64>().expect("formatted seconds parse");
    let raw: Vec<(f64, f64)> = spans.iter().map(|s| (q(s.start()), q(s.end()))).collect();
    normalize_spans(&raw, f64::INFINITY, 0.0).0
}

pub fn read_records<R: BufRead>(input: R) -> Result<Vec<QaRecord>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: QaRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Record { id: format!("line {}", n + 1), reason: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records<W: Write>(records: &[QaRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Question text and the correct option text for one event.
#[derive(Debug, Clone, PartialEq)]
pub struct QuestionDraft {
    pub question: String,
    pub answer_text: String,
    pub stage1_reason: Option<String>,
    pub stage2_reason: Option<String>,
}

/// Writes grounding queries and questions (an LLM in production).
pub trait QaAuthor: Send + Sync {
    /// `attempt` is 0 on the first call and 1 on the single rebuild.
    fn grounding_query(&self, node: &EventNode, attempt: u32) -> Result<String>;
    fn question(&self, node: &EventNode, seed: u64) -> Result<QuestionDraft>;
}

/// Deterministic offline author built from templates.
#[derive(Debug, Clone, Copy, Default)]
pub struct TemplateAuthor;

// Kept short: adjacent events share a boundary second, and longer templates
// would push their token-Jaccard over the default duplicate threshold.
const QUESTION_TEMPLATES: &[&str] = &[
    "What happens between {s} and {e} seconds?",
    "What occurs from {s} to {e} s?",
    "Between {s} and {e} seconds, what is shown?",
];

fn whole_seconds(v: f64) -> String {
    format!("{}", v.round() as i64)
}

impl QaAuthor for TemplateAuthor {
    fn grounding_query(&self, node: &EventNode, attempt: u32) -> Result<String> {
        let text = node.description.trim().trim_end_matches('.');
        Ok(match attempt {
            0 => format!("Locate the moments when {text}"),
            _ => format!("Find where {}", node.entities.join(", ")),
        })
    }

    fn question(&self, node: &EventNode, seed: u64) -> Result<QuestionDraft> {
        let first = node.spans.first().ok_or(Error::EmptyInput("event spans"))?;
        let template = QUESTION_TEMPLATES[(seed % QUESTION_TEMPLATES.len() as u64) as usize];
        let question = template.replace("{s}", &whole_seconds(first.start())).replace("{e}", &whole_seconds(first.end()));
        Ok(QuestionDraft {
            question,
            answer_text: node.description.clone(),
            stage1_reason: Some(format!("The annotated span{} cover the event.", if node.spans.len() > 1 { "s" } else { "" })),
            stage2_reason: Some("The frames inside the span show this activity.".to_string()),
        })
    }
}

/// Phrases that tie a query to a clip instead of the global timeline.
pub const DEFAULT_DEICTIC_WORDS: &[&str] = &["this clip", "this moment", "this video", "the clip", "here", "now"];

/// Case-insensitive whole-phrase matcher for deictic words.
#[derive(Debug, Clone)]
pub struct DeicticFilter {
    pattern: Option<Regex>,
}

impl DeicticFilter {
    pub fn new<S: AsRef<str>>(words: &[S]) -> Self {
        let alts: Vec<String> = words
            .iter()
            .map(|w| w.as_ref().trim())
            .filter(|w| !w.is_empty())
            .map(|w| w.split_whitespace().map(regex::escape).collect::<Vec<_>>().join(r"\s+"))
            .collect();
        let pattern = if alts.is_empty() {
            None
        } else {
            Some(Regex::new(&format!(r"(?i)\b(?:{})\b", alts.join("|"))).expect("escaped alternation compiles"))
        };
        Self { pattern }
    }

    pub fn find<'a>(&self, text: &'a str) -> Option<&'a str> {
        self.pattern.as_ref().and_then(|p| p.find(text)).map(|m| m.as_str())
    }
}

impl Default for DeicticFilter {
    fn default() -> Self {
        Self::new(DEFAULT_DEICTIC_WORDS)
    }
}

fn normalized_text(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Turns one event node into a record.
///
/// Distractors are three distinct descriptions drawn from `pool` (other
/// events of the same video). The correct option is placed at `A`; label
/// balancing assigns the final position.
pub fn build_record(
    video_id: &str,
    node: &EventNode,
    pool: &[EventNode],
    author: &dyn QaAuthor,
    deictic: &DeicticFilter,
    seed: u64,
) -> Result<QaRecord> {
    let item = format!("{video_id}/{}", node.event_id);
    let spans = quantize_spans(&node.spans);
    if spans.is_empty() {
        return Err(Error::Record { id: item, reason: "event has no valid span".into() });
    }
    let node = EventNode { spans: spans.clone(), ..node.clone() };
    let draft = author.question(&node, derive_seed(seed, &[video_id, &node.event_id, "question"]))?;
    let correct = draft.answer_text.trim().to_string();

    let mut seen = BTreeSet::from([normalized_text(&correct)]);
    let candidates: Vec<&str> = pool
        .iter()
        .filter(|p| p.event_id != node.event_id)
        .map(|p| p.description.trim())
        .filter(|d| !d.is_empty() && seen.insert(normalized_text(d)))
        .collect();
    if candidates.len() < 3 {
        return Err(Error::Record {
            id: item,
            reason: format!("distractor pool too small ({} distinct descriptions)", candidates.len()),
        });
    }
    let mut rng = rng_for(seed, &[video_id, &node.event_id, "distractors"]);
    let distractors: Vec<&str> = candidates.choose_multiple(&mut rng, 3).copied().collect();

    let mut grounding_query = author.grounding_query(&node, 0)?;
    if deictic.find(&grounding_query).is_some() {
        grounding_query = author.grounding_query(&node, 1)?;
        if let Some(hit) = deictic.find(&grounding_query) {
            return Err(Error::Record { id: item, reason: format!("grounding query still deictic after rebuild (`{hit}`)") });
        }
    }

    let mut options = BTreeMap::new();
    options.insert(AnswerOption::A, correct);
    for (label, text) in AnswerOption::ALL[1..].iter().zip(distractors) {
        options.insert(*label, text.to_string());
    }

    Ok(QaRecord {
        video_id: video_id.to_string(),
        event_id: node.event_id.clone(),
        time_spans: spans,
        event_description: node.description.clone(),
        grounding_query,
        question: draft.question,
        options,
        correct_answer: AnswerOption::A,
        stage1_reason: draft.stage1_reason,
        stage2_reason: draft.stage2_reason,
    })
}

/// Merges nodes whose descriptions describe the same recurring event into
/// one multi-span node (keeping the first node's id). Nodes are compared
/// against each group's first member.
pub fn coalesce_recurring(nodes: &[EventNode], similarity: &dyn TextSimilarity, threshold: f64) -> Result<Vec<EventNode>> {
    let mut groups: Vec<EventNode> = Vec::new();
    for node in nodes {
        let mut home = None;
        for (gi, g) in groups.iter().enumerate() {
            if similarity.similarity(&g.description, &node.description)? >= threshold {
                home = Some(gi);
                break;
            }
        }
        match home {
            Some(gi) => {
                let g = &mut groups[gi];
                let mut raw = g.spans.to_pairs();
                raw.extend(node.spans.to_pairs());
                g.spans = normalize_spans(&raw, f64::INFINITY, 0.0).0;
                for e in &node.entities {
                    if !g.entities.contains(e) {
                        g.entities.push(e.clone());
                    }
                }
            }
            None => groups.push(node.clone()),
        }
    }
    Ok(groups)
}

/// Outcome of one review gate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum GateVerdict {
    Pass,
    Fail { reason: String },
    Skipped,
}

impl GateVerdict {
    pub fn is_fail(&self) -> bool {
        matches!(self, Self::Fail { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewReport {
    pub video_id: String,
    pub event_id: String,
    pub schema: GateVerdict,
    pub temporal_locality: GateVerdict,
    pub language: GateVerdict,
    pub text_only: GateVerdict,
    /// Decided by [`dedup_and_balance`]; `Skipped` until then.
    pub dedup: GateVerdict,
}

impl ReviewReport {
    /// No gate failed. The dedup gate is corpus-level and may still be pending.
    pub fn accepted(&self) -> bool {
        ![&self.schema, &self.temporal_locality, &self.language, &self.text_only, &self.dedup]
            .iter()
            .any(|g| g.is_fail())
    }

    fn failed_at(video_id: &str, event_id: &str, stage: usize, reason: String) -> Self {
        let mut gates = vec![GateVerdict::Pass; stage];
        gates.push(GateVerdict::Fail { reason });
        gates.resize(4, GateVerdict::Skipped);
        Self {
            video_id: video_id.into(),
            event_id: event_id.into(),
            schema: gates[0].clone(),
            temporal_locality: gates[1].clone(),
            language: gates[2].clone(),
            text_only: gates[3].clone(),
            dedup: GateVerdict::Skipped,
        }
    }
}

/// Checks that an item is resolvable from its annotated spans alone.
pub trait LocalityChecker: Send + Sync {
    /// `Some(reason)` rejects the record.
    fn check(&self, record: &QaRecord) -> Result<Option<String>>;
}

/// Answers a record from its text alone, without any video.
pub trait BlindAnswerer: Send + Sync {
    fn answer(&self, record: &QaRecord) -> Result<Option<AnswerOption>>;
}

static SECONDS_MENTION: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b(\d+(?:\.\d+)?)\s*(?:s|sec|secs|seconds?)\b").unwrap());
static BETWEEN_MENTION: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(?:between|from)\s+(\d+(?:\.\d+)?)\s*(?:s|sec|secs|seconds?)?\s+(?:and|to)\s+(\d+(?:\.\d+)?)\s*(?:s|sec|secs|seconds?)\b")
        .unwrap()
});

/// Offline locality check: every explicit seconds reference in the question
/// must fall inside the annotated spans, within `tolerance_s`.
#[derive(Debug, Clone, Copy)]
pub struct TimeReferenceLocality {
    pub tolerance_s: f64,
}

impl Default for TimeReferenceLocality {
    fn default() -> Self {
        Self { tolerance_s: 0.5 }
    }
}

impl LocalityChecker for TimeReferenceLocality {
    fn check(&self, record: &QaRecord) -> Result<Option<String>> {
        let mut mentions: Vec<f64> = Vec::new();
        for c in BETWEEN_MENTION.captures_iter(&record.question) {
            mentions.extend([&c[1], &c[2]].iter().filter_map(|v| v.parse::<f64>().ok()));
        }
        for c in SECONDS_MENTION.captures_iter(&record.question) {
            mentions.extend(c[1].parse::<f64>().ok());
        }
        let tol = self.tolerance_s;
        for t in mentions {
            let inside = record.time_spans.iter().any(|s| s.start() - tol <= t && t <= s.end() + tol);
            if !inside {
                return Ok(Some(format!("question references {t}s outside the annotated spans")));
            }
        }
        Ok(None)
    }
}

/// Offline text-only baseline: picks the option sharing the most content
/// words with the question; abstains on ties or zero overlap.
#[derive(Debug, Clone, Copy, Default)]
pub struct OverlapGuesser;

impl BlindAnswerer for OverlapGuesser {
    fn answer(&self, record: &QaRecord) -> Result<Option<AnswerOption>> {
        let content = |s: &str| -> BTreeSet<String> {
            s.split(|c: char| !c.is_alphanumeric())
                .filter(|w| w.len() > 3)
                .map(str::to_lowercase)
                .collect()
        };
        let q = content(&record.question);
        let mut scores: Vec<(usize, AnswerOption)> =
            record.options.iter().map(|(k, v)| (content(v).intersection(&q).count(), *k)).collect();
        scores.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        match scores.as_slice() {
            [(best, opt), (second, _), ..] if *best > 0 && best > second => Ok(Some(*opt)),
            _ => Ok(None),
        }
    }
}

/// Checker providers plus the language wordlist.
pub struct ReviewCheckers<'a> {
    pub locality: &'a dyn LocalityChecker,
    pub blind: &'a dyn BlindAnswerer,
    pub deictic: &'a DeicticFilter,
}

/// Runs schema, temporal-locality, language and text-only gates in order,
/// skipping the rest after the first failure.
pub fn review_record(record: &QaRecord, checkers: &ReviewCheckers<'_>) -> ReviewReport {
    let (vid, eid) = (record.video_id.as_str(), record.event_id.as_str());
    if let Err(e) = record.validate() {
        return ReviewReport::failed_at(vid, eid, 0, e.to_string());
    }
    match checkers.locality.check(record) {
        Ok(None) => {}
        Ok(Some(reason)) => return ReviewReport::failed_at(vid, eid, 1, reason),
        Err(e) => return ReviewReport::failed_at(vid, eid, 1, format!("checker error: {e}")),
    }
    for text in [&record.grounding_query, &record.question] {
        if let Some(hit) = checkers.deictic.find(text) {
            return ReviewReport::failed_at(vid, eid, 2, format!("deictic phrasing `{hit}`"));
        }
    }
    match checkers.blind.answer(record) {
        Ok(Some(a)) if a == record.correct_answer => {
            return ReviewReport::failed_at(vid, eid, 3, "answerable without the video".into())
        }
        Ok(_) => {}
        Err(e) => return ReviewReport::failed_at(vid, eid, 3, format!("checker error: {e}")),
    }
    ReviewReport {
        video_id: vid.into(),
        event_id: eid.into(),
        schema: GateVerdict::Pass,
        temporal_locality: GateVerdict::Pass,
        language: GateVerdict::Pass,
        text_only: GateVerdict::Pass,
        dedup: GateVerdict::Skipped,
    }
}

/// Reviews one raw JSON line; undecodable lines fail the schema gate.
pub fn review_line(line: &str, checkers: &ReviewCheckers<'_>) -> (Option<QaRecord>, ReviewReport) {
    match serde_json::from_str::<QaRecord>(line) {
        Ok(rec) => {
            let report = review_record(&rec, checkers);
            (Some(rec), report)
        }
        Err(e) => {
            let value: serde_json::Value = serde_json::from_str(line).unwrap_or(serde_json::Value::Null);
            let field = |k: &str| value.get(k).and_then(|v| v.as_str()).unwrap_or("").to_string();
            (None, ReviewReport::failed_at(&field("video_id"), &field("event_id"), 0, e.to_string()))
        }
    }
}

/// Drops, per video, any record whose question reaches `dup_threshold`
/// token-Jaccard with an earlier kept record. Returns `(kept, dropped)`.
pub fn dedup_within_video(records: Vec<QaRecord>, dup_threshold: f64) -> (Vec<QaRecord>, Vec<QaRecord>) {
    let mut kept: Vec<QaRecord> = Vec::new();
    let mut dropped = Vec::new();
    let mut by_video: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for rec in records {
        let earlier = by_video.entry(rec.video_id.clone()).or_default();
        let dup = earlier.iter().any(|&i| token_jaccard(&kept[i].question, &rec.question) >= dup_threshold);
        if dup {
            dropped.push(rec);
        } else {
            earlier.push(kept.len());
            kept.push(rec);
        }
    }
    (kept, dropped)
}

/// Reassigns correct labels so counts differ by at most one. The label
/// sequence is round-robin over A..D, shuffled with `seed`; options are
/// permuted (swapped) rather than rewritten.
pub fn balance_labels(records: &mut [QaRecord], seed: u64) {
    let mut labels: Vec<AnswerOption> = (0..records.len()).map(|i| AnswerOption::ALL[i % 4]).collect();
    let mut rng = rng_for(seed, &["balance", &records.len().to_string()]);
    labels.shuffle(&mut rng);
    for (rec, target) in records.iter_mut().zip(labels) {
        if rec.correct_answer == target {
            continue;
        }
        let current = rec.correct_answer;
        let (Some(a), Some(b)) = (rec.options.get(&current).cloned(), rec.options.get(&target).cloned()) else { continue };
        rec.options.insert(current, b);
        rec.options.insert(target, a);
        rec.correct_answer = target;
    }
}

pub fn dedup_and_balance(records: Vec<QaRecord>, dup_threshold: f64, seed: u64) -> Vec<QaRecord> {
    let (mut kept, _) = dedup_within_video(records, dup_threshold);
    balance_labels(&mut kept, seed);
    kept
}

/// Video ids per split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn split_of(&self, video_id: &str) -> Option<&'static str> {
        let has = |v: &[String]| v.iter().any(|x| x == video_id);
        if has(&self.train) {
            Some("train")
        } else if has(&self.val) {
            Some("val")
        } else if has(&self.test) {
            Some("test")
        } else {
            None
        }
    }
}

/// Assigns whole videos to train/val/test.
///
/// Videos are ordered by a seeded hash of their id and cut into contiguous
/// blocks sized by largest-remainder rounding of the ratios; every split
/// with a positive ratio receives at least one video.
pub fn split_by_video(records: &[QaRecord], ratios: [f64; 3], seed: u64) -> Result<SplitManifest> {
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let videos: BTreeSet<&str> = records.iter().map(|r| r.video_id.as_str()).collect();
    let active = ratios.iter().filter(|r| **r > 0.0).count();
    if videos.len() < active {
        return Err(Error::InvalidArgument(format!("{} video(s) cannot fill {active} splits", videos.len())));
    }
    let mut ordered: Vec<(u64, &str)> = videos.iter().map(|v| (derive_seed(seed, &["split", v]), *v)).collect();
    ordered.sort();

    let mut counts = crate::budget::largest_remainder(&ratios, ordered.len());
    for i in 0..3 {
        if ratios[i] > 0.0 && counts[i] == 0 {
            let donor = (0..3).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).expect("three splits");
            counts[donor] -= 1;
            counts[i] += 1;
        }
    }
    let mut it = ordered.into_iter().map(|(_, v)| v.to_string());
    let mut take = |n: usize| -> Vec<String> {
        let mut v: Vec<String> = it.by_ref().take(n).collect();
        v.sort();
        v
    };
    Ok(SplitManifest { train: take(counts[0]), val: take(counts[1]), test: take(counts[2]) })
}

/// Corpus statistics over total span length per record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub record_count: usize,
    pub span_length_mean: f64,
    pub span_length_median: f64,
    /// `(percentile, value)` pairs for 10/25/75/90.
    pub span_length_percentiles: Vec<(u32, f64)>,
    pub multi_span_proportion: f64,
    pub per_video_counts: BTreeMap<String, usize>,
    pub label_histogram: BTreeMap<AnswerOption, usize>,
}

/// Linear-interpolation percentile over sorted data.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn dataset_stats(records: &[QaRecord]) -> Result<DatasetStats> {
    if records.is_empty() {
        return Err(Error::EmptyInput("record list"));
    }
    let mut lengths: Vec<f64> = records.iter().map(|r| r.time_spans.total_length()).collect();
    lengths.sort_by(f64::total_cmp);
    let n = records.len();
    let mut per_video_counts = BTreeMap::new();
    let mut label_histogram: BTreeMap<AnswerOption, usize> = AnswerOption::ALL.iter().map(|a| (*a, 0)).collect();
    for r in records {
        *per_video_counts.entry(r.video_id.clone()).or_insert(0) += 1;
        *label_histogram.entry(r.correct_answer).or_insert(0) += 1;
    }
    Ok(DatasetStats {
        record_count: n,
        span_length_mean: lengths.iter().sum::<f64>() / n as f64,
        span_length_median: percentile(&lengths, 50.0),
        span_length_percentiles: [10, 25, 75, 90].iter().map(|&p| (p, percentile(&lengths, p as f64))).collect(),
        multi_span_proportion: records.iter().filter(|r| r.time_spans.len() > 1).count() as f64 / n as f64,
        per_video_counts,
        label_histogram,
    })
}

/// Settings for the record factory.
#[derive(Debug, Clone, PartialEq)]
pub struct FactoryConfig {
    /// Question token-Jaccard at or above which a record is a duplicate.
    pub dup_threshold: f64,
    /// Description similarity at or above which two events of one video are
    /// treated as recurrences of the same event.
    pub recurrence_threshold: f64,
    pub deictic_words: Vec<String>,
    pub jobs: usize,
}

impl Default for FactoryConfig {
    fn default() -> Self {
        Self {
            dup_threshold: 0.8,
            recurrence_threshold: 0.85,
            deictic_words: DEFAULT_DEICTIC_WORDS.iter().map(|w| w.to_string()).collect(),
            jobs: 1,
        }
    }
}

impl FactoryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dup_threshold > 0.0 && self.dup_threshold <= 1.0) {
            return Err(Error::InvalidArgument(format!("dup_threshold must be in (0, 1], got {}", self.dup_threshold)));
        }
        if !self.recurrence_threshold.is_finite() {
            return Err(Error::InvalidArgument("recurrence_threshold must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
pub struct FactoryProviders<'a> {
    pub author: &'a dyn QaAuthor,
    pub similarity: &'a dyn TextSimilarity,
    pub locality: &'a dyn LocalityChecker,
    pub blind: &'a dyn BlindAnswerer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactoryOutput {
    /// Accepted, deduplicated, label-balanced records sorted by item id.
    pub records: Vec<QaRecord>,
    /// One report per built record, sorted by item id.
    pub reports: Vec<ReviewReport>,
    /// `(item_id, reason)` for events that could not become records.
    pub build_failures: Vec<(String, String)>,
}

type Built = (Vec<QaRecord>, Vec<(String, String)>);

fn build_for_graph(graph: &EventGraph, providers: FactoryProviders<'_>, config: &FactoryConfig, deictic: &DeicticFilter, seed: u64) -> Result<Built> {
    let nodes = coalesce_recurring(&graph.nodes, providers.similarity, config.recurrence_threshold)?;
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for node in &nodes {
        match build_record(&graph.video_id, node, &nodes, providers.author, deictic, seed) {
            Ok(r) => records.push(r),
            Err(Error::Record { id, reason }) => failures.push((id, reason)),
            Err(e) => return Err(e),
        }
    }
    Ok((records, failures))
}

/// Event graphs to a reviewed, deduplicated, balanced record list.
///
/// Graphs are processed by up to `config.jobs` workers; the output depends
/// only on the inputs and `seed`.
pub fn build_dataset(graphs: &[EventGraph], providers: FactoryProviders<'_>, config: &FactoryConfig, seed: u64) -> Result<FactoryOutput> {
    config.validate()?;
    let deictic = DeicticFilter::new(&config.deictic_words);
    let per_worker = graphs.len().div_ceil(config.jobs.max(1)).max(1);
    let batches: Vec<Result<Vec<Built>>> = std::thread::scope(|scope| {
        let deictic = &deictic;
        let handles: Vec<_> = graphs
            .chunks(per_worker)
            .map(|batch| scope.spawn(move || batch.iter().map(|g| build_for_graph(g, providers, config, deictic, seed)).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("factory worker panicked")).collect()
    });
    let mut built = Vec::new();
    let mut build_failures = Vec::new();
    for batch in batches {
        for (records, failures) in batch? {
            built.extend(records);
            build_failures.extend(failures);
        }
    }
    built.sort_by(|a, b| (&a.video_id, &a.event_id).cmp(&(&b.video_id, &b.event_id)));
    build_failures.sort();

    let checkers = ReviewCheckers { locality: providers.locality, blind: providers.blind, deictic: &deictic };
    let mut reports = Vec::with_capacity(built.len());
    let mut accepted = Vec::new();
    for record in built {
        let report = review_record(&record, &checkers);
        if report.accepted() {
            accepted.push(record);
        }
        reports.push(report);
    }
    let (mut records, dropped) = dedup_within_video(accepted, config.dup_threshold);
    let dropped: BTreeSet<String> = dropped.iter().map(QaRecord::item_id).collect();
    for report in &mut reports {
        if report.accepted() {
            let id = format!("{}/{}", report.video_id, report.event_id);
            report.dedup = if dropped.contains(&id) {
                GateVerdict::Fail { reason: "near-duplicate of an earlier question in the same video".into() }
            } else {
                GateVerdict::Pass
            };
        }
    }
    balance_labels(&mut records, seed);
    Ok(FactoryOutput { records, reports, build_failures })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::TokenF1;
    use crate::span::Span;

    fn node(id: &str, spans: &[(f64, f64)], desc: &str) -> EventNode {
        EventNode {
            event_id: id.into(),
            spans: normalize_spans(spans, f64::INFINITY, 0.0).0,
            description: desc.into(),
            entities: vec!["door".into()],
        }
    }

    fn pool() -> Vec<EventNode> {
        vec![
            node("e000", &[(0.0, 6.0)], "a man opens the door"),
            node("e001", &[(6.0, 12.0)], "a dog chases a ball"),
            node("e002", &[(12.0, 18.0)], "a woman waters plants"),
            node("e003", &[(18.0, 24.0)], "a child rides a bike"),
        ]
    }

    fn checkers<'a>(d: &'a DeicticFilter) -> ReviewCheckers<'a> {
        ReviewCheckers { locality: &TimeReferenceLocality { tolerance_s: 0.5 }, blind: &OverlapGuesser, deictic: d }
    }

    fn record(video: &str, event: &str, question: &str) -> QaRecord {
        let mut options = BTreeMap::new();
        for (i, t) in ["alpha one", "beta two", "gamma three", "delta four"].iter().enumerate() {
            options.insert(AnswerOption::ALL[i], t.to_string());
        }
        QaRecord {
            video_id: video.into(),
            event_id: event.into(),
            time_spans: SpanSet::single(Span::new(1.0, 2.0).unwrap()),
            event_description: "alpha one".into(),
            grounding_query: "Locate the alpha".into(),
            question: question.into(),
            options,
            correct_answer: AnswerOption::A,
            stage1_reason: None,
            stage2_reason: None,
        }
    }

    #[test]
    fn build_inherits_spans() {
        let mut p = pool();
        p[0] = node("e000", &[(61.0, 75.5)], "a man opens the door");
        let r = build_record("v", &p[0], &p, &TemplateAuthor, &DeicticFilter::default(), 3).unwrap();
        assert_eq!(r.time_spans.to_pairs(), vec![(61.0, 75.5)]);
        assert!(r.validate().is_ok());
    }

    #[test]
    fn build_merges_overlapping_spans() {
        let mut p = pool();
        p[0] = node("e000", &[(10.0, 20.0), (18.0, 25.0)], "a man opens the door");
        let r = build_record("v", &p[0], &p, &TemplateAuthor, &DeicticFilter::default(), 3).unwrap();
        assert_eq!(r.time_spans.to_pairs(), vec![(10.0, 25.0)]);
    }

    #[test]
    fn distractors_come_from_pool() {
        let p = pool();
        let r = build_record("v", &p[0], &p, &TemplateAuthor, &DeicticFilter::default(), 11).unwrap();
        let correct = r.correct_text().to_string();
        let others: Vec<&String> = r.options.iter().filter(|(k, _)| **k != r.correct_answer).map(|(_, v)| v).collect();
        assert_eq!(others.len(), 3);
        for o in others {
            assert_ne!(*o, correct);
            assert!(p[1..].iter().any(|n| &n.description == o));
        }
        // deterministic per seed
        let again = build_record("v", &p[0], &p, &TemplateAuthor, &DeicticFilter::default(), 11).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn small_pool_is_an_error() {
        let p = pool();
        assert!(build_record("v", &p[0], &p[..3], &TemplateAuthor, &DeicticFilter::default(), 1).is_err());
    }

    struct Stubborn;
    impl QaAuthor for Stubborn {
        fn grounding_query(&self, _: &EventNode, _: u32) -> Result<String> {
            Ok("what happens in this clip".into())
        }
        fn question(&self, n: &EventNode, s: u64) -> Result<QuestionDraft> {
            TemplateAuthor.question(n, s)
        }
    }

    struct FixesOnRetry;
    impl QaAuthor for FixesOnRetry {
        fn grounding_query(&self, _: &EventNode, attempt: u32) -> Result<String> {
            Ok(if attempt == 0 { "the moment right here".into() } else { "when the door opens".into() })
        }
        fn question(&self, n: &EventNode, s: u64) -> Result<QuestionDraft> {
            TemplateAuthor.question(n, s)
        }
    }

    #[test]
    fn deictic_query_rebuilt_once() {
        let p = pool();
        let d = DeicticFilter::default();
        assert!(build_record("v", &p[0], &p, &Stubborn, &d, 1).is_err());
        let r = build_record("v", &p[0], &p, &FixesOnRetry, &d, 1).unwrap();
        assert_eq!(r.grounding_query, "when the door opens");
    }

    #[test]
    fn deictic_filter_matches_whole_words() {
        let d = DeicticFilter::default();
        assert_eq!(d.find("What happens in THIS  clip?"), Some("THIS  clip"));
        assert_eq!(d.find("where is the known dog"), None);
        assert_eq!(d.find("is it here?"), Some("here"));
    }

    #[test]
    fn review_gates() {
        let d = DeicticFilter::default();
        let c = checkers(&d);
        let ok = record("v", "e1", "Which activity is shown?");
        assert!(review_record(&ok, &c).accepted());

        let line = serde_json::to_string(&ok).unwrap();
        let mut value: serde_json::Value = serde_json::from_str(&line).unwrap();
        value.as_object_mut().unwrap().remove("correct_answer");
        let (_, report) = review_line(&value.to_string(), &c);
        assert!(report.schema.is_fail());
        assert_eq!(report.event_id, "e1");
        assert_eq!(report.language, GateVerdict::Skipped);

        let deictic = record("v", "e1", "What happens in this clip?");
        let report = review_record(&deictic, &c);
        assert!(report.language.is_fail());
        assert_eq!(report.text_only, GateVerdict::Skipped);

        let leaky = record("v", "e1", "Which shows the alpha?");
        assert!(review_record(&leaky, &c).text_only.is_fail());

        let far = record("v", "e1", "What happens between 40 and 50 seconds?");
        assert!(review_record(&far, &c).temporal_locality.is_fail());
        let near = record("v", "e1", "What happens between 1 and 2 seconds?");
        assert!(review_record(&near, &c).accepted());
    }

    #[test]
    fn dedup_scope_is_per_video() {
        let recs = vec![record("v1", "e1", "Which activity is shown?"), record("v1", "e2", "Which activity is shown?")];
        let (kept, dropped) = dedup_within_video(recs, 0.8);
        assert_eq!((kept.len(), dropped.len()), (1, 1));
        let recs = vec![record("v1", "e1", "Which activity is shown?"), record("v2", "e1", "Which activity is shown?")];
        assert_eq!(dedup_within_video(recs, 0.8).0.len(), 2);
    }

    #[test]
    fn balancing_round_robin() {
        let recs: Vec<QaRecord> = (0..8).map(|i| record("v", &format!("e{i}"), &format!("question number {i}"))).collect();
        let balanced = dedup_and_balance(recs, 0.8, 5);
        let stats = dataset_stats(&balanced).unwrap();
        assert!(stats.label_histogram.values().all(|&c| c == 2));
        for r in &balanced {
            assert_eq!(r.correct_text(), "alpha one");
            assert!(r.validate().is_ok());
        }
        assert_eq!(dedup_and_balance(balanced.clone(), 0.8, 5), balanced);
    }

    #[test]
    fn split_examples() {
        let one = vec![record("v1", "e1", "q"), record("v1", "e2", "q2")];
        let m = split_by_video(&one, [1.0, 0.0, 0.0], 3).unwrap();
        assert_eq!(m.train, vec!["v1"]);
        assert!(m.val.is_empty() && m.test.is_empty());
        assert!(split_by_video(&one, [0.9, 0.05, 0.05], 3).is_err());
        assert!(split_by_video(&one, [0.5, 0.2, 0.2], 3).is_err());

        let many: Vec<QaRecord> = (0..100).map(|i| record(&format!("v{i:03}"), "e", "q")).collect();
        let a = split_by_video(&many, [0.9, 0.05, 0.05], 42).unwrap();
        let b = split_by_video(&many, [0.9, 0.05, 0.05], 42).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (90, 5, 5));
        let all: BTreeSet<&String> = a.train.iter().chain(&a.val).chain(&a.test).collect();
        assert_eq!(all.len(), 100);
        let few: Vec<QaRecord> = (0..3).map(|i| record(&format!("v{i}"), "e", "q")).collect();
        let m = split_by_video(&few, [0.9, 0.05, 0.05], 1).unwrap();
        assert_eq!((m.train.len(), m.val.len(), m.test.len()), (1, 1, 1));
    }

    #[test]
    fn stats_order_statistics() {
        let mut recs = Vec::new();
        for (i, len) in [10.0, 20.0, 30.0].iter().enumerate() {
            let mut r = record("v", &format!("e{i}"), "q");
            r.time_spans = SpanSet::single(Span::new(0.0, *len).unwrap());
            recs.push(r);
        }
        let s = dataset_stats(&recs).unwrap();
        assert_eq!(s.span_length_mean, 20.0);
        assert_eq!(s.span_length_median, 20.0);
        assert_eq!(s.multi_span_proportion, 0.0);
        assert_eq!(s.label_histogram[&AnswerOption::A], 3);
        assert!(dataset_stats(&[]).is_err());
    }

    #[test]
    fn coalesces_recurring_events() {
        let nodes = vec![
            node("e000", &[(0.0, 6.0)], "a man opens the door"),
            node("e001", &[(6.0, 12.0)], "a dog chases a ball"),
            node("e002", &[(12.0, 18.0)], "a man opens the door"),
        ];
        let out = coalesce_recurring(&nodes, &TokenF1, 0.85).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].spans.to_pairs(), vec![(0.0, 6.0), (12.0, 18.0)]);
    }

    #[test]
    fn two_decimal_wire_format() {
        let mut r = record("v", "e", "q");
        r.time_spans = normalize_spans(&[(61.0, 75.5), (80.125, 90.0)], f64::INFINITY, 0.0).0;
        let line = serde_json::to_string(&r).unwrap();
        assert!(line.contains(r#""time_spans":[[61.00,75.50],[80.12,90.00]]"#), "{line}");
        let keys: Vec<String> = serde_json::from_str::<serde_json::Map<String, serde_json::Value>>(&line).unwrap().keys().cloned().collect();
        for k in ["video_id", "event_id", "time_spans", "event_description", "grounding_query", "question", "options", "correct_answer", "stage1_reason", "stage2_reason"] {
            assert!(keys.contains(&k.to_string()), "missing {k}");
        }
    }


    fn factory_run(seed: u64, jobs: usize) -> FactoryOutput {
        let videos = crate::synth::synth_corpus(seed, 6, 2.0).unwrap();
        let graphs = crate::synth::synth_graphs(&videos, &crate::graph::GraphConfig::default(), 1).unwrap();
        let providers = FactoryProviders {
            author: &TemplateAuthor,
            similarity: &TokenF1,
            locality: &TimeReferenceLocality::default(),
            blind: &OverlapGuesser,
        };
        build_dataset(&graphs, providers, &FactoryConfig { jobs, ..FactoryConfig::default() }, seed).unwrap()
    }

    #[test]
    fn factory_is_deterministic_and_clean() {
        let a = factory_run(21, 1);
        assert_eq!(a, factory_run(21, 4));
        assert!(a.build_failures.is_empty(), "{:?}", a.build_failures);
        assert!(a.reports.iter().all(ReviewReport::accepted), "{:?}", a.reports.iter().find(|r| !r.accepted()));
        assert_eq!(a.records.len(), a.reports.len());
        for r in &a.records {
            r.validate().unwrap();
        }
        assert!(a.records.iter().any(|r| r.time_spans.len() > 1));
        let hist = dataset_stats(&a.records).unwrap().label_histogram;
        let (lo, hi) = (hist.values().min().unwrap(), hist.values().max().unwrap());
        assert!(hi - lo <= 1);
    }
}
