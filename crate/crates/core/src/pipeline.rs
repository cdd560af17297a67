//! Two-stage skim→zoom inference against a pluggable model backend.
//!
//! Stage 1 sends a low-rate global sweep with the grounding query and reads
//! back spans. Stage 2 spends the local budget inside those spans and reads
//! back the answer. Presets A–C are the single-stage baselines that spend
//! the whole budget uniformly.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::budget::{sample_global, sample_spans, BudgetConfig, FrameSelection, FrameSource};
use crate::dataset::QaRecord;
use crate::error::{Error, Result};
use crate::interleave::{
    format_seconds, parse_response, render_response, render_spans, serialize_frames_with, AnswerOption, FrameSample,
    InterleavedResponse,
};
use crate::reward::{score_parts, GoldTarget, RewardBreakdown, RewardConfig};
use crate::seed::rng_for;
use crate::span::{normalize_spans, Span, SpanSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ground,
    Answer,
}

/// One call to the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendRequest {
    pub stage: Stage,
    pub item_id: String,
    pub video_id: String,
    pub duration_s: f64,
    /// Full prompt, serialized frames included.
    pub prompt_text: String,
    /// Native frames referenced by the prompt, in prompt order.
    pub frames: Vec<FrameSample>,
    pub question: String,
    pub options: BTreeMap<AnswerOption, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grounding_query: Option<String>,
    /// Spans the frames were drawn from (answer stage only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spans: Option<SpanSet>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendResponse {
    pub raw_text: String,
}

pub trait Backend: Send + Sync {
    /// Transport problems are [`Error::Transport`]; anything the model says,
    /// however malformed, is a successful response.
    fn generate(&self, request: &BackendRequest) -> Result<BackendResponse>;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn generate(&self, request: &BackendRequest) -> Result<BackendResponse> {
        (**self).generate(request)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn generate(&self, request: &BackendRequest) -> Result<BackendResponse> {
        (**self).generate(request)
    }
}

/// Echoes the gold spans and answer of each known item canonically.
pub struct GoldEcho {
    gold: BTreeMap<String, (SpanSet, AnswerOption)>,
}

impl GoldEcho {
    pub fn new(records: &[QaRecord]) -> Self {
        Self { gold: records.iter().map(|r| (r.item_id(), (r.time_spans.clone(), r.correct_answer))).collect() }
    }
}

impl Backend for GoldEcho {
    fn generate(&self, request: &BackendRequest) -> Result<BackendResponse> {
        let (spans, answer) = self
            .gold
            .get(&request.item_id)
            .ok_or_else(|| Error::UnmatchedId(request.item_id.clone()))?;
        let raw_text = match request.stage {
            Stage::Ground => render_spans(spans),
            Stage::Answer => render_response(spans, Some(*answer), ""),
        };
        Ok(BackendResponse { raw_text })
    }
}

/// Seeded random spans inside the video and a random option.
pub struct RandomBackend {
    pub seed: u64,
}

impl Backend for RandomBackend {
    fn generate(&self, request: &BackendRequest) -> Result<BackendResponse> {
        let stage = match request.stage {
            Stage::Ground => "ground",
            Stage::Answer => "answer",
        };
        let mut rng = rng_for(self.seed, &["random-backend", &request.item_id, stage]);
        let dur = request.duration_s;
        let mut parts = Vec::new();
        for _ in 0..rng.random_range(1..=3) {
            let a = rng.random_range(0.0..dur);
            let b = rng.random_range(0.0..dur);
            let (s, e) = if a <= b { (a, b) } else { (b, a) };
            parts.push(format!("<span>[{},{}]</span>", format_seconds(s), format_seconds(e)));
        }
        let answer = AnswerOption::ALL[rng.random_range(0..4)];
        parts.push(format!("<answer>{answer}</answer>"));
        Ok(BackendResponse { raw_text: parts.join(" ") })
    }
}

/// Fixed corrupt outputs, chosen per item.
pub struct MalformedBackend;

pub const MALFORMED_OUTPUTS: &[&str] = &[
    "<span>[abc,def]</span> <answer>AB</answer>",
    "I think the answer is probably B.",
    "<span>[12.5]</span> <answer></answer> <answer>E</answer>",
    "<span>12,14</span><answer>A",
];

impl Backend for MalformedBackend {
    fn generate(&self, request: &BackendRequest) -> Result<BackendResponse> {
        let pick = crate::seed::derive_seed(0, &[&request.item_id]) as usize % MALFORMED_OUTPUTS.len();
        Ok(BackendResponse { raw_text: MALFORMED_OUTPUTS[pick].to_string() })
    }
}

/// Records every request before forwarding it.
pub struct RecordingBackend<B> {
    pub inner: B,
    log: Mutex<Vec<BackendRequest>>,
}

impl<B> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self { inner, log: Mutex::new(Vec::new()) }
    }

    /// Requests seen so far, sorted by item and stage.
    pub fn requests(&self) -> Vec<BackendRequest> {
        let mut log = self.log.lock().expect("request log poisoned").clone();
        log.sort_by(|a, b| (&a.item_id, a.stage).cmp(&(&b.item_id, b.stage)));
        log
    }
}

impl<B: Backend> Backend for RecordingBackend<B> {
    fn generate(&self, request: &BackendRequest) -> Result<BackendResponse> {
        self.log.lock().expect("request log poisoned").push(request.clone());
        self.inner.generate(request)
    }
}

/// Retries transport errors with exponential backoff.
pub struct RetryingBackend<B> {
    pub inner: B,
    pub retries: u32,
    pub base_delay: Duration,
}

impl<B> RetryingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self { inner, retries: 2, base_delay: Duration::from_millis(200) }
    }
}

impl<B: Backend> Backend for RetryingBackend<B> {
    fn generate(&self, request: &BackendRequest) -> Result<BackendResponse> {
        let mut attempt = 0;
        loop {
            match self.inner.generate(request) {
                Err(Error::Transport(_)) if attempt < self.retries => {
                    std::thread::sleep(self.base_delay * 2u32.pow(attempt));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// `POST {base}/generate` with the request as JSON; expects `{"raw_text": ...}`.
pub struct HttpBackend {
    url: String,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(base_url: &str, timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        Ok(Self { url: format!("{}/generate", base_url.trim_end_matches('/')), client })
    }
}

impl Backend for HttpBackend {
    fn generate(&self, request: &BackendRequest) -> Result<BackendResponse> {
        let response = self
            .client
            .post(&self.url)
            .json(request)
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(|e| Error::Transport(e.to_string()))?;
        response.json::<BackendResponse>().map_err(|e| Error::Transport(e.to_string()))
    }
}

/// One JSON request per line out, one JSON response per line back.
pub struct StreamBackend<R, W> {
    io: Mutex<(R, W)>,
    _child: Option<Child>,
}

impl<R: BufRead + Send, W: Write + Send> StreamBackend<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        Self { io: Mutex::new((reader, writer)), _child: None }
    }
}

impl StreamBackend<BufReader<ChildStdout>, ChildStdin> {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program).args(args).stdin(Stdio::piped()).stdout(Stdio::piped()).spawn()?;
        let stdin = child.stdin.take().ok_or_else(|| Error::Transport("no stdin on backend process".into()))?;
        let stdout = child.stdout.take().ok_or_else(|| Error::Transport("no stdout on backend process".into()))?;
        Ok(Self { io: Mutex::new((BufReader::new(stdout), stdin)), _child: Some(child) })
    }
}

impl<R: BufRead + Send, W: Write + Send> Backend for StreamBackend<R, W> {
    fn generate(&self, request: &BackendRequest) -> Result<BackendResponse> {
        let mut guard = self.io.lock().map_err(|_| Error::Transport("backend stream poisoned".into()))?;
        let (reader, writer) = &mut *guard;
        let mut line = serde_json::to_string(request)?;
        line.push('\n');
        writer.write_all(line.as_bytes()).and_then(|_| writer.flush()).map_err(|e| Error::Transport(e.to_string()))?;
        let mut reply = String::new();
        match reader.read_line(&mut reply) {
            Ok(0) => Err(Error::Transport("backend closed the stream".into())),
            Ok(_) => serde_json::from_str(reply.trim_end()).map_err(|e| Error::Transport(format!("bad backend reply: {e}"))),
            Err(e) => Err(Error::Transport(e.to_string())),
        }
    }
}

/// Prompt assembly and sampling configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Preset {
    /// Single stage, whole budget uniform, no timestamps.
    A,
    /// Single stage, whole budget uniform, timestamps.
    B,
    /// Answering prompt over the whole video, whole budget uniform, timestamps.
    C,
    /// Global skim then span-conditioned zoom, timestamps in both stages.
    D,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::A, Preset::B, Preset::C, Preset::D];

    pub fn label(self) -> &'static str {
        match self {
            Preset::A => "A) single stage, no timestamps",
            Preset::B => "B) single stage + timestamps",
            Preset::C => "C) answering prompt on full video + timestamps",
            Preset::D => "D) two-stage + timestamps",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Preset::A),
            "B" => Ok(Preset::B),
            "C" => Ok(Preset::C),
            "D" => Ok(Preset::D),
            other => Err(Error::InvalidArgument(format!("unknown preset `{other}` (expected A, B, C or D)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub preset: Preset,
    pub budget: BudgetConfig,
    pub reward: RewardConfig,
    /// Composite weight used when scoring results.
    pub gamma: f64,
    /// Probability of feeding gold spans to Stage 2; `None` outside training.
    pub teacher_force_ratio: Option<f64>,
    pub seed: u64,
    /// Maximum records in flight.
    pub jobs: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let reward = RewardConfig::default();
        Self {
            preset: Preset::D,
            budget: BudgetConfig::default(),
            gamma: reward.gamma1,
            reward,
            teacher_force_ratio: None,
            seed: 0,
            jobs: 1,
        }
    }
}

/// Frames spent on one record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetUsage {
    pub global: usize,
    pub local: usize,
    pub shortfall: usize,
    /// Configured `n_g + n_l`; always `global + local + shortfall`.
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineResult {
    pub item_id: String,
    pub video_id: String,
    pub preset: Preset,
    pub predicted_spans: SpanSet,
    pub predicted_answer: Option<AnswerOption>,
    /// Stage-1 output (two-stage preset only).
    pub stage1_raw: Option<String>,
    pub stage2_raw: Option<String>,
    pub reward: RewardBreakdown,
    pub budget: BudgetUsage,
    /// Stage 1 yielded no usable span; Stage 2 swept the whole video.
    pub fallback: bool,
    pub teacher_forced: bool,
    /// Set when a stage failed after retries; other fields hold partial results.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Seeded Bernoulli draw deciding whether Stage 2 sees gold spans.
pub fn teacher_forced(seed: u64, item_id: &str, ratio: f64) -> bool {
    let mut rng = rng_for(seed, &["teacher-force", item_id]);
    rng.random::<f64>() < ratio
}

/// Stage-1 span post-processing: keep individually valid spans in emission
/// order, take the first `k_spans`, then normalize.
pub fn stage1_spans(response: &InterleavedResponse, duration_s: f64, k_spans: usize) -> SpanSet {
    let valid: Vec<(f64, f64)> = response
        .parsed_pairs()
        .into_iter()
        .filter(|p| !normalize_spans(&[*p], duration_s, 0.0).0.is_empty())
        .take(k_spans)
        .collect();
    normalize_spans(&valid, duration_s, 0.0).0
}

fn options_block(record: &QaRecord) -> String {
    record.options.iter().map(|(k, v)| format!("{k}. {v}")).collect::<Vec<_>>().join("\n")
}

fn ground_prompt(frames: &str, record: &QaRecord, k_spans: usize) -> String {
    format!(
        "{frames}\nLocate the moments needed to answer the question. Give up to {k_spans} spans as \
         <span>[start,end]</span> in absolute seconds with two decimals, then a brief rationale.\n\
         Query: {}\nQuestion: {}",
        record.grounding_query, record.question
    )
}

fn answer_prompt(frames: &str, record: &QaRecord, spans: &SpanSet) -> String {
    format!(
        "{frames}\nEvidence spans: {}\nQuestion: {}\n{}\nAnswer using only the frames inside the evidence spans. \
         Reply with exactly one <answer>X</answer>.",
        render_spans(spans),
        record.question,
        options_block(record)
    )
}

fn single_stage_prompt(frames: &str, record: &QaRecord) -> String {
    format!(
        "{frames}\nQuestion: {}\n{}\nGive the supporting spans as <span>[start,end]</span> and the answer as \
         <answer>X</answer>.",
        record.question,
        options_block(record)
    )
}

fn request(stage: Stage, record: &QaRecord, duration_s: f64, prompt_text: String, sel: &FrameSelection) -> BackendRequest {
    BackendRequest {
        stage,
        item_id: record.item_id(),
        video_id: record.video_id.clone(),
        duration_s,
        prompt_text,
        frames: sel.frames.clone(),
        question: record.question.clone(),
        options: record.options.clone(),
        grounding_query: None,
        spans: None,
    }
}

fn whole_video(duration_s: f64) -> Result<SpanSet> {
    Ok(SpanSet::single(Span::new(0.0, duration_s)?))
}

/// Runs one record through the configured preset.
pub fn run_pipeline(source: &FrameSource, record: &QaRecord, backend: &dyn Backend, config: &PipelineConfig) -> Result<PipelineResult> {
    config.budget.validate()?;
    let b = &config.budget;
    let dur = source.duration_s();
    let item_id = record.item_id();
    let gold = GoldTarget { spans: &record.time_spans, answer: record.correct_answer, duration_s: dur };
    let total = b.total();
    let timestamps = config.preset != Preset::A;

    let mut result = PipelineResult {
        item_id: item_id.clone(),
        video_id: record.video_id.clone(),
        preset: config.preset,
        predicted_spans: SpanSet::empty(),
        predicted_answer: None,
        stage1_raw: None,
        stage2_raw: None,
        reward: RewardBreakdown::default(),
        budget: BudgetUsage { global: 0, local: 0, shortfall: total, total },
        fallback: false,
        teacher_forced: false,
        error: None,
    };
    let finish = |mut result: PipelineResult, span_resp: &InterleavedResponse, answer_resp: &InterleavedResponse| {
        result.reward = score_parts(span_resp, answer_resp, gold, b.m_max, config.gamma, &config.reward)?;
        Ok::<_, Error>(result)
    };
    let empty = parse_response("");

    if config.preset != Preset::D {
        let sel = sample_global(source, total)?;
        result.budget.global = sel.frames.len();
        result.budget.shortfall = sel.shortfall;
        let frames = serialize_frames_with(&sel.frames, timestamps)?;
        let req = match config.preset {
            Preset::C => {
                let spans = whole_video(dur)?;
                let mut req = request(Stage::Answer, record, dur, answer_prompt(&frames, record, &spans), &sel);
                req.spans = Some(spans);
                req
            }
            _ => request(Stage::Answer, record, dur, single_stage_prompt(&frames, record), &sel),
        };
        let resp = match backend.generate(&req) {
            Ok(r) => parse_response(&r.raw_text),
            Err(e) => {
                result.error = Some(e.to_string());
                return finish(result, &empty, &empty);
            }
        };
        result.predicted_spans = stage1_spans(&resp, dur, b.k_spans);
        result.predicted_answer = resp.answer;
        result.stage2_raw = Some(resp.raw_text.clone());
        return finish(result, &resp, &resp);
    }

    // Stage 1: global skim and grounding.
    let global = sample_global(source, b.n_g)?;
    let frames = serialize_frames_with(&global.frames, true)?;
    let mut req = request(Stage::Ground, record, dur, ground_prompt(&frames, record, b.k_spans), &global);
    req.grounding_query = Some(record.grounding_query.clone());
    let ground = match backend.generate(&req) {
        Ok(r) => parse_response(&r.raw_text),
        Err(e) => {
            result.error = Some(format!("stage 1: {e}"));
            return finish(result, &empty, &empty);
        }
    };
    result.stage1_raw = Some(ground.raw_text.clone());
    result.predicted_spans = stage1_spans(&ground, dur, b.k_spans);

    // Stage 2: zoom into the spans.
    result.teacher_forced = config.teacher_force_ratio.is_some_and(|r| teacher_forced(config.seed, &item_id, r));
    let zoom_spans = if result.teacher_forced {
        record.time_spans.clone()
    } else if result.predicted_spans.is_empty() {
        result.fallback = true;
        whole_video(dur)?
    } else {
        result.predicted_spans.clone()
    };
    let local = if b.n_l == 0 { FrameSelection::default() } else { sample_spans(source, &zoom_spans, b.n_l, b.cap_factor)? };
    result.budget = BudgetUsage {
        global: global.frames.len(),
        local: local.frames.len(),
        shortfall: global.shortfall + local.shortfall,
        total,
    };
    let frames = serialize_frames_with(&local.frames, true)?;
    let mut req = request(Stage::Answer, record, dur, answer_prompt(&frames, record, &zoom_spans), &local);
    req.spans = Some(zoom_spans);
    let answer = match backend.generate(&req) {
        Ok(r) => parse_response(&r.raw_text),
        Err(e) => {
            result.error = Some(format!("stage 2: {e}"));
            return finish(result, &ground, &empty);
        }
    };
    result.stage2_raw = Some(answer.raw_text.clone());
    result.predicted_answer = answer.answer;
    finish(result, &ground, &answer)
}

/// Runs every record with up to `config.jobs` in flight. Results are sorted
/// by item id. Records whose video has no frame source are an error.
pub fn run_batch(
    sources: &BTreeMap<String, FrameSource>,
    records: &[QaRecord],
    backend: &dyn Backend,
    config: &PipelineConfig,
) -> Result<Vec<PipelineResult>> {
    for r in records {
        if !sources.contains_key(&r.video_id) {
            return Err(Error::Record { id: r.item_id(), reason: format!("no frame manifest for video {}", r.video_id) });
        }
    }
    let next = AtomicUsize::new(0);
    let workers = config.jobs.clamp(1, records.len().max(1));
    let mut results: Vec<Result<PipelineResult>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| {
                    let mut out = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        let Some(record) = records.get(i) else { break };
                        out.push(run_pipeline(&sources[&record.video_id], record, backend, config));
                    }
                    out
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("pipeline worker panicked")).collect()
    });
    results.sort_by(|a, b| match (a, b) {
        (Ok(a), Ok(b)) => a.item_id.cmp(&b.item_id),
        (Err(_), Ok(_)) => std::cmp::Ordering::Less,
        (Ok(_), Err(_)) => std::cmp::Ordering::Greater,
        (Err(_), Err(_)) => std::cmp::Ordering::Equal,
    });
    results.into_iter().collect()
}

/// Aggregate over a batch of results.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub items: usize,
    /// Percent of items answered correctly.
    pub accuracy: f64,
    pub mean_tiou: f64,
    pub mean_reward: f64,
    pub fallbacks: usize,
    pub errors: usize,
}

pub fn summarize(results: &[PipelineResult]) -> Result<RunSummary> {
    if results.is_empty() {
        return Err(Error::EmptyInput("pipeline results"));
    }
    let n = results.len() as f64;
    Ok(RunSummary {
        items: results.len(),
        accuracy: 100.0 * results.iter().filter(|r| r.reward.correct).count() as f64 / n,
        mean_tiou: results.iter().map(|r| r.reward.tiou).sum::<f64>() / n,
        mean_reward: results.iter().map(|r| r.reward.r_total).sum::<f64>() / n,
        fallbacks: results.iter().filter(|r| r.fallback).count(),
        errors: results.iter().filter(|r| r.error.is_some()).count(),
    })
}

/// Rows A–D against one accuracy column per suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub suites: Vec<String>,
    /// `(preset, accuracy per suite)`.
    pub rows: Vec<(Preset, Vec<f64>)>,
}

impl AblationTable {
    pub fn render(&self) -> String {
        let label_w = Preset::ALL.iter().map(|p| p.label().len()).max().unwrap_or(0).max("Config".len());
        let col_w: Vec<usize> = self.suites.iter().map(|s| s.len().max(6)).collect();
        let mut out = format!("{:<label_w$}", "Config");
        for (s, w) in self.suites.iter().zip(&col_w) {
            out.push_str(&format!("  {s:>w$}"));
        }
        out.push('\n');
        for (preset, accs) in &self.rows {
            out.push_str(&format!("{:<label_w$}", preset.label()));
            for (a, w) in accs.iter().zip(&col_w) {
                out.push_str(&format!("  {:>w$}", format!("{a:.1}")));
            }
            out.push('\n');
        }
        out
    }
}

/// One suite: its name, its records and the sources they reference.
pub struct Suite<'a> {
    pub name: String,
    pub sources: &'a BTreeMap<String, FrameSource>,
    pub records: &'a [QaRecord],
}

/// Runs all four presets over each suite with the same backend.
pub fn run_ablation(suites: &[Suite<'_>], backend: &dyn Backend, base: &PipelineConfig) -> Result<AblationTable> {
    if suites.is_empty() {
        return Err(Error::EmptyInput("ablation suites"));
    }
    let mut rows = Vec::new();
    for preset in Preset::ALL {
        let config = PipelineConfig { preset, ..base.clone() };
        let mut accs = Vec::new();
        for suite in suites {
            let results = run_batch(suite.sources, suite.records, backend, &config)?;
            accs.push(summarize(&results)?.accuracy);
        }
        rows.push((preset, accs));
    }
    Ok(AblationTable { suites: suites.iter().map(|s| s.name.clone()).collect(), rows })
}
