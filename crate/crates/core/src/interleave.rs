//! Timestamp injection for prompts and the interleaved span/answer grammar.
//!
//! Wire-visible forms:
//!
//! ```text
//! <image> @ 12.50s <image> @ 37.50s
//! <span>[3.50,9.25]</span> ... <answer>B</answer>
//! ```
//!
//! Rendering is canonical (two decimals, round-half-even). Parsing is lenient
//! about whitespace inside tags and never fails; malformation is recorded on
//! the parsed response and surfaces through the format scores.

use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::span::SpanSet;

pub const IMAGE_TOKEN: &str = "<image>";

static SPAN_TAG: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?is)<\s*span\s*>(.*?)<\s*/\s*span\s*>").unwrap());
static SPAN_BODY: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^\s*\[\s*([+-]?\d+(?:\.\d+)?)\s*,\s*([+-]?\d+(?:\.\d+)?)\s*\]\s*$").unwrap()
});
static TWO_DECIMALS: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^[+-]?\d+\.\d{2}$").unwrap());
static ANSWER_TAG: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?is)<\s*answer\s*>(.*?)<\s*/\s*answer\s*>").unwrap());

/// One of the four multiple-choice labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AnswerOption {
    A,
    B,
    C,
    D,
}

impl AnswerOption {
    pub const ALL: [AnswerOption; 4] = [Self::A, Self::B, Self::C, Self::D];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn letter(self) -> char {
        (b'A' + self as u8) as char
    }
}

impl fmt::Display for AnswerOption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl FromStr for AnswerOption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" => Ok(Self::A),
            "B" => Ok(Self::B),
            "C" => Ok(Self::C),
            "D" => Ok(Self::D),
            other => Err(Error::InvalidArgument(format!("not an option label: `{other}`"))),
        }
    }
}

/// A sampled frame: native frame index plus absolute timestamp in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameSample {
    pub source_index: usize,
    pub timestamp_s: f64,
}

/// Renders seconds with exactly two decimals, rounding half to even.
///
/// Rounding acts on the exact binary value, so `0.125` becomes `0.12` while
/// `2.675` (stored just below the tie) becomes `2.67`.
pub fn format_seconds(t: f64) -> String {
    format!("{t:.2}")
}

/// Serializes frames as `<image> @ <t>s` tokens separated by single spaces.
pub fn serialize_frames(frames: &[FrameSample]) -> Result<String> {
    serialize_frames_with(frames, true)
}

/// Like [`serialize_frames`], optionally omitting the timestamps (bare
/// image placeholders), which is what a prompt without timestamp injection
/// looks like.
pub fn serialize_frames_with(frames: &[FrameSample], timestamps: bool) -> Result<String> {
    for (i, w) in frames.windows(2).enumerate() {
        if w[0].timestamp_s.partial_cmp(&w[1].timestamp_s).is_none_or(|o| o.is_gt()) {
            return Err(Error::UnorderedFrames(i + 1));
        }
    }
    if let Some(i) = frames.iter().position(|f| !f.timestamp_s.is_finite() || f.timestamp_s < 0.0) {
        return Err(Error::UnorderedFrames(i));
    }
    let parts: Vec<String> = frames
        .iter()
        .map(|f| {
            if timestamps {
                format!("{IMAGE_TOKEN} @ {}s", format_seconds(f.timestamp_s))
            } else {
                IMAGE_TOKEN.to_string()
            }
        })
        .collect();
    Ok(parts.join(" "))
}

/// One `<span>...</span>` occurrence as emitted by the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanCandidate {
    /// Tag body, verbatim.
    pub text: String,
    /// Numeric bounds when the body matched `[a,b]`.
    pub bounds: Option<(f64, f64)>,
    /// Both numbers were written with exactly two decimals.
    pub two_decimals: bool,
}

impl SpanCandidate {
    fn parse(body: &str) -> Self {
        let text = body.to_string();
        let Some(caps) = SPAN_BODY.captures(body) else {
            return Self { text, bounds: None, two_decimals: false };
        };
        let (a, b) = (&caps[1], &caps[2]);
        match (a.parse::<f64>(), b.parse::<f64>()) {
            (Ok(s), Ok(e)) if s.is_finite() && e.is_finite() => Self {
                text,
                bounds: Some((s, e)),
                two_decimals: TWO_DECIMALS.is_match(a) && TWO_DECIMALS.is_match(b),
            },
            _ => Self { text, bounds: None, two_decimals: false },
        }
    }
}

/// A parsed model output `S = [T; A]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterleavedResponse {
    pub raw_text: String,
    /// Span tags in emission order.
    pub span_candidates: Vec<SpanCandidate>,
    /// Present only when exactly one well-formed answer tag was found.
    pub answer: Option<AnswerOption>,
    pub answer_tag_count: usize,
    /// Text outside the span and answer tags.
    pub rationale_text: String,
}

impl InterleavedResponse {
    /// Numerically parsed span bounds in emission order.
    pub fn parsed_pairs(&self) -> Vec<(f64, f64)> {
        self.span_candidates.iter().filter_map(|c| c.bounds).collect()
    }
}

/// Parses arbitrary text. Total: malformed input yields empty fields.
pub fn parse_response(raw_text: &str) -> InterleavedResponse {
    let span_candidates: Vec<SpanCandidate> =
        SPAN_TAG.captures_iter(raw_text).map(|c| SpanCandidate::parse(&c[1])).collect();

    let answer_bodies: Vec<&str> =
        ANSWER_TAG.captures_iter(raw_text).map(|c| c.get(1).map_or("", |m| m.as_str())).collect();
    let answer = match answer_bodies.as_slice() {
        [only] => only.trim().parse::<AnswerOption>().ok(),
        _ => None,
    };

    let stripped = SPAN_TAG.replace_all(raw_text, " ");
    let stripped = ANSWER_TAG.replace_all(&stripped, " ");
    let rationale_text = stripped.split_whitespace().collect::<Vec<_>>().join(" ");

    InterleavedResponse {
        raw_text: raw_text.to_string(),
        span_candidates,
        answer,
        answer_tag_count: answer_bodies.len(),
        rationale_text,
    }
}

/// Canonical `<span>[a,b]</span>` rendering of a span set.
pub fn render_spans(spans: &SpanSet) -> String {
    spans
        .iter()
        .map(|s| format!("<span>[{},{}]</span>", format_seconds(s.start()), format_seconds(s.end())))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn render_answer(option: AnswerOption) -> String {
    format!("<answer>{option}</answer>")
}

/// Canonical interleaved response: spans, optional rationale, optional answer.
pub fn render_response(spans: &SpanSet, answer: Option<AnswerOption>, rationale: &str) -> String {
    let mut parts = Vec::new();
    if !spans.is_empty() {
        parts.push(render_spans(spans));
    }
    if !rationale.trim().is_empty() {
        parts.push(rationale.trim().to_string());
    }
    if let Some(a) = answer {
        parts.push(render_answer(a));
    }
    parts.join(" ")
}

/// Graded timestamp well-formedness in `{0, 0.2, ..., 1.0}`.
///
/// Zero when no span tag parses numerically. Otherwise the fraction of:
/// every tag parsed, every tag written with two decimals, every span
/// ordered, every span inside `[0, duration_s]`, and tag count `<= m_max`.
pub fn fmt_time_score(response: &InterleavedResponse, duration_s: f64, m_max: usize) -> f64 {
    let candidates = &response.span_candidates;
    let parsed = response.parsed_pairs();
    if parsed.is_empty() {
        return 0.0;
    }
    let checks = [
        parsed.len() == candidates.len(),
        candidates.iter().all(|c| c.two_decimals),
        parsed.iter().all(|&(s, e)| s < e),
        parsed.iter().all(|&(s, e)| s >= 0.0 && e <= duration_s && s <= duration_s && e >= 0.0),
        candidates.len() <= m_max,
    ];
    checks.iter().filter(|&&ok| ok).count() as f64 / checks.len() as f64
}

/// 1 iff exactly one answer tag holding a single option letter.
pub fn fmt_ans_score(response: &InterleavedResponse) -> f64 {
    if response.answer_tag_count == 1 && response.answer.is_some() {
        1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::span::normalize_spans;

    fn frame(t: f64) -> FrameSample {
        FrameSample { source_index: 0, timestamp_s: t }
    }

    #[test]
    fn serializes_frames() {
        assert_eq!(serialize_frames(&[frame(2.0), frame(4.0)]).unwrap(), "<image> @ 2.00s <image> @ 4.00s");
        assert_eq!(serialize_frames(&[]).unwrap(), "");
        assert_eq!(serialize_frames(&[frame(0.333)]).unwrap(), "<image> @ 0.33s");
        assert!(matches!(serialize_frames(&[frame(4.0), frame(2.0)]), Err(Error::UnorderedFrames(1))));
        assert_eq!(serialize_frames_with(&[frame(1.0), frame(2.0)], false).unwrap(), "<image> <image>");
    }

    #[test]
    fn half_even_rounding() {
        assert_eq!(format_seconds(0.125), "0.12");
        assert_eq!(format_seconds(0.375), "0.38");
        assert_eq!(format_seconds(1858.0), "1858.00");
        assert_eq!(format_seconds(0.005), "0.01");
        assert_eq!(format_seconds(2.675), "2.67");
    }

    #[test]
    fn parses_span_and_answer() {
        let r = parse_response("<span>[3.50,9.25]</span> the cup is lifted <answer>B</answer>");
        assert_eq!(r.parsed_pairs(), vec![(3.5, 9.25)]);
        assert_eq!(r.answer, Some(AnswerOption::B));
        assert_eq!(r.rationale_text, "the cup is lifted");
        assert_eq!(fmt_ans_score(&r), 1.0);
        assert_eq!(fmt_time_score(&r, 10.0, 5), 1.0);
    }

    #[test]
    fn rejects_bad_answers() {
        let r = parse_response("<answer>E</answer>");
        assert!(r.span_candidates.is_empty());
        assert_eq!(r.answer, None);
        assert_eq!(fmt_ans_score(&r), 0.0);

        let r = parse_response("free text, no tags");
        assert!(r.span_candidates.is_empty() && r.answer.is_none());

        let r = parse_response("<answer>A</answer><answer>A</answer>");
        assert_eq!(r.answer, None);
        assert_eq!(fmt_ans_score(&r), 0.0);

        assert_eq!(fmt_ans_score(&parse_response("<answer>AB</answer>")), 0.0);
        assert_eq!(fmt_ans_score(&parse_response("<answer>A</answer>")), 1.0);
        assert_eq!(fmt_ans_score(&parse_response("< answer > C </ answer >")), 1.0);
    }

    #[test]
    fn lenient_whitespace() {
        let r = parse_response("< span >[ 1.00 , 2.50 ]</ span >");
        assert_eq!(r.parsed_pairs(), vec![(1.0, 2.5)]);
        assert!(r.span_candidates[0].two_decimals);
    }

    #[test]
    fn fmt_time_grading() {
        let r = parse_response("<span>[9.00,3.00]</span>");
        assert_eq!(fmt_time_score(&r, 10.0, 5), 0.8);
        assert_eq!(fmt_time_score(&parse_response("<span>[abc,def]</span>"), 10.0, 5), 0.0);
        assert_eq!(fmt_time_score(&parse_response("no spans"), 10.0, 5), 0.0);

        // one unparsable tag among parsed ones: fails "all parsed" and "two decimals"
        let r = parse_response("<span>[1.00,2.00]</span><span>[x,y]</span>");
        assert_eq!(fmt_time_score(&r, 10.0, 5), 0.6);
        // out of range and one decimal
        let r = parse_response("<span>[1.5,20.0]</span>");
        assert_eq!(fmt_time_score(&r, 10.0, 5), 0.6);
        // too many spans
        let r = parse_response("<span>[1.00,2.00]</span><span>[3.00,4.00]</span>");
        assert_eq!(fmt_time_score(&r, 10.0, 1), 0.8);
    }

    #[test]
    fn render_then_parse() {
        let (spans, _) = normalize_spans(&[(1.234, 5.0), (7.0, 9.999)], 100.0, 0.0);
        let text = render_response(&spans, Some(AnswerOption::D), "because");
        assert_eq!(text, "<span>[1.23,5.00]</span> <span>[7.00,10.00]</span> because <answer>D</answer>");
        let r = parse_response(&text);
        assert_eq!(r.parsed_pairs(), vec![(1.23, 5.0), (7.0, 10.0)]);
        assert_eq!(r.answer, Some(AnswerOption::D));
    }
}
