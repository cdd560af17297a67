//! Frame selection under a fixed budget.
//!
//! Stage 1 skims the whole timeline with `n_g` frames; Stage 2 spends `n_l`
//! frames inside the predicted spans. Both use midpoint-uniform targets
//! snapped to the nearest native frame, so the output only ever contains
//! frames the decoder actually has. Collisions after snapping collapse and
//! are reported as shortfall rather than padded.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interleave::FrameSample;
use crate::span::{Span, SpanSet};

/// Budget knobs for the two-stage protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetConfig {
    /// Global (Stage 1) frames.
    pub n_g: usize,
    /// Zoom (Stage 2) frames.
    pub n_l: usize,
    /// Most spans a Stage-1 response may emit before format checks penalize it.
    pub m_max: usize,
    /// Inference-time span cap.
    pub k_spans: usize,
    /// Per-span allocation cap relative to the proportional share.
    pub cap_factor: f64,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self { n_g: 64, n_l: 64, m_max: 5, k_spans: 5, cap_factor: 1.5 }
    }
}

impl BudgetConfig {
    pub fn total(&self) -> usize {
        self.n_g + self.n_l
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_g == 0 {
            return Err(Error::InvalidArgument("budget.n_g must be positive".into()));
        }
        if self.m_max == 0 || self.k_spans == 0 {
            return Err(Error::InvalidArgument("budget.m_max and budget.k_spans must be at least 1".into()));
        }
        if !(self.cap_factor.is_finite() && self.cap_factor > 0.0) {
            return Err(Error::InvalidArgument("budget.cap_factor must be positive".into()));
        }
        Ok(())
    }
}

/// Immutable snapshot of a video's native decode grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSource {
    video_id: String,
    duration_s: f64,
    frames: Vec<FrameSample>,
}

impl FrameSource {
    pub fn new(video_id: impl Into<String>, duration_s: f64, frames: Vec<FrameSample>) -> Result<Self> {
        let video_id = video_id.into();
        if !(duration_s.is_finite() && duration_s > 0.0) {
            return Err(Error::InvalidArgument(format!("video {video_id}: duration must be positive")));
        }
        for (i, f) in frames.iter().enumerate() {
            if !(f.timestamp_s >= 0.0 && f.timestamp_s <= duration_s) {
                return Err(Error::Manifest { line: i + 1, reason: format!("timestamp {} outside [0, {duration_s}]", f.timestamp_s) });
            }
            if i > 0 && frames[i - 1].timestamp_s >= f.timestamp_s {
                return Err(Error::Manifest { line: i + 1, reason: "timestamps must strictly increase".into() });
            }
        }
        Ok(Self { video_id, duration_s, frames })
    }

    /// Regular grid at `fps` starting at 0.
    pub fn uniform(video_id: impl Into<String>, duration_s: f64, fps: f64) -> Result<Self> {
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::InvalidArgument("fps must be positive".into()));
        }
        let count = (duration_s * fps).floor() as usize + 1;
        let frames = (0..count)
            .map(|i| FrameSample { source_index: i, timestamp_s: i as f64 / fps })
            .filter(|f| f.timestamp_s <= duration_s)
            .collect();
        Self::new(video_id, duration_s, frames)
    }

    /// Parses a `index<TAB>timestamp_s` manifest. A `# duration_s=<x>` comment
    /// sets the duration; without one the last timestamp is used.
    pub fn parse_manifest(video_id: impl Into<String>, text: &str) -> Result<Self> {
        let mut duration = None;
        let mut frames = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(v) = comment.trim().strip_prefix("duration_s=") {
                    let d = v.trim().parse::<f64>().map_err(|e| Error::Manifest { line: line_no, reason: e.to_string() })?;
                    duration = Some(d);
                }
                continue;
            }
            let mut fields = line.split('\t');
            let (Some(idx), Some(ts), None) = (fields.next(), fields.next(), fields.next()) else {
                return Err(Error::Manifest { line: line_no, reason: "expected `index<TAB>timestamp_s`".into() });
            };
            let source_index = idx.trim().parse().map_err(|e| Error::Manifest { line: line_no, reason: format!("bad index: {e}") })?;
            let timestamp_s = ts.trim().parse().map_err(|e| Error::Manifest { line: line_no, reason: format!("bad timestamp: {e}") })?;
            frames.push(FrameSample { source_index, timestamp_s });
        }
        let duration = match duration {
            Some(d) => d,
            None => frames.last().map(|f| f.timestamp_s).ok_or(Error::EmptyInput("frame manifest"))?,
        };
        Self::new(video_id, duration, frames)
    }

    /// Loads `<dir>/<video_id>.tsv`-style files; the id is the file stem.
    pub fn load_manifest(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        Self::parse_manifest(id, &text)
    }

    pub fn to_manifest(&self) -> String {
        let mut out = format!("# duration_s={}\n", self.duration_s);
        for f in &self.frames {
            out.push_str(&format!("{}\t{}\n", f.source_index, f.timestamp_s));
        }
        out
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn duration_s(&self) -> f64 {
        self.duration_s
    }

    pub fn frames(&self) -> &[FrameSample] {
        &self.frames
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    fn frames_within(&self, span: &Span) -> &[FrameSample] {
        let lo = self.frames.partition_point(|f| f.timestamp_s < span.start());
        let hi = self.frames.partition_point(|f| f.timestamp_s <= span.end());
        &self.frames[lo..hi]
    }
}

/// Frames chosen for one stage plus the budget accounting.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FrameSelection {
    pub frames: Vec<FrameSample>,
    pub requested: usize,
    /// Requested frames that could not be placed (`requested - frames.len()`).
    pub shortfall: usize,
    /// Frames allotted to each span before snapping (Stage 2 only).
    pub per_span: Vec<usize>,
}

/// Midpoints `start + (j - 0.5) * len / n` for `j = 1..=n`.
pub fn midpoint_targets(start: f64, end: f64, n: usize) -> Vec<f64> {
    let step = (end - start) / n as f64;
    (1..=n).map(|j| start + (j as f64 - 0.5) * step).collect()
}

fn nearest(frames: &[FrameSample], t: f64) -> usize {
    let idx = frames.partition_point(|f| f.timestamp_s < t);
    if idx == 0 {
        return 0;
    }
    if idx == frames.len() {
        return frames.len() - 1;
    }
    // ties go to the earlier frame
    if t - frames[idx - 1].timestamp_s <= frames[idx].timestamp_s - t {
        idx - 1
    } else {
        idx
    }
}

fn snap(frames: &[FrameSample], targets: &[f64]) -> Vec<FrameSample> {
    let mut out: Vec<FrameSample> = Vec::with_capacity(targets.len());
    let mut last = None;
    for &t in targets {
        let i = nearest(frames, t);
        if last != Some(i) {
            out.push(frames[i]);
            last = Some(i);
        }
    }
    out
}

/// Uniform global skim over `[0, duration]`.
pub fn sample_global(source: &FrameSource, n_g: usize) -> Result<FrameSelection> {
    if n_g == 0 {
        return Err(Error::InvalidArgument("n_g must be at least 1".into()));
    }
    if source.is_empty() {
        return Err(Error::EmptyInput("frame source"));
    }
    let targets = midpoint_targets(0.0, source.duration_s, n_g);
    let frames = snap(&source.frames, &targets);
    let shortfall = n_g - frames.len();
    Ok(FrameSelection { frames, requested: n_g, shortfall, per_span: Vec::new() })
}

/// Splits `total` across `weights` proportionally with largest-remainder
/// rounding. Ties in the remainder go to the lower index.
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = alloc.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        alloc[i] += 1;
    }
    alloc
}

/// Per-span allocation of `n_l` frames: proportional to length, each span
/// capped at `ceil(cap_factor * share)` and at its native frame count, with
/// any surplus handed to spans that still have headroom.
pub fn allocate_span_budget(lengths: &[f64], capacities: &[usize], n_l: usize, cap_factor: f64) -> Vec<usize> {
    let total_len: f64 = lengths.iter().sum();
    let limits: Vec<usize> = lengths
        .iter()
        .zip(capacities)
        .map(|(len, &cap)| {
            let share = n_l as f64 * len / total_len;
            ((cap_factor * share).ceil() as usize).min(cap)
        })
        .collect();

    let mut alloc: Vec<usize> =
        largest_remainder(lengths, n_l).into_iter().zip(&limits).map(|(a, &lim)| a.min(lim)).collect();

    loop {
        let surplus = n_l - alloc.iter().sum::<usize>();
        if surplus == 0 {
            break;
        }
        let weights: Vec<f64> =
            lengths.iter().enumerate().map(|(i, len)| if alloc[i] < limits[i] { *len } else { 0.0 }).collect();
        if weights.iter().all(|w| *w == 0.0) {
            break;
        }
        let extra = largest_remainder(&weights, surplus);
        let mut progressed = false;
        for i in 0..alloc.len() {
            let add = extra[i].min(limits[i] - alloc[i]);
            if add > 0 {
                alloc[i] += add;
                progressed = true;
            }
        }
        if !progressed {
            // Remainders all landed on full spans; place one frame at a time.
            match (0..alloc.len()).filter(|&i| alloc[i] < limits[i]).max_by(|&a, &b| lengths[a].total_cmp(&lengths[b]).then(b.cmp(&a))) {
                Some(i) => alloc[i] += 1,
                None => break,
            }
        }
    }
    alloc
}

/// Span-conditioned zoom: `n_l` frames drawn from inside `spans` only.
pub fn sample_spans(source: &FrameSource, spans: &SpanSet, n_l: usize, cap_factor: f64) -> Result<FrameSelection> {
    if spans.is_empty() {
        return Err(Error::EmptyInput("span set"));
    }
    if n_l == 0 {
        return Err(Error::InvalidArgument("n_l must be at least 1".into()));
    }
    let within: Vec<&[FrameSample]> = spans.iter().map(|s| source.frames_within(s)).collect();
    let lengths: Vec<f64> = spans.iter().map(Span::length).collect();
    let capacities: Vec<usize> = within.iter().map(|w| w.len()).collect();
    let per_span = allocate_span_budget(&lengths, &capacities, n_l, cap_factor);

    let mut frames = Vec::with_capacity(n_l);
    for ((span, native), &count) in spans.iter().zip(&within).zip(&per_span) {
        if count == 0 || native.is_empty() {
            continue;
        }
        frames.extend(snap(native, &midpoint_targets(span.start(), span.end(), count)));
    }
    let shortfall = n_l - frames.len();
    Ok(FrameSelection { frames, requested: n_l, shortfall, per_span })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::span::normalize_spans;

    fn dense(duration: f64) -> FrameSource {
        FrameSource::uniform("v", duration, 100.0).unwrap()
    }

    fn times(sel: &FrameSelection) -> Vec<f64> {
        sel.frames.iter().map(|f| f.timestamp_s).collect()
    }

    #[test]
    fn global_midpoints() {
        let sel = sample_global(&dense(100.0), 4).unwrap();
        assert_eq!(times(&sel), vec![12.5, 37.5, 62.5, 87.5]);
        assert_eq!(sel.shortfall, 0);
        assert_eq!(times(&sample_global(&dense(100.0), 1).unwrap()), vec![50.0]);
        assert!(sample_global(&dense(100.0), 0).is_err());
    }

    #[test]
    fn global_collapses_duplicates_on_sparse_grid() {
        let src = FrameSource::uniform("v", 10.0, 0.5).unwrap(); // frames at 0, 2, ..., 10
        let sel = sample_global(&src, 20).unwrap();
        assert_eq!(sel.frames.len() + sel.shortfall, 20);
        assert!(sel.shortfall > 0);
        assert!(sel.frames.windows(2).all(|w| w[0].timestamp_s < w[1].timestamp_s));
    }

    #[test]
    fn span_allocation_proportional() {
        let (spans, _) = normalize_spans(&[(10.0, 20.0), (40.0, 60.0)], 100.0, 0.0);
        let sel = sample_spans(&dense(100.0), &spans, 6, 1.5).unwrap();
        assert_eq!(sel.per_span, vec![2, 4]);
        assert_eq!(times(&sel), vec![12.5, 17.5, 42.5, 47.5, 52.5, 57.5]);
    }

    #[test]
    fn single_span_midpoints() {
        let (spans, _) = normalize_spans(&[(0.0, 30.0)], 100.0, 0.0);
        let sel = sample_spans(&dense(100.0), &spans, 3, 1.5).unwrap();
        assert_eq!(times(&sel), vec![5.0, 15.0, 25.0]);
    }

    #[test]
    fn empty_spans_rejected() {
        assert!(matches!(sample_spans(&dense(10.0), &SpanSet::empty(), 4, 1.5), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn largest_remainder_ties_and_totals() {
        assert_eq!(largest_remainder(&[1.0, 1.0, 1.0], 4), vec![2, 1, 1]);
        assert_eq!(largest_remainder(&[10.0, 20.0], 6), vec![2, 4]);
        assert_eq!(largest_remainder(&[1.0, 2.0, 3.0], 7).iter().sum::<usize>(), 7);
    }

    #[test]
    fn caps_redistribute_and_report() {
        // Span 0 has only 2 native frames; the rest moves to span 1.
        assert_eq!(allocate_span_budget(&[10.0, 10.0], &[2, 100], 10, 1.5), vec![2, 8]);
        // Tight caps limit what can be placed at all.
        assert_eq!(allocate_span_budget(&[10.0, 10.0], &[100, 100], 10, 0.5), vec![3, 3]);
        // Capacity exhausted everywhere.
        assert_eq!(allocate_span_budget(&[1.0, 1.0], &[1, 1], 10, 1.5), vec![1, 1]);
    }

    #[test]
    fn sparse_span_reports_shortfall() {
        let src = FrameSource::uniform("v", 100.0, 1.0).unwrap();
        let (spans, _) = normalize_spans(&[(10.2, 12.8)], 100.0, 0.0); // frames 11, 12 only
        let sel = sample_spans(&src, &spans, 8, 1.5).unwrap();
        assert_eq!(times(&sel), vec![11.0, 12.0]);
        assert_eq!(sel.shortfall, 6);
    }

    #[test]
    fn manifest_round_trip() {
        let src = FrameSource::uniform("clip7", 3.0, 2.0).unwrap();
        let text = src.to_manifest();
        let back = FrameSource::parse_manifest("clip7", &text).unwrap();
        assert_eq!(back, src);
        let no_header = FrameSource::parse_manifest("x", "0\t0.0\n1\t0.5\n").unwrap();
        assert_eq!(no_header.duration_s(), 0.5);
        assert!(FrameSource::parse_manifest("x", "0 0.0\n").is_err());
        assert!(FrameSource::parse_manifest("x", "0\t1.0\n1\t0.5\n").is_err());
    }
}
