//! Composite span/answer reward.
//!
//! ```text
//! R     = (1 - gamma) * R_loc + gamma * R_ans
//! R_loc = (1 - alpha) * tIoU  + alpha * Fmt_time
//! R_ans = (1 - beta)  * 1[A = A*] + beta * Fmt_ans
//! ```
//!
//! Convex combinations are evaluated as `a + w * (b - a)`, which returns `a`
//! exactly when `a == b`. A response that reproduces the gold spans and the
//! gold option therefore scores exactly 1.0 for any weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interleave::{fmt_ans_score, fmt_time_score, AnswerOption, InterleavedResponse};
use crate::span::{multi_span_tiou, normalize_spans, SpanSet};

/// Reward weights, curriculum and optional shaping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma0: f64,
    pub gamma1: f64,
    pub ramp_steps: u64,
    /// `(threshold, bonus)` pairs, ascending by threshold. `None` uses raw tIoU.
    pub shaping_thresholds: Option<Vec<(f64, f64)>>,
    pub length_penalty_per_char_over: f64,
    pub max_rationale_chars: usize,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.1,
            gamma0: 0.3,
            gamma1: 0.7,
            ramp_steps: 1000,
            shaping_thresholds: None,
            length_penalty_per_char_over: 1e-4,
            max_rationale_chars: 2000,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("reward.{name} = {v} outside [0, 1]")))
            }
        };
        unit("alpha", self.alpha)?;
        unit("beta", self.beta)?;
        unit("gamma0", self.gamma0)?;
        unit("gamma1", self.gamma1)?;
        if !(self.length_penalty_per_char_over.is_finite() && self.length_penalty_per_char_over >= 0.0) {
            return Err(Error::InvalidArgument("reward.length_penalty_per_char_over must be >= 0".into()));
        }
        if let Some(th) = &self.shaping_thresholds {
            if th.windows(2).any(|w| w[0].0 > w[1].0) {
                return Err(Error::InvalidArgument("reward.shaping thresholds must ascend".into()));
            }
            if th.iter().any(|&(_, bonus)| !(bonus.is_finite() && bonus >= 0.0)) {
                return Err(Error::InvalidArgument("reward.shaping bonuses must be non-negative".into()));
            }
        }
        Ok(())
    }
}

/// Every term of the composite reward for one response.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub tiou: f64,
    pub fmt_time: f64,
    pub fmt_ans: f64,
    pub correct: bool,
    pub r_loc: f64,
    pub r_ans: f64,
    pub r_total: f64,
}

fn lerp(a: f64, b: f64, w: f64) -> f64 {
    (a + w * (b - a)).clamp(0.0, 1.0)
}

pub fn loc_reward(pred: &SpanSet, gold: &SpanSet, fmt_time: f64, alpha: f64) -> Result<f64> {
    let tiou = multi_span_tiou(pred, gold)?;
    Ok(loc_reward_from_tiou(tiou, fmt_time, alpha))
}

pub fn loc_reward_from_tiou(tiou: f64, fmt_time: f64, alpha: f64) -> f64 {
    lerp(tiou, fmt_time, alpha)
}

pub fn ans_reward(answer: Option<AnswerOption>, gold: AnswerOption, fmt_ans: f64, beta: f64) -> f64 {
    let hit = if answer == Some(gold) { 1.0 } else { 0.0 };
    lerp(hit, fmt_ans, beta)
}

pub fn composite_reward(r_loc: f64, r_ans: f64, gamma: f64) -> f64 {
    lerp(r_loc, r_ans, gamma)
}

/// Linear ramp from `gamma0` at step 0 to `gamma1` at `ramp_steps`, flat after.
pub fn gamma_schedule(step: u64, config: &RewardConfig) -> f64 {
    if config.ramp_steps == 0 || step >= config.ramp_steps {
        return config.gamma1;
    }
    let frac = step as f64 / config.ramp_steps as f64;
    config.gamma0 + frac * (config.gamma1 - config.gamma0)
}

/// tIoU plus every bonus whose threshold it reaches, clamped to `[0, 1]`.
pub fn shaped_tvg_reward(tiou: f64, thresholds: &[(f64, f64)]) -> f64 {
    let bonus: f64 = thresholds.iter().filter(|&&(t, _)| t <= tiou).map(|&(_, b)| b).sum();
    (tiou + bonus).clamp(0.0, 1.0)
}

/// Inputs needed to score a response against its gold record.
#[derive(Debug, Clone, Copy)]
pub struct GoldTarget<'a> {
    pub spans: &'a SpanSet,
    pub answer: AnswerOption,
    pub duration_s: f64,
}

/// Scores a full interleaved response (spans and answer in one text).
pub fn score_response(
    response: &InterleavedResponse,
    gold: GoldTarget<'_>,
    m_max: usize,
    gamma: f64,
    config: &RewardConfig,
) -> Result<RewardBreakdown> {
    score_parts(response, response, gold, m_max, gamma, config)
}

/// Scores a two-stage run where spans and answer come from separate responses.
///
/// The length penalty counts rationale characters from both responses.
pub fn score_parts(
    span_response: &InterleavedResponse,
    answer_response: &InterleavedResponse,
    gold: GoldTarget<'_>,
    m_max: usize,
    gamma: f64,
    config: &RewardConfig,
) -> Result<RewardBreakdown> {
    let (pred, _) = normalize_spans(&span_response.parsed_pairs(), gold.duration_s, 0.0);
    let raw_tiou = multi_span_tiou(&pred, gold.spans)?;
    let tiou = match &config.shaping_thresholds {
        Some(th) => shaped_tvg_reward(raw_tiou, th),
        None => raw_tiou,
    };
    let fmt_time = fmt_time_score(span_response, gold.duration_s, m_max);
    let fmt_ans = fmt_ans_score(answer_response);
    let correct = answer_response.answer == Some(gold.answer);

    let r_loc = loc_reward_from_tiou(tiou, fmt_time, config.alpha);
    let r_ans = ans_reward(answer_response.answer, gold.answer, fmt_ans, config.beta);
    let mut r_total = composite_reward(r_loc, r_ans, gamma);

    let chars = if std::ptr::eq(span_response, answer_response) {
        span_response.rationale_text.chars().count()
    } else {
        span_response.rationale_text.chars().count() + answer_response.rationale_text.chars().count()
    };
    let over = chars.saturating_sub(config.max_rationale_chars) as f64;
    if over > 0.0 {
        r_total = (r_total - config.length_penalty_per_char_over * over).max(0.0);
    }

    Ok(RewardBreakdown { tiou: raw_tiou, fmt_time, fmt_ans, correct, r_loc, r_ans, r_total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interleave::{parse_response, render_response};

    fn set(pairs: &[(f64, f64)]) -> SpanSet {
        normalize_spans(pairs, f64::INFINITY, 0.0).0
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn loc_reward_examples() {
        let g = set(&[(2.0, 8.0)]);
        assert_eq!(loc_reward(&g, &g, 1.0, 0.1).unwrap(), 1.0);
        assert!(close(loc_reward_from_tiou(0.5, 1.0, 0.1), 0.55));
        assert_eq!(loc_reward(&SpanSet::empty(), &g, 0.0, 0.1).unwrap(), 0.0);
        assert!(loc_reward(&g, &SpanSet::empty(), 1.0, 0.1).is_err());
    }

    #[test]
    fn ans_reward_examples() {
        assert_eq!(ans_reward(Some(AnswerOption::A), AnswerOption::A, 1.0, 0.1), 1.0);
        assert!(close(ans_reward(Some(AnswerOption::B), AnswerOption::A, 1.0, 0.1), 0.1));
        assert_eq!(ans_reward(None, AnswerOption::A, 0.0, 0.1), 0.0);
    }

    #[test]
    fn composite_examples() {
        assert_eq!(composite_reward(0.55, 1.0, 0.0), 0.55);
        assert_eq!(composite_reward(0.55, 1.0, 1.0), 1.0);
        assert!(close(composite_reward(0.55, 1.0, 0.5), 0.775));
    }

    #[test]
    fn gamma_curriculum() {
        let cfg = RewardConfig { ramp_steps: 100, ..Default::default() };
        assert_eq!(gamma_schedule(0, &cfg), 0.3);
        assert_eq!(gamma_schedule(100, &cfg), 0.7);
        assert!(close(gamma_schedule(50, &cfg), 0.5));
        assert_eq!(gamma_schedule(10_000, &cfg), 0.7);
    }

    #[test]
    fn shaping() {
        let th = [(0.3, 0.1), (0.5, 0.1), (0.7, 0.1)];
        assert_eq!(shaped_tvg_reward(0.0, &th), 0.0);
        assert!(close(shaped_tvg_reward(0.6, &th), 0.8));
        assert_eq!(shaped_tvg_reward(1.0, &th), 1.0);
    }

    #[test]
    fn apex_is_exact() {
        let gold = set(&[(12.34, 20.5), (40.0, 41.01)]);
        let text = render_response(&gold, Some(AnswerOption::C), "spans cover the handoff");
        let resp = parse_response(&text);
        for &(a, b, g) in &[(0.1, 0.1, 0.3), (0.37, 0.91, 0.123), (1.0, 0.0, 0.77)] {
            let cfg = RewardConfig { alpha: a, beta: b, ..Default::default() };
            let target = GoldTarget { spans: &gold, answer: AnswerOption::C, duration_s: 60.0 };
            let r = score_response(&resp, target, 5, g, &cfg).unwrap();
            assert_eq!(r.r_total, 1.0);
            assert!(r.correct);
        }
    }

    #[test]
    fn length_penalty_applies_past_cap() {
        let gold = set(&[(1.0, 2.0)]);
        let long = "x".repeat(2100);
        let text = render_response(&gold, Some(AnswerOption::A), &long);
        let resp = parse_response(&text);
        let target = GoldTarget { spans: &gold, answer: AnswerOption::A, duration_s: 10.0 };
        let r = score_response(&resp, target, 5, 0.5, &RewardConfig::default()).unwrap();
        assert!(close(r.r_total, 1.0 - 100.0 * 1e-4));
        let off = RewardConfig { length_penalty_per_char_over: 0.0, ..Default::default() };
        assert_eq!(score_response(&resp, target, 5, 0.5, &off).unwrap().r_total, 1.0);
    }

    #[test]
    fn unparsable_scores_zero() {
        let gold = set(&[(1.0, 2.0)]);
        let resp = parse_response("no idea");
        let target = GoldTarget { spans: &gold, answer: AnswerOption::A, duration_s: 10.0 };
        let r = score_response(&resp, target, 5, 0.5, &RewardConfig::default()).unwrap();
        assert_eq!((r.tiou, r.fmt_time, r.fmt_ans, r.r_total), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn config_validation() {
        assert!(RewardConfig::default().validate().is_ok());
        assert!(RewardConfig { alpha: 1.5, ..Default::default() }.validate().is_err());
        let bad = RewardConfig { shaping_thresholds: Some(vec![(0.5, 0.1), (0.3, 0.1)]), ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
