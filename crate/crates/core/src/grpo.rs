//! Group-relative advantages, batch normalization, KL estimation and the
//! GRPO objective value.
//!
//! Nothing here updates parameters. The external trainer owns the policy;
//! this module turns rewards and log-probabilities into the scalars it needs.
//!
//! Sums over groups and rollouts are taken over terms sorted by value, so
//! the objective is bit-identical under any permutation of the input.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reward::RewardBreakdown;

/// Mean computed relative to the first element; exact for constant input.
fn shifted_mean(values: &[f64]) -> f64 {
    let pivot = values[0];
    pivot + values.iter().map(|v| v - pivot).sum::<f64>() / values.len() as f64
}

/// `A_i = R_i - mean(R)`.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::EmptyInput("reward group"));
    }
    let mean = shifted_mean(rewards);
    Ok(rewards.iter().map(|r| r - mean).collect())
}

/// `(R_i - mean) / (std + eps)` with population std; zeros when std is 0.
pub fn batch_normalize(rewards: &[f64], eps: f64) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::EmptyInput("reward batch"));
    }
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let n = rewards.len() as f64;
    let mean = shifted_mean(rewards);
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / (std + eps)).collect())
}

/// First-order sequence KL estimate: mean per-token log-ratio.
pub fn sequence_kl(policy_token_logprobs: &[f64], ref_token_logprobs: &[f64]) -> Result<f64> {
    if policy_token_logprobs.len() != ref_token_logprobs.len() {
        return Err(Error::LengthMismatch { left: policy_token_logprobs.len(), right: ref_token_logprobs.len() });
    }
    if policy_token_logprobs.is_empty() {
        return Err(Error::EmptyInput("token log-probabilities"));
    }
    let diff: f64 = policy_token_logprobs.iter().zip(ref_token_logprobs).map(|(p, r)| p - r).sum();
    Ok(diff / policy_token_logprobs.len() as f64)
}

/// One sampled response with its reward and sequence log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub prompt_id: String,
    pub response_text: String,
    #[serde(flatten)]
    pub reward: RewardBreakdown,
    #[serde(default)]
    pub policy_logprob_sum: Option<f64>,
    #[serde(default)]
    pub ref_logprob_sum: Option<f64>,
    #[serde(default = "one")]
    pub token_count: usize,
    /// Filled by [`compute_advantages`]; ignored on input.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub advantage: Option<f64>,
}

fn one() -> usize {
    1
}

impl Rollout {
    /// Per-token KL from the sequence sums, when a reference is present.
    pub fn kl_estimate(&self) -> Result<Option<f64>> {
        match (self.policy_logprob_sum, self.ref_logprob_sum) {
            (Some(p), Some(r)) => {
                if self.token_count == 0 {
                    return Err(Error::Record { id: self.prompt_id.clone(), reason: "token_count must be >= 1".into() });
                }
                Ok(Some((p - r) / self.token_count as f64))
            }
            _ => Ok(None),
        }
    }
}

/// `k` rollouts of the same prompt plus their advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub rollouts: Vec<Rollout>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    /// Builds a group from rewards already stored on the rollouts.
    pub fn new(rollouts: Vec<Rollout>) -> Result<Self> {
        let rewards: Vec<f64> = rollouts.iter().map(|r| r.reward.r_total).collect();
        Self::with_rewards(rollouts, &rewards)
    }

    /// Builds a group using `rewards` (e.g. batch-normalized values) in place
    /// of the stored totals.
    pub fn with_rewards(rollouts: Vec<Rollout>, rewards: &[f64]) -> Result<Self> {
        if rollouts.len() != rewards.len() {
            return Err(Error::LengthMismatch { left: rollouts.len(), right: rewards.len() });
        }
        let advantages = group_advantages(rewards)?;
        Ok(Self { rollouts, advantages })
    }
}

fn order_free_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.into_iter().sum()
}

/// Loss value `-(1/|G|) sum_g sum_i A_i log pi(S_i) + kl_coef * mean KL`.
///
/// The KL mean runs over rollouts carrying a reference log-probability;
/// with none present the KL term is zero.
pub fn grpo_objective(groups: &[RolloutGroup], kl_coef: f64) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::EmptyInput("rollout groups"));
    }
    let mut group_terms = Vec::with_capacity(groups.len());
    let mut kls = Vec::new();
    for g in groups {
        if g.advantages.len() != g.rollouts.len() {
            return Err(Error::LengthMismatch { left: g.rollouts.len(), right: g.advantages.len() });
        }
        let mut terms = Vec::with_capacity(g.rollouts.len());
        for (r, a) in g.rollouts.iter().zip(&g.advantages) {
            let lp = r.policy_logprob_sum.ok_or_else(|| Error::Record {
                id: r.prompt_id.clone(),
                reason: "missing policy_logprob_sum".into(),
            })?;
            terms.push(a * lp);
            if let Some(kl) = r.kl_estimate()? {
                kls.push(kl);
            }
        }
        group_terms.push(order_free_sum(terms));
    }
    let policy_term = -order_free_sum(group_terms) / groups.len() as f64;
    let kl_term = if kls.is_empty() { 0.0 } else { order_free_sum(kls.clone()) / kls.len() as f64 };
    Ok(policy_term + kl_coef * kl_term)
}

/// Groups rollouts by `prompt_id` (sorted) and fills in advantages.
///
/// With `normalize_eps`, rewards are batch-normalized across all rollouts
/// before grouping; otherwise raw `r_total` values are used.
pub fn compute_advantages(rollouts: Vec<Rollout>, normalize_eps: Option<f64>) -> Result<Vec<RolloutGroup>> {
    if rollouts.is_empty() {
        return Err(Error::EmptyInput("rollouts"));
    }
    let raw: Vec<f64> = rollouts.iter().map(|r| r.reward.r_total).collect();
    let rewards = match normalize_eps {
        Some(eps) => batch_normalize(&raw, eps)?,
        None => raw,
    };
    let mut by_prompt: BTreeMap<String, (Vec<Rollout>, Vec<f64>)> = BTreeMap::new();
    for (r, reward) in rollouts.into_iter().zip(rewards) {
        let entry = by_prompt.entry(r.prompt_id.clone()).or_default();
        entry.0.push(r);
        entry.1.push(reward);
    }
    by_prompt
        .into_values()
        .map(|(rs, rewards)| {
            let mut group = RolloutGroup::with_rewards(rs, &rewards)?;
            for (r, a) in group.rollouts.iter_mut().zip(&group.advantages) {
                r.advantage = Some(*a);
            }
            Ok(group)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rollout(reward: f64, lp: f64) -> Rollout {
        Rollout {
            prompt_id: "p".into(),
            response_text: String::new(),
            reward: RewardBreakdown {
                tiou: 0.0,
                fmt_time: 0.0,
                fmt_ans: 0.0,
                correct: false,
                r_loc: 0.0,
                r_ans: 0.0,
                r_total: reward,
            },
            policy_logprob_sum: Some(lp),
            ref_logprob_sum: None,
            token_count: 10,
            advantage: None,
        }
    }

    #[test]
    fn advantages_examples() {
        assert_eq!(group_advantages(&[1.0, 0.0, 0.5]).unwrap(), vec![0.5, -0.5, 0.0]);
        assert_eq!(group_advantages(&[0.7, 0.7, 0.7]).unwrap(), vec![0.0; 3]);
        assert_eq!(group_advantages(&[0.9]).unwrap(), vec![0.0]);
        assert!(group_advantages(&[]).is_err());
    }

    #[test]
    fn batch_norm_examples() {
        let v = batch_normalize(&[0.0, 1.0], 1e-12).unwrap();
        assert!((v[0] + 1.0).abs() < 1e-9 && (v[1] - 1.0).abs() < 1e-9);
        assert_eq!(batch_normalize(&[0.3, 0.3], 1e-8).unwrap(), vec![0.0, 0.0]);
        assert_eq!(batch_normalize(&[5.0], 1e-8).unwrap(), vec![0.0]);
        assert!(batch_normalize(&[], 1e-8).is_err());
        assert!(batch_normalize(&[1.0], 0.0).is_err());
    }

    #[test]
    fn kl_examples() {
        assert_eq!(sequence_kl(&[-1.0, -2.0], &[-1.0, -2.0]).unwrap(), 0.0);
        assert_eq!(sequence_kl(&[-1.0, -1.0], &[-2.0, -2.0]).unwrap(), 1.0);
        assert!(matches!(sequence_kl(&[-1.0], &[-1.0, -2.0]), Err(Error::LengthMismatch { .. })));
        assert!(sequence_kl(&[], &[]).is_err());
    }

    #[test]
    fn objective_worked_example() {
        let g = RolloutGroup {
            rollouts: vec![rollout(0.0, -10.0), rollout(0.0, -20.0), rollout(0.0, -30.0)],
            advantages: vec![0.5, -0.5, 0.0],
        };
        assert_eq!(grpo_objective(std::slice::from_ref(&g), 0.0).unwrap(), -5.0);
    }

    #[test]
    fn objective_zero_advantages_and_zero_kl() {
        let mut rs = vec![rollout(0.4, -3.0), rollout(0.4, -4.0)];
        for r in &mut rs {
            r.ref_logprob_sum = r.policy_logprob_sum;
        }
        let g = RolloutGroup::new(rs).unwrap();
        assert_eq!(grpo_objective(std::slice::from_ref(&g), 0.0).unwrap(), 0.0);
        assert_eq!(grpo_objective(std::slice::from_ref(&g), 0.1).unwrap(), 0.0);
    }

    #[test]
    fn objective_kl_term_matches_token_estimator() {
        let mut r = rollout(1.0, -4.0);
        r.ref_logprob_sum = Some(-8.0);
        r.token_count = 4;
        let g = RolloutGroup::new(vec![r]).unwrap();
        let expected = sequence_kl(&[-1.0; 4], &[-2.0; 4]).unwrap();
        assert_eq!(grpo_objective(std::slice::from_ref(&g), 0.5).unwrap(), 0.5 * expected);
    }

    #[test]
    fn objective_requires_logprobs() {
        let mut r = rollout(1.0, 0.0);
        r.policy_logprob_sum = None;
        let g = RolloutGroup::new(vec![r]).unwrap();
        assert!(matches!(grpo_objective(&[g], 0.0), Err(Error::Record { .. })));
    }

    #[test]
    fn groups_by_prompt() {
        let mut a = rollout(1.0, -1.0);
        a.prompt_id = "b".into();
        let mut b = rollout(0.0, -1.0);
        b.prompt_id = "a".into();
        let mut c = rollout(0.5, -1.0);
        c.prompt_id = "b".into();
        let groups = compute_advantages(vec![a, b, c], None).unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].rollouts[0].prompt_id, "a");
        assert_eq!(groups[1].advantages, vec![0.25, -0.25]);
        assert_eq!(groups[1].rollouts[1].advantage, Some(-0.25));
    }
}
