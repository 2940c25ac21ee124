//! Group-standardized advantages and the clipped, entropy-weighted surrogate.
//!
//! The surrogate is an objective to be *maximized*:
//!
//! ```text
//! J = mean_groups (1/G) Σ_i w_i (1/|o_i|) Σ_t min(s_it A_i, clip(s_it, 1-ε_low, 1+ε_high) A_i)
//! ```
//!
//! with `s_it = exp(log π_θ - log π_old)` per token. [`LossReport::gradient`]
//! is `∇_θ J`; the trainer negates it before handing it to the minimizing
//! optimizer. Weights are treated as constants with respect to `θ`, and tokens
//! whose clipped branch is strictly active contribute no gradient.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PrepoError, Result};
use crate::policy::Policy;
use crate::rollout::Rollout;
use crate::weighting::EntropyWeights;

/// Standard deviation below which a group counts as zero-advantage.
pub const ZERO_STD: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClipConfig {
    pub eps_low: f64,
    pub eps_high: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            eps_low: 0.2,
            eps_high: 0.28,
        }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_low > 0.0 && self.eps_low < 1.0) {
            return Err(PrepoError::InvalidConfig(format!(
                "eps_low must be in (0, 1), got {}",
                self.eps_low
            )));
        }
        if !(self.eps_high >= self.eps_low) {
            return Err(PrepoError::InvalidConfig(format!(
                "eps_high ({}) must be >= eps_low ({})",
                self.eps_high, self.eps_low
            )));
        }
        Ok(())
    }

    /// True when the clipped branch is strictly smaller than the unclipped one.
    pub fn clip_active(&self, ratio: f64, advantage: f64) -> bool {
        (advantage > 0.0 && ratio > 1.0 + self.eps_high)
            || (advantage < 0.0 && ratio < 1.0 - self.eps_low)
    }
}

/// Population-std standardized rewards. Groups whose std is below
/// [`ZERO_STD`] get all-zero advantages and `true` for the flag.
pub fn group_advantage(rewards: &[f64]) -> Result<(Vec<f64>, bool)> {
    if rewards.len() < 2 {
        return Err(PrepoError::Domain(format!(
            "group advantage needs at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std >= ZERO_STD) {
        return Ok((vec![0.0; rewards.len()], true));
    }
    Ok((rewards.iter().map(|r| (r - mean) / std).collect(), false))
}

/// The `G` rollouts sampled for one prompt with their standardized advantages.
#[derive(Clone, Debug, PartialEq)]
pub struct Group {
    pub prompt_id: usize,
    pub rollouts: Vec<Rollout>,
    pub advantages: Vec<f64>,
    pub zero_advantage: bool,
}

impl Group {
    pub fn new(prompt_id: usize, rollouts: Vec<Rollout>) -> Result<Self> {
        let rewards: Vec<f64> = rollouts.iter().map(|r| r.reward).collect();
        let (advantages, zero_advantage) = group_advantage(&rewards)?;
        Ok(Self {
            prompt_id,
            rollouts,
            advantages,
            zero_advantage,
        })
    }

    pub fn size(&self) -> usize {
        self.rollouts.len()
    }

    /// Every reward equals `correct`.
    pub fn all_equal_to(&self, correct: f64) -> bool {
        self.rollouts.iter().all(|r| r.reward == correct)
    }
}

/// `s_t = π_θ(o_t | ·) / π_old(o_t | ·)` using the log-probability recorded at sampling time.
pub fn importance_ratio(current: &Policy, rollout: &Rollout, t: usize) -> Result<f64> {
    if t >= rollout.len() {
        return Err(PrepoError::IndexOutOfRange {
            index: t,
            len: rollout.len(),
        });
    }
    let lp = current.log_prob(&rollout.context_at(t), rollout.tokens[t], rollout.temperature)?;
    Ok((lp - rollout.old_log_probs[t]).exp())
}

pub fn clipped_term(ratio: f64, advantage: f64, clip: &ClipConfig) -> f64 {
    let clipped = ratio.clamp(1.0 - clip.eps_low, 1.0 + clip.eps_high);
    (ratio * advantage).min(clipped * advantage)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    /// Surrogate value (to be maximized).
    pub loss: f64,
    /// Gradient of the surrogate with respect to the policy parameters.
    pub gradient: Vec<f64>,
    pub zero_advantage: Vec<bool>,
    /// Fraction of tokens whose clipped branch was strictly active.
    pub clip_fraction: f64,
    pub token_count: usize,
}

struct Partial {
    loss: f64,
    gradient: Vec<f64>,
    clipped: usize,
    tokens: usize,
}

impl Partial {
    fn merge(mut self, other: Partial) -> Partial {
        self.loss += other.loss;
        for (a, b) in self.gradient.iter_mut().zip(&other.gradient) {
            *a += b;
        }
        self.clipped += other.clipped;
        self.tokens += other.tokens;
        self
    }
}

/// Pairwise tree reduction in index order; independent of thread scheduling.
fn tree_reduce(mut parts: Vec<Partial>) -> Option<Partial> {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(a) = it.next() {
            next.push(match it.next() {
                Some(b) => a.merge(b),
                None => a,
            });
        }
        parts = next;
    }
    parts.pop()
}

fn group_partial(
    current: &Policy,
    group: &Group,
    weights: &[f64],
    outer: f64,
    clip: &ClipConfig,
) -> Result<Partial> {
    let mut part = Partial {
        loss: 0.0,
        gradient: vec![0.0; current.layout().param_count()],
        clipped: 0,
        tokens: 0,
    };
    let g = group.size() as f64;
    for ((rollout, &adv), &w) in group.rollouts.iter().zip(&group.advantages).zip(weights) {
        part.tokens += rollout.len();
        if group.zero_advantage || adv == 0.0 {
            continue;
        }
        let coef = outer * w / (g * rollout.len() as f64);
        for t in 0..rollout.len() {
            let ctx = rollout.context_at(t);
            let lp = current.log_prob(&ctx, rollout.tokens[t], rollout.temperature)?;
            let ratio = (lp - rollout.old_log_probs[t]).exp();
            part.loss += coef * clipped_term(ratio, adv, clip);
            if clip.clip_active(ratio, adv) {
                part.clipped += 1;
            } else {
                current.accumulate_score(
                    &ctx,
                    rollout.tokens[t],
                    rollout.temperature,
                    coef * adv * ratio,
                    &mut part.gradient,
                )?;
            }
        }
    }
    Ok(part)
}

/// Weighted clipped surrogate and its gradient. `weights` lists one weight
/// per rollout in group order.
pub fn prepo_loss(
    current: &Policy,
    groups: &[Group],
    weights: &EntropyWeights,
    clip: &ClipConfig,
    parallel: bool,
) -> Result<LossReport> {
    clip.validate()?;
    if groups.is_empty() {
        return Err(PrepoError::Empty("no groups".into()));
    }
    let total: usize = groups.iter().map(Group::size).sum();
    if weights.len() != total {
        return Err(PrepoError::SizeMismatch(format!(
            "{} weights for {total} rollouts",
            weights.len()
        )));
    }
    let mut offsets = Vec::with_capacity(groups.len());
    let mut acc = 0;
    for g in groups {
        if g.advantages.len() != g.size() {
            return Err(PrepoError::SizeMismatch(format!(
                "group for prompt {} has {} advantages for {} rollouts",
                g.prompt_id,
                g.advantages.len(),
                g.size()
            )));
        }
        offsets.push(acc);
        acc += g.size();
    }
    let outer = 1.0 / groups.len() as f64;
    let work = |(g, &off): (&Group, &usize)| {
        group_partial(current, g, &weights.weights[off..off + g.size()], outer, clip)
    };
    let parts: Vec<Partial> = if parallel {
        groups.par_iter().zip(offsets.par_iter()).map(work).collect::<Result<_>>()?
    } else {
        groups.iter().zip(offsets.iter()).map(work).collect::<Result<_>>()?
    };
    let sum = tree_reduce(parts).expect("at least one group");
    Ok(LossReport {
        loss: sum.loss,
        gradient: sum.gradient,
        zero_advantage: groups.iter().map(|g| g.zero_advantage).collect(),
        clip_fraction: if sum.tokens == 0 {
            0.0
        } else {
            sum.clipped as f64 / sum.tokens as f64
        },
        token_count: sum.tokens,
    })
}

/// The same surrogate with every rollout weight fixed to 1.
pub fn grpo_loss(current: &Policy, groups: &[Group], clip: &ClipConfig, parallel: bool) -> Result<LossReport> {
    let lengths = groups
        .iter()
        .flat_map(|g| g.rollouts.iter().map(Rollout::len))
        .collect();
    let unit = EntropyWeights::uniform(lengths, Default::default());
    prepo_loss(current, groups, &unit, clip, parallel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyLayout;
    use crate::taskgen::Vocab;
    use crate::weighting::{relative_weights, EntropyMode};

    fn policy(seed: u64) -> Policy {
        Policy::init(PolicyLayout::for_vocab(&Vocab::new(5).unwrap()), seed, 2.0).unwrap()
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(group_advantage(&[1.0; 4]).unwrap(), (vec![0.0; 4], true));
        assert_eq!(group_advantage(&[1.0, 0.0]).unwrap(), (vec![1.0, -1.0], false));
        let (a, z) = group_advantage(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(!z);
        let want = [1.7320508075688772, -0.5773502691896258, -0.5773502691896258, -0.5773502691896258];
        for (x, y) in a.iter().zip(want) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(group_advantage(&[1.0]).is_err());
    }

    #[test]
    fn clipped_term_examples() {
        let c = ClipConfig::default();
        assert_eq!(clipped_term(1.5, 1.0, &c), 1.28);
        assert_eq!(clipped_term(0.5, -1.0, &c), -0.8);
        assert_eq!(clipped_term(7.0, 0.0, &c), 0.0);
        assert_eq!(clipped_term(0.01, 0.0, &c), 0.0);
    }

    #[test]
    fn clip_config_validation() {
        assert!(ClipConfig { eps_low: 0.0, eps_high: 0.2 }.validate().is_err());
        assert!(ClipConfig { eps_low: 0.3, eps_high: 0.2 }.validate().is_err());
        assert!(ClipConfig::default().validate().is_ok());
    }

    #[test]
    fn ratio_examples() {
        let p = policy(1);
        let lp = p.log_prob(&[1, 5, 2, 7], 3, 1.0).unwrap();
        let mut r = Rollout {
            prompt_id: 0,
            prompt_tokens: vec![1, 5, 2, 7],
            tokens: vec![3],
            old_log_probs: vec![lp],
            token_entropies: vec![0.5],
            reward: 1.0,
            temperature: 1.0,
        };
        assert_eq!(importance_ratio(&p, &r, 0).unwrap(), 1.0);
        r.old_log_probs[0] = lp - 1.0;
        assert!((importance_ratio(&p, &r, 0).unwrap() - std::f64::consts::E).abs() < 1e-12);
        assert!(importance_ratio(&p, &r, 1).is_err());
    }

    #[test]
    fn symmetric_pair_cancels() {
        let p = policy(2);
        let mk = |tok: u32, reward: f64| {
            let lp = p.log_prob(&[1, 7], tok, 1.0).unwrap();
            Rollout {
                prompt_id: 0,
                prompt_tokens: vec![1, 7],
                tokens: vec![tok],
                old_log_probs: vec![lp],
                token_entropies: vec![1.0],
                reward,
                temperature: 1.0,
            }
        };
        let g = Group::new(0, vec![mk(1, 1.0), mk(1, 0.0)]).unwrap();
        let report = grpo_loss(&p, &[g], &ClipConfig::default(), false).unwrap();
        assert_eq!(report.loss, 0.0);
        assert_eq!(report.clip_fraction, 0.0);
    }

    #[test]
    fn zero_advantage_group_is_inert() {
        let p = policy(3);
        let r = Rollout::from_entropies(0, vec![0.4, 0.6]);
        let g = Group::new(0, vec![r.clone(), r]).unwrap();
        assert!(g.zero_advantage);
        let w = relative_weights(&g.rollouts, EntropyMode::TokenWeighted).unwrap();
        let report = prepo_loss(&p, &[g], &w, &ClipConfig::default(), false).unwrap();
        assert_eq!(report.loss, 0.0);
        assert!(report.gradient.iter().all(|&x| x == 0.0));
        assert_eq!(report.zero_advantage, vec![true]);
    }

    #[test]
    fn weight_count_must_match() {
        let p = policy(3);
        let r = Rollout::from_entropies(0, vec![0.4]);
        let g = Group::new(0, vec![r.clone(), r]).unwrap();
        let w = EntropyWeights::uniform(vec![1, 1, 1], EntropyMode::TokenWeighted);
        assert!(matches!(
            prepo_loss(&p, &[g], &w, &ClipConfig::default(), false),
            Err(PrepoError::SizeMismatch(_))
        ));
    }
}
