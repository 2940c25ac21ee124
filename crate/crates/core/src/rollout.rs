use serde::{Deserialize, Serialize};

use crate::taskgen::TokenId;

/// One sampled completion with the per-token statistics recorded at sampling time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub prompt_id: usize,
    pub prompt_tokens: Vec<TokenId>,
    pub tokens: Vec<TokenId>,
    /// Log-probability of each sampled token under the snapshot policy.
    pub old_log_probs: Vec<f64>,
    /// Entropy (nats) of the full next-token distribution at each step.
    pub token_entropies: Vec<f64>,
    pub reward: f64,
    pub temperature: f64,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Prompt followed by the first `t` generated tokens.
    pub fn context_at(&self, t: usize) -> Vec<TokenId> {
        let mut ctx = Vec::with_capacity(self.prompt_tokens.len() + t);
        ctx.extend_from_slice(&self.prompt_tokens);
        ctx.extend_from_slice(&self.tokens[..t]);
        ctx
    }

    /// Builds a rollout from entropies only; used where tokens and
    /// log-probabilities are irrelevant (weighting analysis, tests).
    pub fn from_entropies(prompt_id: usize, token_entropies: Vec<f64>) -> Self {
        let n = token_entropies.len();
        Self {
            prompt_id,
            prompt_tokens: Vec::new(),
            tokens: vec![0; n],
            old_log_probs: vec![0.0; n],
            token_entropies,
            reward: 0.0,
            temperature: 1.0,
        }
    }
}
