//! Relative-entropy rollout weights.
//!
//! Each rollout's sequence entropy `H̄_i` (mean of its token entropies) is
//! divided by a batch mean `H̄`, giving `w_i = H̄_i / H̄`. Two batch means
//! are supported:
//!
//! * [`EntropyMode::SequenceMean`]: `H̄ = (1/B) Σ_k H̄_k`;
//! * [`EntropyMode::TokenWeighted`]: `H̄ = Σ_k Σ_t H_{k,t} / Σ_k |o_k|`, under
//!   which `(1/B) Σ_i w_i |o_i|` equals the mean rollout length.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{PrepoError, Result};
use crate::rollout::Rollout;

/// Batch-mean entropy below which weights fall back to 1.
pub const DEGENERATE_ENTROPY: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyMode {
    SequenceMean,
    #[default]
    TokenWeighted,
}

impl FromStr for EntropyMode {
    type Err = PrepoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequence_mean" => Ok(EntropyMode::SequenceMean),
            "token_weighted" => Ok(EntropyMode::TokenWeighted),
            other => Err(PrepoError::Parse {
                context: "entropy mode".into(),
                message: format!("unknown mode {other:?}"),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyWeights {
    pub seq_entropies: Vec<f64>,
    pub lengths: Vec<usize>,
    pub batch_mean: f64,
    pub weights: Vec<f64>,
    pub mode: EntropyMode,
    /// Set when the batch mean fell below [`DEGENERATE_ENTROPY`] and all
    /// weights were replaced by 1.
    pub degenerate: bool,
}

impl EntropyWeights {
    /// Unit weights for `lengths.len()` rollouts (weighting disabled).
    pub fn uniform(lengths: Vec<usize>, mode: EntropyMode) -> Self {
        let n = lengths.len();
        Self {
            seq_entropies: vec![1.0; n],
            lengths,
            batch_mean: 1.0,
            weights: vec![1.0; n],
            mode,
            degenerate: false,
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

pub fn sequence_entropy(rollout: &Rollout) -> Result<f64> {
    mean_of(&rollout.token_entropies)
        .ok_or_else(|| PrepoError::Empty(format!("rollout for prompt {} has no tokens", rollout.prompt_id)))
}

/// Arithmetic mean; a constant slice returns its value without rounding.
fn mean_of(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else if xs.iter().all(|x| *x == xs[0]) {
        Some(xs[0])
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

fn check_batch(rollouts: &[Rollout]) -> Result<()> {
    if rollouts.is_empty() {
        return Err(PrepoError::Empty("rollout batch".into()));
    }
    for r in rollouts {
        if r.token_entropies.is_empty() {
            return Err(PrepoError::Empty(format!("rollout for prompt {} has no tokens", r.prompt_id)));
        }
        if r.token_entropies.len() != r.tokens.len() || r.old_log_probs.len() != r.tokens.len() {
            return Err(PrepoError::SizeMismatch(format!(
                "rollout for prompt {} has inconsistent per-token arrays",
                r.prompt_id
            )));
        }
    }
    Ok(())
}

fn raw_batch_mean(seq: &[f64], lengths: &[usize], token_sums: &[f64], mode: EntropyMode) -> f64 {
    let equal_lengths = lengths.windows(2).all(|w| w[0] == w[1]);
    match mode {
        // With equal lengths the token-weighted mean equals the sequence mean;
        // computing it the same way keeps the two modes bit-identical there.
        EntropyMode::SequenceMean => seq.iter().sum::<f64>() / seq.len() as f64,
        EntropyMode::TokenWeighted if equal_lengths => seq.iter().sum::<f64>() / seq.len() as f64,
        EntropyMode::TokenWeighted => {
            token_sums.iter().sum::<f64>() / lengths.iter().sum::<usize>() as f64
        }
    }
}

/// Batch-mean entropy `H̄` under `mode`. Errors if the batch is degenerate.
pub fn batch_mean_entropy(rollouts: &[Rollout], mode: EntropyMode) -> Result<f64> {
    let w = relative_weights(rollouts, mode)?;
    if w.degenerate {
        return Err(PrepoError::Domain(format!(
            "batch mean entropy {} is below {DEGENERATE_ENTROPY}",
            w.batch_mean
        )));
    }
    Ok(w.batch_mean)
}

/// `w_i = H̄_i / H̄`; a degenerate batch gets unit weights and the flag set.
pub fn relative_weights(rollouts: &[Rollout], mode: EntropyMode) -> Result<EntropyWeights> {
    check_batch(rollouts)?;
    let lengths: Vec<usize> = rollouts.iter().map(Rollout::len).collect();
    let token_sums: Vec<f64> = rollouts
        .iter()
        .map(|r| r.token_entropies.iter().sum())
        .collect();
    let seq_entropies: Vec<f64> = rollouts
        .iter()
        .map(|r| mean_of(&r.token_entropies).expect("checked non-empty"))
        .collect();
    // Any weighted mean of a constant is that constant; skip the rounding.
    let batch_mean = if seq_entropies.iter().all(|h| *h == seq_entropies[0]) {
        seq_entropies[0]
    } else {
        raw_batch_mean(&seq_entropies, &lengths, &token_sums, mode)
    };
    let degenerate = !(batch_mean >= DEGENERATE_ENTROPY);
    let weights = if degenerate {
        vec![1.0; rollouts.len()]
    } else {
        seq_entropies.iter().map(|h| h / batch_mean).collect()
    };
    Ok(EntropyWeights {
        seq_entropies,
        lengths,
        batch_mean,
        weights,
        mode,
        degenerate,
    })
}

/// Closed-form `∂w_i/∂H̄_j`, holding the other sequence entropies and all
/// lengths fixed. For [`EntropyMode::TokenWeighted`] the share of rollout
/// `j` in `H̄` is `|o_j| / Σ|o_k|`; for [`EntropyMode::SequenceMean`] it is `1/B`.
pub fn weight_sensitivity(rollouts: &[Rollout], i: usize, j: usize, mode: EntropyMode) -> Result<f64> {
    let w = relative_weights(rollouts, mode)?;
    for idx in [i, j] {
        if idx >= w.len() {
            return Err(PrepoError::IndexOutOfRange { index: idx, len: w.len() });
        }
    }
    if w.degenerate {
        return Err(PrepoError::Domain("sensitivity undefined for a degenerate batch".into()));
    }
    let share = match mode {
        EntropyMode::TokenWeighted => w.lengths[j] as f64 / w.lengths.iter().sum::<usize>() as f64,
        EntropyMode::SequenceMean => 1.0 / w.len() as f64,
    };
    let mean = w.batch_mean;
    // `w_i · share / H̄`, so the single-rollout self term cancels exactly.
    let cross = w.weights[i] * share / mean;
    Ok(if i == j { 1.0 / mean - cross } else { -cross })
}

/// Mean weight `(1/B) Σ w_i`, evaluated as `mean(H̄_i) / H̄`.
pub fn effective_batch_size(weights: &EntropyWeights) -> f64 {
    if weights.is_empty() {
        return f64::NAN;
    }
    if weights.degenerate {
        return 1.0;
    }
    let mean_seq = weights.seq_entropies.iter().sum::<f64>() / weights.len() as f64;
    mean_seq / weights.batch_mean
}

pub const HIST_BINS: usize = 50;
pub const HIST_MAX: f64 = 5.0;

/// Counts in 50 equal-width bins over `[0, 5)` plus the overflow count (`>= 5`).
pub fn weight_histogram(weights: &[f64]) -> ([u64; HIST_BINS], u64) {
    let mut bins = [0u64; HIST_BINS];
    let mut overflow = 0;
    let width = HIST_MAX / HIST_BINS as f64;
    for &w in weights {
        if w >= HIST_MAX {
            overflow += 1;
        } else {
            let b = ((w.max(0.0) / width).floor() as usize).min(HIST_BINS - 1);
            bins[b] += 1;
        }
    }
    (bins, overflow)
}
