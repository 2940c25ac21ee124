//! Perplexity-scheduled online batch selection.
//!
//! Candidates are sorted by ascending perplexity (ties broken by ascending
//! prompt id) and a window of `K` consecutive positions starting at
//! `l(ρ) = floor(g(ρ) * (|B| - K))` is selected.

use std::cmp::Ordering;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PrepoError, Result};
use crate::policy::Policy;
use crate::rng::Stream;
use crate::taskgen::Prompt;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pacing {
    #[default]
    Linear,
    Quadratic,
    Exponential,
}

impl Pacing {
    /// Pacing curve `g` with `g(0) = 0` and `g(1) = 1`.
    pub fn progress(self, rho: f64) -> f64 {
        match self {
            Pacing::Linear => rho,
            Pacing::Quadratic => rho * rho,
            Pacing::Exponential => rho.exp_m1() / (std::f64::consts::E - 1.0),
        }
    }
}

impl FromStr for Pacing {
    type Err = PrepoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Pacing::Linear),
            "quadratic" => Ok(Pacing::Quadratic),
            "exponential" => Ok(Pacing::Exponential),
            other => Err(PrepoError::Parse {
                context: "pacing".into(),
                message: format!("unknown pacing {other:?}"),
            }),
        }
    }
}

/// Start of the selection window in the ascending-perplexity order.
pub fn window_start(rho: f64, batch_size: usize, k: usize, pacing: Pacing) -> Result<usize> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(PrepoError::Domain(format!("rho must lie in [0, 1], got {rho}")));
    }
    if k == 0 || k > batch_size {
        return Err(PrepoError::Domain(format!(
            "window size {k} must be in 1..={batch_size}"
        )));
    }
    let span = batch_size - k;
    let g = pacing.progress(rho).clamp(0.0, 1.0);
    let l = (g * span as f64).floor() as usize;
    Ok(l.min(span))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionState {
    pub rho: f64,
    pub k: usize,
    pub candidate_size: usize,
    pub pacing: Pacing,
}

impl SelectionState {
    pub fn new(rho: f64, k: usize, candidate_size: usize, pacing: Pacing) -> Result<Self> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(PrepoError::Domain(format!("rho must lie in [0, 1], got {rho}")));
        }
        if k == 0 || k > candidate_size {
            return Err(PrepoError::InvalidConfig(format!(
                "sub-batch K={k} must be in 1..=|B|={candidate_size}"
            )));
        }
        Ok(Self {
            rho,
            k,
            candidate_size,
            pacing,
        })
    }

    /// Normalized progress `step / (total_steps - 1)`, clamped to `[0, 1]`.
    pub fn progress(step: usize, total_steps: usize) -> f64 {
        if total_steps <= 1 {
            0.0
        } else {
            (step as f64 / (total_steps - 1) as f64).clamp(0.0, 1.0)
        }
    }
}

/// Prompt ids paired with their perplexity under the current policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBatch {
    entries: Vec<(usize, f64)>,
}

impl ScoredBatch {
    pub fn new(entries: Vec<(usize, f64)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(PrepoError::Empty("scored batch".into()));
        }
        let mut ids: Vec<usize> = entries.iter().map(|e| e.0).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(PrepoError::Domain("duplicate prompt id in scored batch".into()));
        }
        if let Some((id, s)) = entries.iter().find(|(_, s)| !(*s >= 1.0) || !s.is_finite()) {
            return Err(PrepoError::Domain(format!("prompt {id} has invalid perplexity {s}")));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn score_of(&self, id: usize) -> Option<f64> {
        self.entries.iter().find(|e| e.0 == id).map(|e| e.1)
    }

    /// Entries in ascending perplexity, ties by ascending id.
    pub fn sorted(&self) -> Vec<(usize, f64)> {
        let mut v = self.entries.clone();
        v.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
        v
    }
}

/// Scores every prompt by teacher-forced perplexity under `policy`.
pub fn score_batch(policy: &Policy, prompts: &[&Prompt], parallel: bool) -> Result<ScoredBatch> {
    if prompts.is_empty() {
        return Err(PrepoError::Empty("no prompts to score".into()));
    }
    let score = |p: &&Prompt| policy.prompt_ppl(&p.tokens).map(|s| (p.id, s));
    let entries = if parallel {
        prompts.par_iter().map(score).collect::<Result<Vec<_>>>()?
    } else {
        prompts.iter().map(score).collect::<Result<Vec<_>>>()?
    };
    ScoredBatch::new(entries)
}

/// Selected ids plus the window start they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub start: usize,
    pub ids: Vec<usize>,
}

/// Returns the ids at sorted positions `l(ρ)..l(ρ)+K`, in sorted order.
pub fn select_window(scored: &ScoredBatch, state: &SelectionState) -> Result<Selection> {
    if scored.len() != state.candidate_size {
        return Err(PrepoError::SizeMismatch(format!(
            "scored batch has {} entries, state expects {}",
            scored.len(),
            state.candidate_size
        )));
    }
    let start = window_start(state.rho, state.candidate_size, state.k, state.pacing)?;
    let ids = scored.sorted()[start..start + state.k]
        .iter()
        .map(|e| e.0)
        .collect();
    Ok(Selection { start, ids })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StaticMode {
    Lowest,
    Highest,
    Random(u64),
}

/// Fixed-group selection: the `K` extreme prompts by the same ordering as
/// [`select_window`], or a seeded uniform draw without replacement.
pub fn static_group_select(scored: &ScoredBatch, k: usize, mode: StaticMode) -> Result<Vec<usize>> {
    if k == 0 || k > scored.len() {
        return Err(PrepoError::InvalidConfig(format!(
            "group size {k} must be in 1..={}",
            scored.len()
        )));
    }
    let sorted = scored.sorted();
    Ok(match mode {
        StaticMode::Lowest => sorted[..k].iter().map(|e| e.0).collect(),
        StaticMode::Highest => sorted[sorted.len() - k..].iter().map(|e| e.0).collect(),
        StaticMode::Random(seed) => {
            let mut rng = Stream::tagged(seed, &[0x7261_6e64]);
            rng.sample_without_replacement(scored.len(), k)
                .into_iter()
                .map(|i| scored.entries()[i].0)
                .collect()
        }
    })
}
