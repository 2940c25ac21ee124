//! Tiny autoregressive categorical policy with hand-derived gradients.
//!
//! The next-token distribution is computed from the last `window` context
//! tokens (left-padded with the padding token):
//!
//! ```text
//! x      = concat(embed[c_1], ..., embed[c_window])     (window * embed)
//! h      = tanh(W1 x + b1)                               (hidden)
//! logits = W2 h + b2                                     (vocab)
//! ```
//!
//! All parameters live in one flat `Vec<f64>` laid out as
//! `[embed | w1 | b1 | w2 | b2]`, row-major. Entropies are in nats.
//!
//! # Checkpoint format
//!
//! All integers and floats little-endian:
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 8    | magic `PREPOPOL`              |
//! | 8      | 4    | format version (`u32`, 1)     |
//! | 12     | 4    | vocab size                    |
//! | 16     | 4    | padding token id              |
//! | 20     | 4    | window width                  |
//! | 24     | 4    | embedding width               |
//! | 28     | 4    | hidden width                  |
//! | 32     | 8    | parameter count `n` (`u64`)   |
//! | 40     | 8n   | parameters (`f64`)            |

use std::ops::{Deref, Range};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PrepoError, Result};
use crate::rng::Stream;
use crate::rollout::Rollout;
use crate::taskgen::{Prompt, TokenId, Vocab};

const MAGIC: &[u8; 8] = b"PREPOPOL";
const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyLayout {
    pub vocab: usize,
    pub pad_token: TokenId,
    pub window: usize,
    pub embed: usize,
    pub hidden: usize,
}

impl PolicyLayout {
    pub const DEFAULT_WINDOW: usize = 8;
    pub const DEFAULT_EMBED: usize = 8;
    pub const DEFAULT_HIDDEN: usize = 32;

    pub fn for_vocab(vocab: &Vocab) -> Self {
        Self {
            vocab: vocab.size(),
            pad_token: vocab.padding(),
            window: Self::DEFAULT_WINDOW,
            embed: Self::DEFAULT_EMBED,
            hidden: Self::DEFAULT_HIDDEN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.window == 0 || self.embed == 0 || self.hidden == 0 {
            return Err(PrepoError::InvalidConfig(format!("degenerate layout {self:?}")));
        }
        if self.pad_token as usize >= self.vocab {
            return Err(PrepoError::InvalidConfig("pad token outside vocab".into()));
        }
        Ok(())
    }

    fn input_width(&self) -> usize {
        self.window * self.embed
    }

    pub fn embed_range(&self) -> Range<usize> {
        0..self.vocab * self.embed
    }

    pub fn w1_range(&self) -> Range<usize> {
        let start = self.embed_range().end;
        start..start + self.hidden * self.input_width()
    }

    pub fn b1_range(&self) -> Range<usize> {
        let start = self.w1_range().end;
        start..start + self.hidden
    }

    pub fn w2_range(&self) -> Range<usize> {
        let start = self.b1_range().end;
        start..start + self.vocab * self.hidden
    }

    pub fn b2_range(&self) -> Range<usize> {
        let start = self.w2_range().end;
        start..start + self.vocab
    }

    pub fn param_count(&self) -> usize {
        self.b2_range().end
    }
}

/// Next-token logits and their log-softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenDistribution {
    pub logits: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl TokenDistribution {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        let log_probs = logits.iter().map(|&z| z - lse).collect();
        Self { logits, log_probs }
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|lp| lp.exp()).collect()
    }

    /// `-sum p log p` in nats; zero-probability tokens contribute nothing.
    pub fn entropy(&self) -> f64 {
        let h: f64 = self
            .log_probs
            .iter()
            .map(|&lp| {
                let p = lp.exp();
                if p > 0.0 {
                    -p * lp
                } else {
                    0.0
                }
            })
            .sum();
        h.max(0.0)
    }

    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &lp) in self.log_probs.iter().enumerate() {
            if lp > self.log_probs[best] {
                best = i;
            }
        }
        best as TokenId
    }

    /// Inverse-CDF draw from `u` in `[0, 1)`.
    pub fn sample_with(&self, u: f64) -> TokenId {
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (i, &lp) in self.log_probs.iter().enumerate() {
            let p = lp.exp();
            if p > 0.0 {
                last_positive = i;
            }
            acc += p;
            if u < acc {
                return i as TokenId;
            }
        }
        last_positive as TokenId
    }
}

struct Activations {
    slots: Vec<TokenId>,
    input: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    layout: PolicyLayout,
    params: Vec<f64>,
}

impl Policy {
    pub fn zeros(layout: PolicyLayout) -> Result<Self> {
        layout.validate()?;
        Ok(Self {
            params: vec![0.0; layout.param_count()],
            layout,
        })
    }

    /// Uniform `[-s, s)` initialization, `s = 1/sqrt(fan_in)` per matrix,
    /// zero biases. The output projection is scaled by `output_scale`.
    pub fn init(layout: PolicyLayout, seed: u64, output_scale: f64) -> Result<Self> {
        let mut p = Self::zeros(layout)?;
        let mut rng = Stream::tagged(seed, &[0x696e_6974]);
        let embed_scale = 1.0;
        let w1_scale = 1.0 / (layout.input_width() as f64).sqrt();
        let w2_scale = output_scale / (layout.hidden as f64).sqrt();
        for (range, scale) in [
            (layout.embed_range(), embed_scale),
            (layout.w1_range(), w1_scale),
            (layout.w2_range(), w2_scale),
        ] {
            for v in &mut p.params[range] {
                *v = rng.symmetric(scale);
            }
        }
        Ok(p)
    }

    pub fn from_params(layout: PolicyLayout, params: Vec<f64>) -> Result<Self> {
        layout.validate()?;
        if params.len() != layout.param_count() {
            return Err(PrepoError::SizeMismatch(format!(
                "layout wants {} parameters, got {}",
                layout.param_count(),
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(PrepoError::Domain("non-finite parameter".into()));
        }
        Ok(Self { layout, params })
    }

    pub fn layout(&self) -> &PolicyLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<f64> {
        self.params
    }

    pub fn snapshot(&self) -> SnapshotPolicy {
        SnapshotPolicy {
            inner: self.clone(),
        }
    }

    fn window_slots(&self, context: &[TokenId]) -> Result<Vec<TokenId>> {
        let w = self.layout.window;
        let mut slots = vec![self.layout.pad_token; w];
        let tail = &context[context.len().saturating_sub(w)..];
        let offset = w - tail.len();
        for (i, &t) in tail.iter().enumerate() {
            if t as usize >= self.layout.vocab {
                return Err(PrepoError::OutOfVocabulary {
                    token: t,
                    vocab: self.layout.vocab,
                });
            }
            slots[offset + i] = t;
        }
        Ok(slots)
    }

    fn activations(&self, context: &[TokenId]) -> Result<Activations> {
        let l = &self.layout;
        let slots = self.window_slots(context)?;
        let emb = &self.params[l.embed_range()];
        let mut input = Vec::with_capacity(l.input_width());
        for &t in &slots {
            let row = t as usize * l.embed;
            input.extend_from_slice(&emb[row..row + l.embed]);
        }
        let w1 = &self.params[l.w1_range()];
        let b1 = &self.params[l.b1_range()];
        let width = l.input_width();
        let hidden: Vec<f64> = (0..l.hidden)
            .map(|j| {
                let row = &w1[j * width..(j + 1) * width];
                let pre: f64 = row.iter().zip(&input).map(|(a, b)| a * b).sum();
                (pre + b1[j]).tanh()
            })
            .collect();
        let w2 = &self.params[l.w2_range()];
        let b2 = &self.params[l.b2_range()];
        let logits: Vec<f64> = (0..l.vocab)
            .map(|v| {
                let row = &w2[v * l.hidden..(v + 1) * l.hidden];
                row.iter().zip(&hidden).map(|(a, b)| a * b).sum::<f64>() + b2[v]
            })
            .collect();
        Ok(Activations {
            slots,
            input,
            hidden,
            logits,
        })
    }

    pub fn forward(&self, context: &[TokenId]) -> Result<TokenDistribution> {
        self.forward_tempered(context, 1.0)
    }

    /// Distribution of `softmax(logits / temperature)`.
    pub fn forward_tempered(&self, context: &[TokenId], temperature: f64) -> Result<TokenDistribution> {
        let act = self.activations(context)?;
        let logits = if temperature == 1.0 {
            act.logits
        } else {
            act.logits.iter().map(|z| z / temperature).collect()
        };
        Ok(TokenDistribution::from_logits(logits))
    }

    pub fn log_prob(&self, context: &[TokenId], token: TokenId, temperature: f64) -> Result<f64> {
        self.check_token(token)?;
        Ok(self.forward_tempered(context, temperature)?.log_probs[token as usize])
    }

    fn check_token(&self, token: TokenId) -> Result<()> {
        if (token as usize) < self.layout.vocab {
            Ok(())
        } else {
            Err(PrepoError::OutOfVocabulary {
                token,
                vocab: self.layout.vocab,
            })
        }
    }

    /// Adds `scale * d/dθ log π_T(token | context)` into `grad` and returns the
    /// log-probability.
    pub fn accumulate_score(
        &self,
        context: &[TokenId],
        token: TokenId,
        temperature: f64,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        self.check_token(token)?;
        let l = &self.layout;
        if grad.len() != l.param_count() {
            return Err(PrepoError::SizeMismatch(format!(
                "gradient buffer has {} entries, layout wants {}",
                grad.len(),
                l.param_count()
            )));
        }
        let act = self.activations(context)?;
        let dist = TokenDistribution::from_logits(act.logits.iter().map(|z| z / temperature).collect());
        let log_prob = dist.log_probs[token as usize];
        if scale == 0.0 {
            return Ok(log_prob);
        }

        // d log softmax(z/T)[k] / dz = (onehot_k - p) / T
        let g_logits: Vec<f64> = dist
            .log_probs
            .iter()
            .enumerate()
            .map(|(v, lp)| {
                let indicator = if v == token as usize { 1.0 } else { 0.0 };
                scale * (indicator - lp.exp()) / temperature
            })
            .collect();

        let (h, width) = (l.hidden, l.input_width());
        let w2_start = l.w2_range().start;
        let b2_start = l.b2_range().start;
        let mut g_hidden = vec![0.0; h];
        for (v, &gz) in g_logits.iter().enumerate() {
            grad[b2_start + v] += gz;
            let row = w2_start + v * h;
            for j in 0..h {
                grad[row + j] += gz * act.hidden[j];
                g_hidden[j] += gz * self.params[row + j];
            }
        }

        let w1_start = l.w1_range().start;
        let b1_start = l.b1_range().start;
        let mut g_input = vec![0.0; width];
        for j in 0..h {
            let g_pre = g_hidden[j] * (1.0 - act.hidden[j] * act.hidden[j]);
            if g_pre == 0.0 {
                continue;
            }
            grad[b1_start + j] += g_pre;
            let row = w1_start + j * width;
            for i in 0..width {
                grad[row + i] += g_pre * act.input[i];
                g_input[i] += g_pre * self.params[row + i];
            }
        }

        let e = l.embed;
        for (slot, &t) in act.slots.iter().enumerate() {
            let dst = t as usize * e;
            for k in 0..e {
                grad[dst + k] += g_input[slot * e + k];
            }
        }
        Ok(log_prob)
    }

    /// Analytic gradient of `log π(token | context)` at temperature 1.
    pub fn grad_log_prob(&self, context: &[TokenId], token: TokenId) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.layout.param_count()];
        self.accumulate_score(context, token, 1.0, 1.0, &mut grad)?;
        Ok(grad)
    }

    /// Teacher-forced perplexity of the prompt tokens:
    /// `exp(-(1/T) sum_t log π(x_t | x_<t))`.
    pub fn prompt_ppl(&self, prompt: &[TokenId]) -> Result<f64> {
        if prompt.is_empty() {
            return Err(PrepoError::Empty("prompt has no tokens".into()));
        }
        let mut nll = 0.0;
        for t in 0..prompt.len() {
            nll -= self.log_prob(&prompt[..t], prompt[t], 1.0)?;
        }
        Ok((nll / prompt.len() as f64).exp().max(1.0))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let l = &self.layout;
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.params.len());
        out.extend_from_slice(MAGIC);
        for v in [
            FORMAT_VERSION,
            l.vocab as u32,
            l.pad_token,
            l.window as u32,
            l.embed as u32,
            l.hidden as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |message: &str| PrepoError::Parse {
            context: "policy checkpoint".into(),
            message: message.into(),
        };
        if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
            return Err(bad("missing header"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
        if word(0) != FORMAT_VERSION {
            return Err(bad("unsupported version"));
        }
        let layout = PolicyLayout {
            vocab: word(1) as usize,
            pad_token: word(2),
            window: word(3) as usize,
            embed: word(4) as usize,
            hidden: word(5) as usize,
        };
        let n = u64::from_le_bytes(bytes[32..40].try_into().unwrap()) as usize;
        if bytes.len() != HEADER_LEN + 8 * n {
            return Err(bad("truncated parameter block"));
        }
        let params = bytes[HEADER_LEN..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_params(layout, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(PrepoError::Missing(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Frozen copy of the policy taken when a rollout batch is generated.
#[derive(Clone, Debug)]
pub struct SnapshotPolicy {
    inner: Policy,
}

impl Deref for SnapshotPolicy {
    type Target = Policy;

    fn deref(&self) -> &Policy {
        &self.inner
    }
}

impl SnapshotPolicy {
    /// Samples until the terminator or `max_len` tokens, recording the
    /// snapshot log-probability and entropy of the tempered distribution at
    /// each step. `reward` is left at zero for the verifier to fill in.
    pub fn sample_rollout(
        &self,
        prompt: &Prompt,
        terminator: TokenId,
        temperature: f64,
        max_len: usize,
        rng: &mut Stream,
    ) -> Result<Rollout> {
        if !(temperature > 0.0) || max_len == 0 {
            return Err(PrepoError::Domain(format!(
                "sampling needs temperature > 0 and max_len >= 1 (got {temperature}, {max_len})"
            )));
        }
        let mut context = prompt.tokens.clone();
        let mut tokens = Vec::new();
        let mut old_log_probs = Vec::new();
        let mut token_entropies = Vec::new();
        while tokens.len() < max_len {
            let dist = self.forward_tempered(&context, temperature)?;
            let token = dist.sample_with(rng.uniform());
            old_log_probs.push(dist.log_probs[token as usize]);
            token_entropies.push(dist.entropy());
            tokens.push(token);
            context.push(token);
            if token == terminator {
                break;
            }
        }
        Ok(Rollout {
            prompt_id: prompt.id,
            prompt_tokens: prompt.tokens.clone(),
            tokens,
            old_log_probs,
            token_entropies,
            reward: 0.0,
            temperature,
        })
    }

    /// Greedy decoding; used for deterministic-policy checks.
    pub fn greedy_rollout(&self, prompt: &Prompt, terminator: TokenId, max_len: usize) -> Result<Rollout> {
        let mut context = prompt.tokens.clone();
        let mut out = Rollout {
            prompt_id: prompt.id,
            prompt_tokens: prompt.tokens.clone(),
            tokens: Vec::new(),
            old_log_probs: Vec::new(),
            token_entropies: Vec::new(),
            reward: 0.0,
            temperature: 1.0,
        };
        while out.tokens.len() < max_len {
            let dist = self.forward(&context)?;
            let token = dist.argmax();
            out.old_log_probs.push(dist.log_probs[token as usize]);
            out.token_entropies.push(dist.entropy());
            out.tokens.push(token);
            context.push(token);
            if token == terminator {
                break;
            }
        }
        Ok(out)
    }
}
