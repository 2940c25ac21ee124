//! Synthetic verifiable prompts: modular arithmetic over a small vocabulary.
//!
//! A prompt of difficulty `L` is `a1 op a2 op ... aL =` with operands in
//! `0..m` and operators `+`/`*` (usual precedence, evaluated mod `m`). The
//! answer is a single digit token followed by the terminator.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{PrepoError, Result};
use crate::rng::Stream;

pub type TokenId = u32;

/// Token table. Ids `0..m` are the digits, followed by `+`, `*`, `=`,
/// the terminator and the padding token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    modulus: u32,
}

impl Vocab {
    pub const MIN_MODULUS: u32 = 3;
    pub const MAX_MODULUS: u32 = 64;

    pub fn new(modulus: u32) -> Result<Self> {
        if !(Self::MIN_MODULUS..=Self::MAX_MODULUS).contains(&modulus) {
            return Err(PrepoError::InvalidConfig(format!(
                "modulus must be in {}..={}, got {modulus}",
                Self::MIN_MODULUS,
                Self::MAX_MODULUS
            )));
        }
        Ok(Self { modulus })
    }

    pub fn modulus(&self) -> u32 {
        self.modulus
    }

    pub fn size(&self) -> usize {
        self.modulus as usize + 5
    }

    pub fn plus(&self) -> TokenId {
        self.modulus
    }

    pub fn times(&self) -> TokenId {
        self.modulus + 1
    }

    pub fn equals(&self) -> TokenId {
        self.modulus + 2
    }

    pub fn terminator(&self) -> TokenId {
        self.modulus + 3
    }

    pub fn padding(&self) -> TokenId {
        self.modulus + 4
    }

    pub fn digit(&self, value: u32) -> TokenId {
        debug_assert!(value < self.modulus);
        value
    }

    pub fn is_digit(&self, token: TokenId) -> bool {
        token < self.modulus
    }

    pub fn symbol(&self, token: TokenId) -> Option<String> {
        let m = self.modulus;
        match token {
            t if t < m => Some(t.to_string()),
            t if t == m => Some("+".into()),
            t if t == m + 1 => Some("*".into()),
            t if t == m + 2 => Some("=".into()),
            t if t == m + 3 => Some("<eos>".into()),
            t if t == m + 4 => Some("<pad>".into()),
            _ => None,
        }
    }

    pub fn render(&self, tokens: &[TokenId]) -> String {
        let mut out = String::new();
        for &t in tokens {
            match self.symbol(t) {
                Some(s) => out.push_str(&s),
                None => {
                    let _ = write!(out, "<{t}?>");
                }
            }
        }
        out
    }

    pub fn check(&self, token: TokenId) -> Result<()> {
        if (token as usize) < self.size() {
            Ok(())
        } else {
            Err(PrepoError::OutOfVocabulary {
                token,
                vocab: self.size(),
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: usize,
    pub tokens: Vec<TokenId>,
    pub answer: Vec<TokenId>,
    /// Operand count. Never shown to the policy.
    pub difficulty: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardSpec {
    pub correct_reward: f64,
    pub incorrect_reward: f64,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self {
            correct_reward: 1.0,
            incorrect_reward: 0.0,
        }
    }
}

impl RewardSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.correct_reward > self.incorrect_reward) {
            return Err(PrepoError::InvalidConfig(
                "correct_reward must exceed incorrect_reward".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub vocab: Vocab,
    pub max_prompt_len: usize,
}

impl Task {
    pub fn new(modulus: u32, max_prompt_len: usize) -> Result<Self> {
        if max_prompt_len < 2 {
            return Err(PrepoError::InvalidConfig(
                "max_prompt_len must be at least 2".into(),
            ));
        }
        Ok(Self {
            vocab: Vocab::new(modulus)?,
            max_prompt_len,
        })
    }

    /// Number of distinct prompts with `level` operands (saturating).
    pub fn level_capacity(&self, level: u32) -> u128 {
        let m = self.vocab.modulus as u128;
        let mut cap: u128 = 1;
        for i in 0..level {
            cap = cap.saturating_mul(m);
            if i > 0 {
                cap = cap.saturating_mul(2);
            }
        }
        cap
    }

    /// Evaluates operand/operator lists with `*` binding tighter than `+`, mod m.
    pub fn evaluate(&self, operands: &[u32], ops: &[TokenId]) -> u32 {
        let m = self.vocab.modulus as u64;
        let mut sum = 0u64;
        let mut product = operands[0] as u64 % m;
        for (op, &operand) in ops.iter().zip(&operands[1..]) {
            if *op == self.vocab.times() {
                product = product * operand as u64 % m;
            } else {
                sum = (sum + product) % m;
                product = operand as u64 % m;
            }
        }
        ((sum + product) % m) as u32
    }

    fn build_prompt(&self, id: usize, level: u32, rng: &mut Stream) -> Prompt {
        let m = self.vocab.modulus as u64;
        let operands: Vec<u32> = (0..level).map(|_| rng.below(m) as u32).collect();
        let ops: Vec<TokenId> = (1..level)
            .map(|_| {
                if rng.below(2) == 0 {
                    self.vocab.plus()
                } else {
                    self.vocab.times()
                }
            })
            .collect();
        let mut tokens = Vec::with_capacity(2 * level as usize);
        for (i, &a) in operands.iter().enumerate() {
            if i > 0 {
                tokens.push(ops[i - 1]);
            }
            tokens.push(self.vocab.digit(a));
        }
        tokens.push(self.vocab.equals());
        let answer = vec![self.vocab.digit(self.evaluate(&operands, &ops))];
        Prompt {
            id,
            tokens,
            answer,
            difficulty: level,
        }
    }

    /// Deterministic dataset of `n_prompts` distinct prompts with difficulty
    /// levels drawn uniformly from `levels` (inclusive). Levels whose prompt
    /// space is exhausted are dropped from the draw.
    pub fn generate_dataset(
        &self,
        seed: u64,
        n_prompts: usize,
        levels: (u32, u32),
    ) -> Result<Vec<Prompt>> {
        let (lo, hi) = levels;
        if n_prompts == 0 {
            return Err(PrepoError::InvalidConfig("n_prompts must be >= 1".into()));
        }
        if lo == 0 || lo > hi {
            return Err(PrepoError::InvalidConfig(format!(
                "level range [{lo}, {hi}] is empty or contains 0"
            )));
        }
        if 2 * hi as usize > self.max_prompt_len {
            return Err(PrepoError::InvalidConfig(format!(
                "level {hi} needs {} prompt tokens, max_prompt_len is {}",
                2 * hi,
                self.max_prompt_len
            )));
        }
        let capacities: Vec<u128> = (lo..=hi).map(|l| self.level_capacity(l)).collect();
        let total = capacities
            .iter()
            .fold(0u128, |acc, &c| acc.saturating_add(c));
        if total < n_prompts as u128 {
            return Err(PrepoError::Capacity(format!(
                "levels [{lo}, {hi}] admit {total} distinct prompts, {n_prompts} requested"
            )));
        }

        let mut rng = Stream::tagged(seed, &[0x7461_736b]);
        let mut used: Vec<u128> = vec![0; capacities.len()];
        let mut seen: HashSet<Vec<TokenId>> = HashSet::with_capacity(n_prompts);
        let mut prompts = Vec::with_capacity(n_prompts);
        while prompts.len() < n_prompts {
            let open: Vec<usize> = (0..capacities.len())
                .filter(|&i| used[i] < capacities[i])
                .collect();
            let slot = open[rng.below(open.len() as u64) as usize];
            let level = lo + slot as u32;
            let prompt = self.build_prompt(prompts.len(), level, &mut rng);
            if seen.insert(prompt.tokens.clone()) {
                used[slot] += 1;
                prompts.push(prompt);
            }
        }
        Ok(prompts)
    }
}

/// Truncates `completion` at its first terminator. `None` when no terminator
/// is present, i.e. the completion ran out of length.
pub fn canonicalize<'a>(vocab: &Vocab, completion: &'a [TokenId]) -> Option<&'a [TokenId]> {
    completion
        .iter()
        .position(|&t| t == vocab.terminator())
        .map(|end| &completion[..end])
}

pub fn verify(vocab: &Vocab, prompt: &Prompt, completion: &[TokenId], spec: &RewardSpec) -> f64 {
    match canonicalize(vocab, completion) {
        Some(body) if body == prompt.answer.as_slice() => spec.correct_reward,
        _ => spec.incorrect_reward,
    }
}

fn join_ids(ids: &[TokenId]) -> String {
    ids.iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Writes one `id,difficulty,token_ids,answer_ids` record per line; id lists
/// are space-separated.
pub fn write_dataset<W: Write>(mut out: W, prompts: &[Prompt]) -> Result<()> {
    for p in prompts {
        writeln!(
            out,
            "{},{},{},{}",
            p.id,
            p.difficulty,
            join_ids(&p.tokens),
            join_ids(&p.answer)
        )?;
    }
    Ok(())
}

fn parse_ids(field: &str, line_no: usize, vocab: &Vocab) -> Result<Vec<TokenId>> {
    field
        .split_whitespace()
        .map(|s| {
            let t: TokenId = s.parse().map_err(|_| PrepoError::Parse {
                context: format!("dataset line {line_no}"),
                message: format!("bad token id {s:?}"),
            })?;
            vocab.check(t)?;
            Ok(t)
        })
        .collect()
}

/// Reads records written by [`write_dataset`]. Blank lines and `#` comments are skipped.
pub fn read_dataset<R: BufRead>(input: R, vocab: &Vocab) -> Result<Vec<Prompt>> {
    let mut prompts = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        let bad = |message: String| PrepoError::Parse {
            context: format!("dataset line {line_no}"),
            message,
        };
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", fields.len())));
        }
        let id = fields[0]
            .parse()
            .map_err(|_| bad(format!("bad id {:?}", fields[0])))?;
        let difficulty = fields[1]
            .parse()
            .map_err(|_| bad(format!("bad difficulty {:?}", fields[1])))?;
        let tokens = parse_ids(fields[2], line_no, vocab)?;
        let answer = parse_ids(fields[3], line_no, vocab)?;
        if tokens.is_empty() {
            return Err(bad("prompt has no tokens".into()));
        }
        if tokens.contains(&vocab.terminator()) {
            return Err(bad("prompt contains the terminator".into()));
        }
        prompts.push(Prompt {
            id,
            tokens,
            answer,
            difficulty,
        });
    }
    Ok(prompts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task() -> Task {
        Task::new(5, 16).unwrap()
    }

    /// Independent evaluator: renders the prompt to text and applies
    /// recursive descent over `+` and `*` in plain integers, reducing at the end.
    fn oracle_answer(task: &Task, prompt: &Prompt) -> u32 {
        let text = task.vocab.render(&prompt.tokens);
        let expr = text.trim_end_matches('=');
        let total: u64 = expr
            .split('+')
            .map(|term| {
                term.split('*')
                    .map(|d| d.parse::<u64>().unwrap())
                    .product::<u64>()
            })
            .sum();
        (total % task.vocab.modulus() as u64) as u32
    }

    #[test]
    fn vocab_has_ten_tokens_at_modulus_five() {
        let v = Vocab::new(5).unwrap();
        assert_eq!(v.size(), 10);
        let symbols: HashSet<String> = (0..10).map(|t| v.symbol(t).unwrap()).collect();
        assert_eq!(symbols.len(), 10);
        assert!(v.symbol(10).is_none());
    }

    #[test]
    fn dataset_is_deterministic_and_distinct() {
        let t = task();
        let a = t.generate_dataset(7, 4, (2, 2)).unwrap();
        let b = t.generate_dataset(7, 4, (2, 2)).unwrap();
        assert_eq!(a, b);
        let unique: HashSet<_> = a.iter().map(|p| p.tokens.clone()).collect();
        assert_eq!(unique.len(), 4);
        assert!(a.iter().all(|p| p.difficulty == 2));
        assert_eq!(a.iter().map(|p| p.id).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn answer_matches_independent_evaluation() {
        let t = task();
        let p = &t.generate_dataset(7, 1, (2, 2)).unwrap()[0];
        assert_eq!(p.answer, vec![oracle_answer(&t, p)]);
        for p in t.generate_dataset(3, 300, (1, 4)).unwrap() {
            assert_eq!(p.answer, vec![oracle_answer(&t, &p)], "{}", t.vocab.render(&p.tokens));
        }
    }

    #[test]
    fn capacity_error_on_huge_request() {
        let err = task().generate_dataset(7, 1_000_000_000, (2, 2)).unwrap_err();
        assert!(matches!(err, PrepoError::Capacity(_)));
    }

    #[test]
    fn exhausting_a_level_fills_from_the_others() {
        let t = task();
        // level 1 has 5 prompts, level 2 has 50
        let d = t.generate_dataset(1, 55, (1, 2)).unwrap();
        assert_eq!(d.iter().filter(|p| p.difficulty == 1).count(), 5);
        assert_eq!(d.iter().filter(|p| p.difficulty == 2).count(), 50);
    }

    #[test]
    fn verifier_examples() {
        let t = task();
        let v = &t.vocab;
        let p = Prompt {
            id: 0,
            tokens: vec![2, v.plus(), 2, v.equals()],
            answer: vec![4],
            difficulty: 2,
        };
        let spec = RewardSpec::default();
        assert_eq!(verify(v, &p, &[4, v.terminator()], &spec), 1.0);
        assert_eq!(verify(v, &p, &[0, v.terminator()], &spec), 0.0);
        // max length reached without a terminator
        assert_eq!(verify(v, &p, &[4], &spec), 0.0);
        assert_eq!(verify(v, &p, &[4, 4], &spec), 0.0);
        assert_eq!(verify(v, &p, &[], &spec), 0.0);
        // everything after the first terminator is ignored
        assert_eq!(verify(v, &p, &[4, v.terminator(), 3, v.padding()], &spec), 1.0);
        assert_eq!(verify(v, &p, &[v.padding(), 4, v.terminator()], &spec), 0.0);
    }

    #[test]
    fn verifier_sound_on_generated_prompts() {
        let t = task();
        let spec = RewardSpec::default();
        for p in t.generate_dataset(11, 200, (1, 4)).unwrap() {
            let mut c = p.answer.clone();
            c.push(t.vocab.terminator());
            assert_eq!(verify(&t.vocab, &p, &c, &spec), spec.correct_reward);
        }
    }

    /// All completions of length 1..=3 a sampler can emit (the terminator,
    /// if present, is the last token) contain exactly one rewarded sequence.
    #[test]
    fn verifier_complete_by_enumeration() {
        let t = task();
        let v = &t.vocab;
        let size = v.size() as u32;
        let mut completions: Vec<Vec<TokenId>> = Vec::new();
        for len in 1..=3usize {
            let total = size.pow(len as u32);
            for code in 0..total {
                let mut c = Vec::with_capacity(len);
                let mut x = code;
                for _ in 0..len {
                    c.push(x % size);
                    x /= size;
                }
                if c[..len - 1].contains(&v.terminator()) {
                    continue;
                }
                completions.push(c);
            }
        }
        let spec = RewardSpec::default();
        for p in t.generate_dataset(5, 40, (1, 3)).unwrap() {
            let hits = completions
                .iter()
                .filter(|c| verify(v, &p, c, &spec) == spec.correct_reward)
                .count();
            assert_eq!(hits, 1);
        }
    }

    #[test]
    fn dataset_file_round_trip() {
        let t = task();
        let d = t.generate_dataset(9, 30, (1, 3)).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &d).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(&format!("0,{},", d[0].difficulty)));
        let back = read_dataset(buf.as_slice(), &t.vocab).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn dataset_reader_rejects_bad_records() {
        let v = Vocab::new(5).unwrap();
        assert!(read_dataset("0,2,1 5 2 7\n".as_bytes(), &v).is_err());
        assert!(read_dataset("0,2,1 5 99 7,3\n".as_bytes(), &v).is_err());
        assert!(read_dataset("0,2,1 8 7,3\n".as_bytes(), &v).is_err());
        assert!(read_dataset("# header\n\n0,2,1 5 2 7,3\n".as_bytes(), &v).is_ok());
    }
}
