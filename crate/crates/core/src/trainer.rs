//! Online training loop, evaluation and run-directory output.
//!
//! Each step:
//!
//! 1. draw `|B|` candidates (round-robin over a per-epoch shuffle),
//! 2. score them by perplexity under the current policy,
//! 3. select `K` prompts according to the selection mode,
//! 4. snapshot the policy,
//! 5. sample `G` rollouts per selected prompt,
//! 6. verify rewards,
//! 7. standardize advantages per group,
//! 8. compute relative-entropy weights per mini-batch,
//! 9. take AdamW steps on the negated surrogate gradient,
//! 10. append one [`StepMetrics`] record.
//!
//! Rollout randomness is keyed by `(seed, step, prompt id, sample index)`,
//! and per-group gradients are combined with a fixed reduction tree, so a run
//! is bit-identical whether or not it uses the thread pool.
//!
//! # Run directory
//!
//! * `config_echo.toml`: the resolved [`ExperimentSpec`]; re-running it reproduces the run
//! * `run_meta.json`: units and format notes
//! * `metrics.jsonl`: one [`StepMetrics`] object per line
//! * `ppl_trace.csv`: `step,rho,l,selected_ids,min_ppl,mean_ppl,max_ppl`
//! * `weights_hist.csv`: `step,bin_0..bin_49,overflow` over `[0, 5)`
//! * `checkpoint_<step>`: policy checkpoints (see [`crate::policy`])
//! * `eval.json`: final evaluation

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{EvalConfig, ExperimentSpec, SelectionMode, TrainConfig};
use crate::error::{PrepoError, Result};
use crate::objective::{prepo_loss, Group};
use crate::optim::{adamw_step, AdamWState};
use crate::policy::{Policy, SnapshotPolicy};
use crate::rng::Stream;
use crate::rollout::Rollout;
use crate::scheduler::{score_batch, select_window, static_group_select, SelectionState, StaticMode};
use crate::stats::{spearman, Spearman};
use crate::taskgen::{verify, Prompt, RewardSpec, Task};
use crate::weighting::{effective_batch_size, relative_weights, weight_histogram, EntropyWeights, HIST_BINS};

const TAG_POOL: u64 = 0x706f_6f6c;
const TAG_ROLLOUT: u64 = 0x726f_6c6c;
const TAG_RANDOM: u64 = 0x7365_6c65;
const TAG_EVAL: u64 = 0x6576_616c;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub rho: f64,
    pub window_start: Option<usize>,
    pub mean_reward: f64,
    /// Mean token entropy (nats) over all sampled tokens.
    pub policy_entropy: f64,
    pub zero_advantage_ratio: f64,
    pub all_correct_ratio: f64,
    /// Mean applied rollout weight, averaged over mini-batches.
    pub effective_batch_size: f64,
    pub degenerate_weight_batches: usize,
    pub selected_ppl_min: f64,
    pub selected_ppl_mean: f64,
    pub selected_ppl_max: f64,
    pub mean_response_length: f64,
    pub rollout_count_cumulative: u64,
    pub clip_fraction: f64,
    /// L2 norm of the surrogate gradient, averaged over mini-batches.
    pub grad_norm: f64,
    pub eval_pass_at_1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub temperature: f64,
    pub n_prompts: usize,
    pub pass_at_1_avg_k: f64,
    pub passrate_at_k: f64,
    /// Correct samples per prompt, in prompt order.
    pub correct_counts: Vec<usize>,
}

/// Draws candidate pools round-robin over a seeded per-epoch permutation.
/// A pool never spans two epochs: when fewer than `|B|` prompts remain, the
/// remainder is dropped and a new permutation starts.
#[derive(Clone, Debug)]
pub struct CandidatePool {
    seed: u64,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
}

impl CandidatePool {
    pub fn new(seed: u64, dataset_size: usize) -> Self {
        let mut pool = Self {
            seed,
            order: (0..dataset_size).collect(),
            cursor: 0,
            epoch: 0,
        };
        pool.reshuffle();
        pool
    }

    fn reshuffle(&mut self) {
        self.order.sort_unstable();
        Stream::tagged(self.seed, &[TAG_POOL, self.epoch]).shuffle(&mut self.order);
        self.cursor = 0;
    }

    /// Indices into the dataset for the next pool of `size` candidates.
    pub fn next(&mut self, size: usize) -> Vec<usize> {
        assert!(size <= self.order.len());
        if self.cursor + size > self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        let out = self.order[self.cursor..self.cursor + size].to_vec();
        self.cursor += size;
        out
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }
}

/// Samples `group_size` rollouts for each prompt and fills in verified rewards.
#[allow(clippy::too_many_arguments)]
pub fn generate_groups(
    snapshot: &SnapshotPolicy,
    task: &Task,
    prompts: &[&Prompt],
    group_size: usize,
    temperature: f64,
    max_len: usize,
    reward: &RewardSpec,
    seed: u64,
    step: u64,
    parallel: bool,
) -> Result<Vec<Group>> {
    let one = |p: &&Prompt| -> Result<Group> {
        let rollouts = (0..group_size)
            .map(|g| {
                let mut rng = Stream::tagged(seed, &[TAG_ROLLOUT, step, p.id as u64, g as u64]);
                let mut r = snapshot.sample_rollout(p, task.vocab.terminator(), temperature, max_len, &mut rng)?;
                r.reward = verify(&task.vocab, p, &r.tokens, reward);
                Ok(r)
            })
            .collect::<Result<Vec<Rollout>>>()?;
        Group::new(p.id, rollouts)
    };
    if parallel {
        prompts.par_iter().map(one).collect()
    } else {
        prompts.iter().map(one).collect()
    }
}

/// pass@1 averaged over `k` samples and passrate@k (solved at least once).
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    policy: &Policy,
    task: &Task,
    prompts: &[Prompt],
    k: usize,
    temperature: f64,
    max_len: usize,
    reward: &RewardSpec,
    seed: u64,
    parallel: bool,
) -> Result<EvalReport> {
    if prompts.is_empty() {
        return Err(PrepoError::Empty("evaluation set".into()));
    }
    if k == 0 {
        return Err(PrepoError::InvalidConfig("k must be >= 1".into()));
    }
    let snapshot = policy.snapshot();
    let count = |p: &Prompt| -> Result<usize> {
        let mut correct = 0;
        for i in 0..k {
            let mut rng = Stream::tagged(seed, &[TAG_EVAL, p.id as u64, i as u64]);
            let r = snapshot.sample_rollout(p, task.vocab.terminator(), temperature, max_len, &mut rng)?;
            if verify(&task.vocab, p, &r.tokens, reward) == reward.correct_reward {
                correct += 1;
            }
        }
        Ok(correct)
    };
    let correct_counts: Vec<usize> = if parallel {
        prompts.par_iter().map(count).collect::<Result<_>>()?
    } else {
        prompts.iter().map(count).collect::<Result<_>>()?
    };
    Ok(summarize_counts(correct_counts, k, temperature))
}

pub fn summarize_counts(correct_counts: Vec<usize>, k: usize, temperature: f64) -> EvalReport {
    let n = correct_counts.len() as f64;
    let pass_at_1_avg_k = correct_counts.iter().map(|&c| c as f64 / k as f64).sum::<f64>() / n;
    let passrate_at_k = correct_counts.iter().filter(|&&c| c > 0).count() as f64 / n;
    EvalReport {
        k,
        temperature,
        n_prompts: correct_counts.len(),
        pass_at_1_avg_k,
        passrate_at_k,
        correct_counts,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PplPassrateRow {
    pub id: usize,
    pub difficulty: u32,
    pub ppl: f64,
    pub passrate: f64,
}

/// Per-prompt perplexity against the fraction of `k` samples that are
/// correct, plus their Spearman correlation.
#[allow(clippy::too_many_arguments)]
pub fn ppl_passrate_correlation(
    policy: &Policy,
    task: &Task,
    prompts: &[Prompt],
    k: usize,
    temperature: f64,
    max_len: usize,
    reward: &RewardSpec,
    seed: u64,
    parallel: bool,
) -> Result<(Spearman, Vec<PplPassrateRow>)> {
    if prompts.len() < 3 {
        return Err(PrepoError::Undefined(format!("need at least 3 prompts, got {}", prompts.len())));
    }
    let eval = evaluate(policy, task, prompts, k, temperature, max_len, reward, seed, parallel)?;
    let rows = prompts
        .iter()
        .zip(&eval.correct_counts)
        .map(|(p, &c)| {
            Ok(PplPassrateRow {
                id: p.id,
                difficulty: p.difficulty,
                ppl: policy.prompt_ppl(&p.tokens)?,
                passrate: c as f64 / k as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ppl: Vec<f64> = rows.iter().map(|r| r.ppl).collect();
    let pass: Vec<f64> = rows.iter().map(|r| r.passrate).collect();
    Ok((spearman(&ppl, &pass)?, rows))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub metrics: Vec<StepMetrics>,
    pub eval: Option<EvalReport>,
    pub policy: Policy,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn l2(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn select(
    config: &TrainConfig,
    scored: &crate::scheduler::ScoredBatch,
    rho: f64,
    step: usize,
) -> Result<(Option<usize>, Vec<usize>)> {
    let k = config.sub_batch;
    Ok(match config.selection {
        SelectionMode::Prepo | SelectionMode::PplScheduleOnly => {
            let state = SelectionState::new(rho, k, scored.len(), config.pacing)?;
            let sel = select_window(scored, &state)?;
            (Some(sel.start), sel.ids)
        }
        SelectionMode::LowPpl => (Some(0), static_group_select(scored, k, StaticMode::Lowest)?),
        SelectionMode::HighPpl => (
            Some(scored.len() - k),
            static_group_select(scored, k, StaticMode::Highest)?,
        ),
        SelectionMode::Random => {
            let seed = crate::rng::fold_tags(&[config.seed, TAG_RANDOM, step as u64]);
            (None, static_group_select(scored, k, StaticMode::Random(seed))?)
        }
    })
}

struct RunFiles {
    metrics: BufWriter<File>,
    ppl_trace: BufWriter<File>,
    weights_hist: BufWriter<File>,
}

impl RunFiles {
    fn create(dir: &Path) -> Result<Self> {
        let mut ppl_trace = BufWriter::new(File::create(dir.join("ppl_trace.csv"))?);
        writeln!(ppl_trace, "step,rho,l,selected_ids,min_ppl,mean_ppl,max_ppl")?;
        let mut weights_hist = BufWriter::new(File::create(dir.join("weights_hist.csv"))?);
        let header: Vec<String> = (0..HIST_BINS).map(|b| format!("bin_{b}")).collect();
        writeln!(weights_hist, "step,{},overflow", header.join(","))?;
        Ok(Self {
            metrics: BufWriter::new(File::create(dir.join("metrics.jsonl"))?),
            ppl_trace,
            weights_hist,
        })
    }

    fn flush(&mut self) -> Result<()> {
        self.metrics.flush()?;
        self.ppl_trace.flush()?;
        self.weights_hist.flush()?;
        Ok(())
    }
}

fn write_nan_dump(dir: &Path, step: usize, last_good: &Policy, detail: &str) -> Result<()> {
    last_good.save(&dir.join("checkpoint_last_good"))?;
    let dump = serde_json::json!({ "step": step, "detail": detail });
    fs::write(dir.join("nan_dump.json"), serde_json::to_string_pretty(&dump)?)?;
    Ok(())
}

fn eval_prompts<'a>(eval: &EvalConfig, dataset: &'a [Prompt]) -> &'a [Prompt] {
    let n = eval.n_prompts.unwrap_or(dataset.len()).min(dataset.len());
    &dataset[..n]
}

/// Runs the full loop and writes the run directory (which must not exist yet).
pub fn train(spec: &ExperimentSpec, task: &Task, dataset: &[Prompt], run_dir: &Path) -> Result<TrainOutcome> {
    let config = &spec.train;
    spec.validate_shape()?;
    config.validate(dataset.len())?;
    let mut ids: Vec<usize> = dataset.iter().map(|p| p.id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(PrepoError::InvalidConfig("dataset prompt ids are not unique".into()));
    }
    if run_dir.exists() {
        return Err(PrepoError::InvalidConfig(format!(
            "run directory {} already exists; experiment names must be unique",
            run_dir.display()
        )));
    }
    fs::create_dir_all(run_dir)?;
    fs::write(
        run_dir.join("config_echo.toml"),
        format!("# entropy units: nats\n{}", spec.to_toml()),
    )?;
    let meta = serde_json::json!({
        "entropy_units": "nats",
        "log_base": "e",
        "eval_rng": "separate stream keyed by eval.seed",
        "checkpoint_format": "PREPOPOL v1",
        "weights_hist_range": [0.0, 5.0],
        "weights_hist_bins": HIST_BINS,
    });
    fs::write(run_dir.join("run_meta.json"), serde_json::to_string_pretty(&meta)?)?;

    let layout = config.policy.layout(task);
    let mut policy = Policy::init(layout, config.seed, config.policy.init_output_scale)?;
    let mut opt = AdamWState::new(layout.param_count());
    let mut pool = CandidatePool::new(config.seed, dataset.len());
    let mut files = RunFiles::create(run_dir)?;
    let mut history = Vec::with_capacity(config.total_steps);
    let eval_set = eval_prompts(&spec.eval, dataset);
    let weighting_on = config.weighting_applied();
    let mut cumulative: u64 = 0;

    for step in 0..config.total_steps {
        let rho = SelectionState::progress(step, config.total_steps);
        let candidates: Vec<&Prompt> = pool
            .next(config.candidate_batch)
            .into_iter()
            .map(|i| &dataset[i])
            .collect();
        let scored = score_batch(&policy, &candidates, config.parallel)?;
        let (start, selected_ids) = select(config, &scored, rho, step)?;
        let selected: Vec<&Prompt> = selected_ids
            .iter()
            .map(|id| *candidates.iter().find(|p| p.id == *id).expect("selected from pool"))
            .collect();
        let selected_ppl: Vec<f64> = selected_ids
            .iter()
            .map(|&id| scored.score_of(id).expect("scored"))
            .collect();

        let snapshot = policy.snapshot();
        let groups = generate_groups(
            &snapshot,
            task,
            &selected,
            config.group_size,
            config.temperature,
            config.max_rollout_len,
            &config.reward,
            config.seed,
            step as u64,
            config.parallel,
        )?;

        let rollouts: Vec<&Rollout> = groups.iter().flat_map(|g| g.rollouts.iter()).collect();
        let n_groups = groups.len() as f64;
        let zero_adv = groups.iter().filter(|g| g.zero_advantage).count() as f64 / n_groups;
        let all_correct = groups
            .iter()
            .filter(|g| g.all_equal_to(config.reward.correct_reward))
            .count() as f64
            / n_groups;
        let rewards: Vec<f64> = rollouts.iter().map(|r| r.reward).collect();
        let entropies: Vec<f64> = rollouts.iter().flat_map(|r| r.token_entropies.iter().copied()).collect();
        let lengths: Vec<f64> = rollouts.iter().map(|r| r.len() as f64).collect();

        let mut ebs = Vec::new();
        let mut clip_fracs = Vec::new();
        let mut grad_norms = Vec::new();
        let mut degenerate = 0;
        let mut hist_weights = Vec::new();
        for epoch in 0..config.epochs {
            for chunk in groups.chunks(config.mini_batch) {
                let flat: Vec<Rollout> = chunk.iter().flat_map(|g| g.rollouts.iter().cloned()).collect();
                let weights = if weighting_on {
                    relative_weights(&flat, config.entropy_mode)?
                } else {
                    EntropyWeights::uniform(flat.iter().map(Rollout::len).collect(), config.entropy_mode)
                };
                if epoch == 0 {
                    ebs.push(effective_batch_size(&weights));
                    degenerate += weights.degenerate as usize;
                    hist_weights.extend_from_slice(&weights.weights);
                }
                let report = prepo_loss(&policy, chunk, &weights, &config.clip, config.parallel)?;
                let norm = l2(&report.gradient);
                if !report.loss.is_finite() || !norm.is_finite() {
                    let detail = format!("loss {} grad_norm {norm}", report.loss);
                    write_nan_dump(run_dir, step, &policy, &detail)?;
                    files.flush()?;
                    return Err(PrepoError::NonFinite { step, detail });
                }
                clip_fracs.push(report.clip_fraction);
                grad_norms.push(norm);
                let descent: Vec<f64> = report.gradient.iter().map(|g| -g).collect();
                let before = policy.clone();
                adamw_step(policy.params_mut(), &descent, &mut opt, &config.optimizer)?;
                if policy.params().iter().any(|p| !p.is_finite()) {
                    let detail = "non-finite parameter after optimizer step".to_string();
                    write_nan_dump(run_dir, step, &before, &detail)?;
                    files.flush()?;
                    return Err(PrepoError::NonFinite { step, detail });
                }
            }
        }
        cumulative += (config.sub_batch * config.group_size) as u64;

        let eval_pass_at_1 = if config.eval_every > 0 && (step + 1) % config.eval_every == 0 {
            let r = evaluate(
                &policy,
                task,
                eval_set,
                spec.eval.k,
                spec.eval.temperature,
                config.max_rollout_len,
                &config.reward,
                spec.eval.seed,
                config.parallel,
            )?;
            Some(r.pass_at_1_avg_k)
        } else {
            None
        };

        let metrics = StepMetrics {
            step,
            rho,
            window_start: start,
            mean_reward: mean(&rewards),
            policy_entropy: mean(&entropies),
            zero_advantage_ratio: zero_adv,
            all_correct_ratio: all_correct,
            effective_batch_size: mean(&ebs),
            degenerate_weight_batches: degenerate,
            selected_ppl_min: selected_ppl.iter().copied().fold(f64::INFINITY, f64::min),
            selected_ppl_mean: mean(&selected_ppl),
            selected_ppl_max: selected_ppl.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean_response_length: mean(&lengths),
            rollout_count_cumulative: cumulative,
            clip_fraction: mean(&clip_fracs),
            grad_norm: mean(&grad_norms),
            eval_pass_at_1,
        };
        serde_json::to_writer(&mut files.metrics, &metrics)?;
        writeln!(files.metrics)?;
        let id_list: Vec<String> = selected_ids.iter().map(|i| i.to_string()).collect();
        writeln!(
            files.ppl_trace,
            "{},{},{},{},{},{},{}",
            step,
            rho,
            start.map(|s| s.to_string()).unwrap_or_default(),
            id_list.join(" "),
            metrics.selected_ppl_min,
            metrics.selected_ppl_mean,
            metrics.selected_ppl_max
        )?;
        let (bins, overflow) = weight_histogram(&hist_weights);
        let counts: Vec<String> = bins.iter().map(|c| c.to_string()).collect();
        writeln!(files.weights_hist, "{step},{},{overflow}", counts.join(","))?;
        history.push(metrics);

        if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 {
            policy.save(&run_dir.join(format!("checkpoint_{}", step + 1)))?;
        }
    }
    files.flush()?;

    let final_ckpt = run_dir.join(format!("checkpoint_{}", config.total_steps));
    if !final_ckpt.exists() {
        policy.save(&final_ckpt)?;
    }
    let eval = evaluate(
        &policy,
        task,
        eval_set,
        spec.eval.k,
        spec.eval.temperature,
        config.max_rollout_len,
        &config.reward,
        spec.eval.seed,
        config.parallel,
    )?;
    let eval_json = serde_json::json!({
        "k": eval.k,
        "temperature": eval.temperature,
        "n_prompts": eval.n_prompts,
        "pass_at_1_avg_k": eval.pass_at_1_avg_k,
        "passrate_at_k": eval.passrate_at_k,
        "rollout_count_cumulative": cumulative,
        "steps": config.total_steps,
    });
    fs::write(run_dir.join("eval.json"), serde_json::to_string_pretty(&eval_json)?)?;

    Ok(TrainOutcome {
        run_dir: run_dir.to_path_buf(),
        metrics: history,
        eval: Some(eval),
        policy,
    })
}

/// Reads `metrics.jsonl` from a run directory.
pub fn read_metrics(run_dir: &Path) -> Result<Vec<StepMetrics>> {
    let path = run_dir.join("metrics.jsonl");
    let text = fs::read_to_string(&path).map_err(|_| PrepoError::Missing(path.clone()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(PrepoError::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_never_repeats_within_a_draw() {
        let mut pool = CandidatePool::new(3, 10);
        for _ in 0..20 {
            let mut d = pool.next(4);
            d.sort_unstable();
            d.dedup();
            assert_eq!(d.len(), 4);
        }
        assert!(pool.epoch() > 0);
    }

    #[test]
    fn pool_covers_an_epoch_without_replacement() {
        let mut pool = CandidatePool::new(9, 12);
        let mut seen: Vec<usize> = (0..3).flat_map(|_| pool.next(4)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn eval_counting() {
        let r = summarize_counts(vec![1, 0], 2, 1.0);
        assert_eq!(r.pass_at_1_avg_k, 0.25);
        assert_eq!(r.passrate_at_k, 0.5);
        let r = summarize_counts(vec![4, 4, 4], 4, 1.0);
        assert_eq!((r.pass_at_1_avg_k, r.passrate_at_k), (1.0, 1.0));
        let r = summarize_counts(vec![0, 0], 4, 1.0);
        assert_eq!((r.pass_at_1_avg_k, r.passrate_at_k), (0.0, 0.0));
    }
}
