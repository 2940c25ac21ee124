//! Experiment specification files.
//!
//! Specs are TOML documents whose keys mirror the config structs below.
//! Unknown keys are rejected.
//!
//! ```toml
//! name = "prepo-s0"
//! output_dir = "runs"
//!
//! [dataset]
//! seed = 0
//! n_prompts = 512
//! min_level = 1
//! max_level = 4
//!
//! [train]
//! total_steps = 300
//! candidate_batch = 80
//! sub_batch = 16
//! selection = "prepo"
//!
//! [eval]
//! k = 16
//! ```

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{PrepoError, Result};
use crate::objective::ClipConfig;
use crate::optim::AdamWConfig;
use crate::policy::PolicyLayout;
use crate::scheduler::Pacing;
use crate::taskgen::{read_dataset, Prompt, RewardSpec, Task};
use crate::weighting::EntropyMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Perplexity-window schedule; entropy weighting per `weighting`.
    Prepo,
    /// Perplexity-window schedule with weighting always off.
    PplScheduleOnly,
    /// Seeded uniform draw of `K` candidates.
    Random,
    /// The `K` lowest-perplexity candidates every step.
    LowPpl,
    /// The `K` highest-perplexity candidates every step.
    HighPpl,
}

impl FromStr for SelectionMode {
    type Err = PrepoError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "prepo" => SelectionMode::Prepo,
            "ppl_schedule_only" => SelectionMode::PplScheduleOnly,
            "random" => SelectionMode::Random,
            "low_ppl" => SelectionMode::LowPpl,
            "high_ppl" => SelectionMode::HighPpl,
            other => {
                return Err(PrepoError::Parse {
                    context: "selection".into(),
                    message: format!("unknown selection mode {other:?}"),
                })
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub modulus: u32,
    pub max_prompt_len: usize,
    pub seed: u64,
    pub n_prompts: usize,
    pub min_level: u32,
    pub max_level: u32,
    /// Load records from this file instead of generating.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            modulus: 5,
            max_prompt_len: 16,
            seed: 0,
            n_prompts: 512,
            min_level: 1,
            max_level: 4,
            path: None,
        }
    }
}

impl DatasetConfig {
    pub fn task(&self) -> Result<Task> {
        Task::new(self.modulus, self.max_prompt_len)
    }

    pub fn load(&self) -> Result<(Task, Vec<Prompt>)> {
        let task = self.task()?;
        let prompts = match &self.path {
            Some(path) => {
                let file = std::fs::File::open(path).map_err(|_| PrepoError::Missing(path.clone()))?;
                read_dataset(std::io::BufReader::new(file), &task.vocab)?
            }
            None => task.generate_dataset(self.seed, self.n_prompts, (self.min_level, self.max_level))?,
        };
        Ok((task, prompts))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub window: usize,
    pub embed: usize,
    pub hidden: usize,
    /// Scale of the output projection at initialization.
    pub init_output_scale: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            window: PolicyLayout::DEFAULT_WINDOW,
            embed: PolicyLayout::DEFAULT_EMBED,
            hidden: PolicyLayout::DEFAULT_HIDDEN,
            init_output_scale: 1.0,
        }
    }
}

impl PolicyConfig {
    pub fn layout(&self, task: &Task) -> PolicyLayout {
        PolicyLayout {
            vocab: task.vocab.size(),
            pad_token: task.vocab.padding(),
            window: self.window,
            embed: self.embed,
            hidden: self.hidden,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_steps: usize,
    /// Candidate pool size |B| scored each step.
    pub candidate_batch: usize,
    /// Prompts selected per step (K).
    pub sub_batch: usize,
    /// Rollouts per prompt (G).
    pub group_size: usize,
    /// Prompts per optimizer mini-batch; the last mini-batch of a step may be
    /// smaller when this does not divide `sub_batch`.
    pub mini_batch: usize,
    /// Passes over each rollout batch.
    pub epochs: usize,
    pub temperature: f64,
    pub max_rollout_len: usize,
    pub selection: SelectionMode,
    pub weighting: bool,
    pub entropy_mode: EntropyMode,
    pub pacing: Pacing,
    pub clip: ClipConfig,
    pub optimizer: AdamWConfig,
    pub reward: RewardSpec,
    pub policy: PolicyConfig,
    /// Seeds policy initialization, candidate order and rollouts.
    pub seed: u64,
    /// Write `checkpoint_<step>` every this many steps (0: final only).
    pub checkpoint_every: usize,
    /// Evaluate pass@1 on the eval prompts every this many steps (0: never).
    pub eval_every: usize,
    /// Run rollouts and per-group gradients on the rayon pool. Results are
    /// identical either way.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 100,
            candidate_batch: 80,
            sub_batch: 16,
            group_size: 8,
            mini_batch: 16,
            epochs: 1,
            temperature: 1.0,
            max_rollout_len: 8,
            selection: SelectionMode::Prepo,
            weighting: true,
            entropy_mode: EntropyMode::TokenWeighted,
            pacing: Pacing::Linear,
            clip: ClipConfig::default(),
            optimizer: AdamWConfig::default(),
            reward: RewardSpec::default(),
            policy: PolicyConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            eval_every: 0,
            parallel: true,
        }
    }
}

impl TrainConfig {
    /// Entropy weighting actually applied to the loss.
    pub fn weighting_applied(&self) -> bool {
        self.weighting && self.selection != SelectionMode::PplScheduleOnly
    }

    pub fn validate(&self, dataset_size: usize) -> Result<()> {
        let fail = |m: String| Err(PrepoError::InvalidConfig(m));
        if self.sub_batch == 0 {
            return fail("sub_batch (K) must be >= 1".into());
        }
        if self.sub_batch > self.candidate_batch {
            return fail(format!(
                "sub_batch K={} exceeds candidate_batch |B|={} (K <= |B| required)",
                self.sub_batch, self.candidate_batch
            ));
        }
        if self.candidate_batch > dataset_size {
            return fail(format!(
                "candidate_batch |B|={} exceeds dataset size {dataset_size}",
                self.candidate_batch
            ));
        }
        if self.group_size < 2 {
            return fail(format!("group_size G={} must be >= 2", self.group_size));
        }
        if self.mini_batch == 0 || self.mini_batch > self.sub_batch {
            return fail(format!("mini_batch={} must be in 1..=sub_batch", self.mini_batch));
        }
        if self.epochs == 0 {
            return fail("epochs must be >= 1".into());
        }
        if !(self.temperature > 0.0) {
            return fail(format!("temperature must be > 0, got {}", self.temperature));
        }
        if self.max_rollout_len == 0 {
            return fail("max_rollout_len must be >= 1".into());
        }
        if i64::try_from(self.seed).is_err() {
            return fail("seed must fit in a signed 64-bit integer".into());
        }
        self.clip.validate()?;
        self.optimizer.validate()?;
        self.reward.validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k: usize,
    pub temperature: f64,
    pub seed: u64,
    /// Evaluate on the first `n_prompts` dataset prompts (all when absent).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_prompts: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 16,
            temperature: 1.0,
            seed: 1,
            n_prompts: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(PrepoError::InvalidConfig("eval k must be >= 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(PrepoError::InvalidConfig("eval temperature must be > 0".into()));
        }
        if self.n_prompts == Some(0) {
            return Err(PrepoError::InvalidConfig("eval n_prompts must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentSpec {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            output_dir: default_output_dir(),
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| PrepoError::Parse {
            context: origin.to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| PrepoError::Missing(path.to_path_buf()))?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    /// Structural checks that do not need the dataset.
    pub fn validate_shape(&self) -> Result<()> {
        if self.name.is_empty()
            || self
                .name
                .chars()
                .any(|c| !(c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.'))
        {
            return Err(PrepoError::InvalidConfig(format!(
                "name {:?} must be non-empty and use only [A-Za-z0-9._-]",
                self.name
            )));
        }
        self.eval.validate()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_spec_uses_defaults() {
        let s = ExperimentSpec::from_toml("name = \"x\"\n", "inline").unwrap();
        assert_eq!(s.train.group_size, 8);
        assert_eq!(s.train.clip, ClipConfig { eps_low: 0.2, eps_high: 0.28 });
        assert_eq!(s.train.optimizer.beta1, 0.9);
        assert_eq!(s.train.optimizer.beta2, 0.999);
        assert_eq!(s.train.optimizer.weight_decay, 0.01);
        assert_eq!(s.eval.k, 16);
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(ExperimentSpec::from_toml("name = \"x\"\nbogus = 1\n", "inline").is_err());
        assert!(ExperimentSpec::from_toml("name = \"x\"\n[train]\nsub_bach = 3\n", "inline").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut s = ExperimentSpec::new("rt");
        s.train.selection = SelectionMode::PplScheduleOnly;
        s.train.pacing = Pacing::Exponential;
        s.train.optimizer.learning_rate = 1e-6;
        s.eval.n_prompts = Some(7);
        let back = ExperimentSpec::from_toml(&s.to_toml(), "echo").unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn validation_names_the_violated_invariant() {
        let t = TrainConfig {
            sub_batch: 100,
            ..TrainConfig::default()
        };
        let err = t.validate(512).unwrap_err().to_string();
        assert!(err.contains("K <= |B|"), "{err}");
        let t = TrainConfig {
            group_size: 1,
            ..TrainConfig::default()
        };
        assert!(t.validate(512).is_err());
        assert!(TrainConfig::default().validate(10).is_err());
    }

    #[test]
    fn schedule_only_disables_weighting() {
        let mut t = TrainConfig::default();
        assert!(t.weighting_applied());
        t.selection = SelectionMode::PplScheduleOnly;
        assert!(!t.weighting_applied());
    }
}
