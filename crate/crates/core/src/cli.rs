//! Command implementations behind the `prepo` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentSpec;
use crate::error::PrepoError;
use crate::policy::Policy;
use crate::rng::Stream;
use crate::rollout::Rollout;
use crate::taskgen::{write_dataset, Task};
use crate::trainer::{evaluate, ppl_passrate_correlation, read_metrics, train, EvalReport, StepMetrics, TrainOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitStatus {
    Ok = 0,
    Parse = 2,
    Validation = 3,
    NonFinite = 4,
    MissingInput = 5,
}

impl From<&PrepoError> for ExitStatus {
    fn from(e: &PrepoError) -> Self {
        match e {
            PrepoError::Parse { .. } | PrepoError::Json(_) => ExitStatus::Parse,
            PrepoError::NonFinite { .. } => ExitStatus::NonFinite,
            PrepoError::Missing(_) | PrepoError::Io(_) => ExitStatus::MissingInput,
            _ => ExitStatus::Validation,
        }
    }
}

/// Command-line overrides applied on top of a spec file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub sequential: bool,
    pub out: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, spec: &mut ExperimentSpec) {
        if let Some(seed) = self.seed {
            spec.train.seed = seed;
        }
        if self.sequential {
            spec.train.parallel = false;
        }
        if let Some(out) = &self.out {
            spec.output_dir = out.clone();
        }
    }
}

pub fn load_spec(path: &Path, overrides: &Overrides) -> Result<ExperimentSpec, PrepoError> {
    let mut spec = ExperimentSpec::load(path)?;
    overrides.apply(&mut spec);
    spec.validate_shape()?;
    Ok(spec)
}

pub fn cmd_train(spec_path: &Path, overrides: &Overrides) -> Result<TrainOutcome, PrepoError> {
    let spec = load_spec(spec_path, overrides)?;
    let (task, dataset) = spec.dataset.load()?;
    train(&spec, &task, &dataset, &spec.run_dir())
}

fn checkpoint_for(spec: &ExperimentSpec, checkpoint: &Path) -> Result<(Task, Vec<crate::taskgen::Prompt>, Policy), PrepoError> {
    let (task, dataset) = spec.dataset.load()?;
    let policy = Policy::load(checkpoint)?;
    if policy.layout().vocab != task.vocab.size() || policy.layout().pad_token != task.vocab.padding() {
        return Err(PrepoError::InvalidConfig(format!(
            "checkpoint vocabulary ({} tokens) does not match the dataset vocabulary ({} tokens)",
            policy.layout().vocab,
            task.vocab.size()
        )));
    }
    Ok((task, dataset, policy))
}

pub fn cmd_eval(spec_path: &Path, checkpoint: &Path, overrides: &Overrides) -> Result<EvalReport, PrepoError> {
    let spec = load_spec(spec_path, overrides)?;
    let (task, dataset, policy) = checkpoint_for(&spec, checkpoint)?;
    let n = spec.eval.n_prompts.unwrap_or(dataset.len()).min(dataset.len());
    evaluate(
        &policy,
        &task,
        &dataset[..n],
        spec.eval.k,
        spec.eval.temperature,
        spec.train.max_rollout_len,
        &spec.train.reward,
        spec.eval.seed,
        spec.train.parallel,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PplReport {
    pub spearman_rho: f64,
    pub p_value: f64,
    pub p_value_approximate: bool,
    pub n_prompts: usize,
    pub k: usize,
}

/// Writes `per_prompt.csv`, `buckets.csv` and `summary.json` into `out_dir`.
pub fn cmd_analyze_ppl(
    spec_path: &Path,
    checkpoint: &Path,
    k: usize,
    out_dir: &Path,
    overrides: &Overrides,
) -> Result<PplReport, PrepoError> {
    let spec = load_spec(spec_path, overrides)?;
    let (task, dataset, policy) = checkpoint_for(&spec, checkpoint)?;
    let (corr, rows) = ppl_passrate_correlation(
        &policy,
        &task,
        &dataset,
        k,
        spec.eval.temperature,
        spec.train.max_rollout_len,
        &spec.train.reward,
        spec.eval.seed,
        spec.train.parallel,
    )?;
    fs::create_dir_all(out_dir)?;
    let mut csv = String::from("id,difficulty,ppl,passrate\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{},{}", r.id, r.difficulty, r.ppl, r.passrate);
    }
    fs::write(out_dir.join("per_prompt.csv"), csv)?;

    // Ten equal-count buckets by ascending perplexity.
    let mut sorted = rows.clone();
    sorted.sort_by(|a, b| a.ppl.total_cmp(&b.ppl).then(a.id.cmp(&b.id)));
    let n_buckets = 10.min(sorted.len());
    let mut buckets = String::from("bucket,count,ppl_min,ppl_max,ppl_mean,passrate_mean\n");
    for b in 0..n_buckets {
        let lo = b * sorted.len() / n_buckets;
        let hi = (b + 1) * sorted.len() / n_buckets;
        let slice = &sorted[lo..hi];
        let m = slice.len() as f64;
        let _ = writeln!(
            buckets,
            "{b},{},{},{},{},{}",
            slice.len(),
            slice[0].ppl,
            slice[slice.len() - 1].ppl,
            slice.iter().map(|r| r.ppl).sum::<f64>() / m,
            slice.iter().map(|r| r.passrate).sum::<f64>() / m
        );
    }
    fs::write(out_dir.join("buckets.csv"), buckets)?;

    let report = PplReport {
        spearman_rho: corr.rho,
        p_value: corr.p_value,
        p_value_approximate: true,
        n_prompts: rows.len(),
        k,
    };
    fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BudgetAxis {
    Rollouts,
    Step,
}

impl std::str::FromStr for BudgetAxis {
    type Err = PrepoError;

    fn from_str(s: &str) -> Result<Self, PrepoError> {
        match s {
            "rollouts" => Ok(BudgetAxis::Rollouts),
            "step" => Ok(BudgetAxis::Step),
            other => Err(PrepoError::Parse {
                context: "budget axis".into(),
                message: format!("expected rollouts or step, got {other:?}"),
            }),
        }
    }
}

pub const MISSING: &str = "NA";
pub const NOT_REACHED: &str = "not_reached";

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub runs: Vec<String>,
    pub budgets: Vec<u64>,
    /// `values[row][run]`; `None` where a run has no record at that budget.
    pub values: Vec<Vec<Option<f64>>>,
    /// First budget at which each run's metric reached the threshold.
    pub reached: Vec<Option<u64>>,
}

fn metric_value(m: &StepMetrics, metric: &str) -> Result<Option<f64>, PrepoError> {
    let v = serde_json::to_value(m)?;
    match v.get(metric) {
        None => Err(PrepoError::InvalidConfig(format!("unknown metric {metric:?}"))),
        Some(x) => Ok(x.as_f64()),
    }
}

fn budget_of(m: &StepMetrics, axis: BudgetAxis) -> u64 {
    match axis {
        BudgetAxis::Rollouts => m.rollout_count_cumulative,
        BudgetAxis::Step => m.step as u64,
    }
}

pub fn compare_runs(
    runs: &[(String, Vec<StepMetrics>)],
    metric: &str,
    axis: BudgetAxis,
    threshold: Option<f64>,
) -> Result<Comparison, PrepoError> {
    if runs.len() < 2 {
        return Err(PrepoError::InvalidConfig("compare needs at least two runs".into()));
    }
    let mut budgets: Vec<u64> = runs
        .iter()
        .flat_map(|(_, ms)| ms.iter().map(|m| budget_of(m, axis)))
        .collect();
    budgets.sort_unstable();
    budgets.dedup();
    let mut values = vec![vec![None; runs.len()]; budgets.len()];
    let mut reached = vec![None; runs.len()];
    for (col, (_, ms)) in runs.iter().enumerate() {
        for m in ms {
            let b = budget_of(m, axis);
            let row = budgets.binary_search(&b).expect("budget collected");
            let v = metric_value(m, metric)?;
            values[row][col] = v;
            if let (Some(t), Some(v), None) = (threshold, v, reached[col]) {
                if v >= t {
                    reached[col] = Some(b);
                }
            }
        }
    }
    Ok(Comparison {
        runs: runs.iter().map(|r| r.0.clone()).collect(),
        budgets,
        values,
        reached,
    })
}

impl Comparison {
    pub fn table_csv(&self, axis: BudgetAxis) -> String {
        let mut out = String::new();
        let axis_name = match axis {
            BudgetAxis::Rollouts => "rollouts",
            BudgetAxis::Step => "step",
        };
        let _ = writeln!(out, "{axis_name},{}", self.runs.join(","));
        for (b, row) in self.budgets.iter().zip(&self.values) {
            let cells: Vec<String> = row
                .iter()
                .map(|v| v.map(|x| x.to_string()).unwrap_or_else(|| MISSING.into()))
                .collect();
            let _ = writeln!(out, "{b},{}", cells.join(","));
        }
        out
    }

    pub fn thresholds_csv(&self, threshold: f64) -> String {
        let mut out = String::from("run,threshold,budget_to_threshold\n");
        for (run, r) in self.runs.iter().zip(&self.reached) {
            let cell = r.map(|b| b.to_string()).unwrap_or_else(|| NOT_REACHED.into());
            let _ = writeln!(out, "{run},{threshold},{cell}");
        }
        out
    }
}

pub fn cmd_compare(
    run_dirs: &[PathBuf],
    metric: &str,
    axis: BudgetAxis,
    threshold: Option<f64>,
    out_dir: Option<&Path>,
) -> Result<String, PrepoError> {
    let runs = run_dirs
        .iter()
        .map(|d| {
            let name = d
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| d.display().to_string());
            Ok((name, read_metrics(d)?))
        })
        .collect::<Result<Vec<_>, PrepoError>>()?;
    let cmp = compare_runs(&runs, metric, axis, threshold)?;
    let table = cmp.table_csv(axis);
    let thresholds = threshold.map(|t| cmp.thresholds_csv(t));
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("comparison.csv"), &table)?;
        if let Some(t) = &thresholds {
            fs::write(dir.join("thresholds.csv"), t)?;
        }
    }
    let mut text = table;
    if let Some(t) = thresholds {
        text.push('\n');
        text.push_str(&t);
    }
    Ok(text)
}

pub fn cmd_dataset(spec_path: &Path, out_file: &Path, overrides: &Overrides) -> Result<usize, PrepoError> {
    let spec = load_spec(spec_path, overrides)?;
    let (_, dataset) = spec.dataset.load()?;
    if let Some(parent) = out_file.parent() {
        fs::create_dir_all(parent)?;
    }
    write_dataset(fs::File::create(out_file)?, &dataset)?;
    Ok(dataset.len())
}

/// Golden rollout fixture: fixed task, policy and seeds.
pub mod golden {
    use super::*;
    use crate::policy::PolicyLayout;

    pub const DATASET_SEED: u64 = 7;
    pub const POLICY_SEED: u64 = 42;
    pub const SAMPLE_SEED: u64 = 1234;
    pub const N_PROMPTS: usize = 3;
    pub const SAMPLES: usize = 4;

    #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
    pub struct Fixture {
        pub dataset_seed: u64,
        pub policy_seed: u64,
        pub sample_seed: u64,
        pub rollouts: Vec<Rollout>,
    }

    pub fn build() -> Result<Fixture, PrepoError> {
        let task = Task::new(5, 16)?;
        let prompts = task.generate_dataset(DATASET_SEED, N_PROMPTS, (2, 3))?;
        let policy = Policy::init(PolicyLayout::for_vocab(&task.vocab), POLICY_SEED, 2.0)?;
        let snapshot = policy.snapshot();
        let mut rollouts = Vec::new();
        for p in &prompts {
            for s in 0..SAMPLES {
                let mut rng = Stream::tagged(SAMPLE_SEED, &[p.id as u64, s as u64]);
                rollouts.push(snapshot.sample_rollout(p, task.vocab.terminator(), 1.0, 8, &mut rng)?);
            }
        }
        Ok(Fixture {
            dataset_seed: DATASET_SEED,
            policy_seed: POLICY_SEED,
            sample_seed: SAMPLE_SEED,
            rollouts,
        })
    }

    /// Writes the fixture; refuses to overwrite an existing file unless `force`.
    pub fn write(path: &Path, force: bool) -> Result<Fixture, PrepoError> {
        if path.exists() && !force {
            return Err(PrepoError::InvalidConfig(format!(
                "{} exists; pass --force to regenerate",
                path.display()
            )));
        }
        let fixture = build()?;
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, serde_json::to_string_pretty(&fixture)? + "\n")?;
        Ok(fixture)
    }
}
