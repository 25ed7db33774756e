//! Experiment driver: builds instance ensembles, sweeps training sizes,
//! applies the 80/20 + 1%-validation protocol, and aggregates per-size
//! success rates the way PUF attack studies tabulate them (only
//! successful attacks count toward the average accuracy).

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::crp::{ChallengeBatch, CrpSet};
use crate::error::{Error, Result};
use crate::lr::{self, LrTrainConfig};
use crate::nn::{self, NnTrainConfig};
use crate::puf::CdcXorPuf;

/// Instance success rate at which a sweep size counts as breaking the
/// configuration and the sweep stops.
pub const BREAK_SUCCESS_RATE: f64 = 0.9;

/// Randomized restarts per LR run. The product-logit landscape has a
/// saddle at init that patience-5 early stopping often quits on; trials
/// are cheap and are accepted on validation accuracy alone.
pub const LR_TRIALS: u64 = 20;

/// After a trial is accepted, the model is refined at base rate divided
/// by this factor to ride the noisy descent tail to its floor.
pub const LR_REFINE_RATE_DIVISOR: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PufType {
    /// One challenge broadcast to all components.
    Xor,
    /// Per-component challenges.
    Cdc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Lr,
    Nn,
}

impl fmt::Display for PufType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PufType::Xor => "xor",
            PufType::Cdc => "cdc",
        })
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackKind::Lr => "lr",
            AttackKind::Nn => "nn",
        })
    }
}

impl FromStr for PufType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "xor" => Ok(PufType::Xor),
            "cdc" => Ok(PufType::Cdc),
            other => Err(Error::Config(format!("unknown puf type \"{other}\""))),
        }
    }
}

impl FromStr for AttackKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lr" => Ok(AttackKind::Lr),
            "nn" => Ok(AttackKind::Nn),
            other => Err(Error::Config(format!("unknown attack \"{other}\""))),
        }
    }
}

/// One experiment: an ensemble of simulated instances attacked across an
/// ascending grid of training sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub puf_type: PufType,
    pub n: usize,
    pub k: usize,
    pub instance_count: usize,
    pub attack: AttackKind,
    /// Strictly ascending training sizes.
    pub training_sizes: Vec<u64>,
    /// An instance counts as broken when its test accuracy exceeds this.
    pub success_threshold: f64,
    pub max_crp_budget: u64,
    pub wall_clock_budget_secs: u64,
    pub master_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            puf_type: PufType::Cdc,
            n: 64,
            k: 3,
            instance_count: 10,
            attack: AttackKind::Lr,
            // geometric x2 grid from 1k; the sweep stops at success or budget
            training_sizes: (0..11).map(|i| 1_000u64 << i).collect(),
            success_threshold: 0.90,
            max_crp_budget: 100_000_000,
            wall_clock_budget_secs: 3_600,
            master_seed: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.k == 0 {
            return Err(Error::Config("n and k must be >= 1".into()));
        }
        if self.instance_count == 0 {
            return Err(Error::Config("instance count must be >= 1".into()));
        }
        if self.training_sizes.is_empty()
            || self.training_sizes.windows(2).any(|w| w[1] <= w[0])
            || self.training_sizes[0] == 0
        {
            return Err(Error::Config(
                "training sizes must be nonempty, positive, strictly ascending".into(),
            ));
        }
        if !(self.success_threshold > 0.5 && self.success_threshold <= 1.0) {
            return Err(Error::Config("success threshold must be in (0.5, 1]".into()));
        }
        Ok(())
    }

    /// Parses the flat `key = value` config format (`#` starts a comment).
    pub fn from_key_values(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", line_no + 1))
            })?;
            config.set(key.trim(), value.trim())?;
        }
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_key_values(&text)
    }

    /// Sets one field from its config-file key; CLI overrides reuse this.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str, v: &str| Error::Config(format!("bad {what} value \"{v}\""));
        match key {
            "puf_type" => self.puf_type = value.parse()?,
            "n" => self.n = value.parse().map_err(|_| bad("n", value))?,
            "k" => self.k = value.parse().map_err(|_| bad("k", value))?,
            "instance_count" => {
                self.instance_count = value.parse().map_err(|_| bad("instance_count", value))?
            }
            "attack" => self.attack = value.parse()?,
            "training_sizes" => {
                self.training_sizes = value
                    .split(',')
                    .map(|v| parse_size(v.trim()))
                    .collect::<Result<Vec<_>>>()?;
            }
            "success_threshold" => {
                self.success_threshold =
                    value.parse().map_err(|_| bad("success_threshold", value))?
            }
            "max_crp_budget" => self.max_crp_budget = parse_size(value)?,
            "wall_clock_budget_secs" => {
                self.wall_clock_budget_secs =
                    value.parse().map_err(|_| bad("wall_clock_budget_secs", value))?
            }
            "master_seed" => {
                self.master_seed = value.parse().map_err(|_| bad("master_seed", value))?
            }
            other => return Err(Error::Config(format!("unknown config key \"{other}\""))),
        }
        Ok(())
    }
}

/// Accepts plain integers plus k/m suffixes (1k = 1000, 2.5m = 2500000).
pub fn parse_size(value: &str) -> Result<u64> {
    let v = value.trim().to_ascii_lowercase();
    let (digits, factor) = match v.strip_suffix(['k', 'm']) {
        Some(rest) if v.ends_with('k') => (rest, 1_000f64),
        Some(rest) => (rest, 1_000_000f64),
        None => (v.as_str(), 1f64),
    };
    let num: f64 = digits
        .parse()
        .map_err(|_| Error::Config(format!("bad size \"{value}\"")))?;
    let result = num * factor;
    if !(result.is_finite() && result >= 0.0 && result.fract() == 0.0) {
        return Err(Error::Config(format!("bad size \"{value}\"")));
    }
    Ok(result as u64)
}

/// Seeds derived for one run; recorded so any run can be reproduced in
/// isolation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub master: u64,
    pub instance: u64,
    pub challenges: u64,
    pub split: u64,
    pub init: u64,
    pub shuffle: u64,
}

/// Per-run record: the unit of the results log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub puf_type: PufType,
    pub n: usize,
    pub k: usize,
    pub attack: AttackKind,
    pub instance_id: u32,
    pub training_size: u64,
    /// Held-out accuracy; absent when the run did not converge.
    pub test_accuracy: Option<f64>,
    pub converged: bool,
    pub epochs: usize,
    pub wall_time_secs: f64,
    pub seeds: RunSeeds,
}

/// Summary row for one training size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeSummary {
    pub training_size: u64,
    pub runs: usize,
    /// Fraction of instances whose test accuracy beat the threshold.
    pub success_rate: f64,
    /// Mean accuracy over successful runs only; absent when none succeeded.
    pub average_accuracy: Option<f64>,
    pub median_wall_time_secs: f64,
}

/// Aggregated sweep outcome for one (pufType, n, k, attack).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub puf_type: PufType,
    pub n: usize,
    pub k: usize,
    pub attack: AttackKind,
    pub success_threshold: f64,
    pub rows: Vec<SizeSummary>,
    /// Smallest size whose success rate reached [`BREAK_SUCCESS_RATE`];
    /// absent when the configuration was not broken.
    pub minimal_breaking_size: Option<u64>,
}

/// splitmix64 finalizer; the fixed mixing primitive behind seed
/// derivation.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Folds the parts into the master seed one mixing round at a time, so
/// adding grid sizes never perturbs other runs' seeds.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    let mut state = mix64(master ^ 0x9e37_79b9_7f4a_7c15);
    for &p in parts {
        state = mix64(state ^ p.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1));
    }
    state
}

const TAG_INSTANCE: u64 = 1;
const TAG_CHALLENGES: u64 = 2;
const TAG_SPLIT: u64 = 3;
const TAG_INIT: u64 = 4;
const TAG_SHUFFLE: u64 = 5;

fn attack_tag(attack: AttackKind) -> u64 {
    match attack {
        AttackKind::Lr => 1,
        AttackKind::Nn => 2,
    }
}

/// Seeds for one (instance, size, attack) run. Instance weights and the
/// challenge stream depend only on the instance id, so larger training
/// sizes extend the same stream.
pub fn derive_run_seeds(
    master: u64,
    instance_id: u32,
    training_size: u64,
    attack: AttackKind,
) -> RunSeeds {
    let id = instance_id as u64;
    let tag = attack_tag(attack);
    RunSeeds {
        master,
        instance: derive_seed(master, &[TAG_INSTANCE, id]),
        challenges: derive_seed(master, &[TAG_CHALLENGES, id]),
        split: derive_seed(master, &[TAG_SPLIT, id, training_size, tag]),
        init: derive_seed(master, &[TAG_INIT, id, training_size, tag]),
        shuffle: derive_seed(master, &[TAG_SHUFFLE, id, training_size, tag]),
    }
}

/// CRPs a run consumes: the training size plus the held-out 20% share
/// (total · 0.8 = training size, so the test share is a quarter of it).
pub fn crps_required(training_size: u64) -> u64 {
    training_size + training_size.div_ceil(4)
}

/// Whether an accuracy counts as a successful attack: strictly above the
/// threshold, with perfect prediction always counting.
pub fn is_success(accuracy: f64, threshold: f64) -> bool {
    accuracy > threshold || accuracy >= 1.0
}

/// Result of the restarted LR attack; `model` is absent only when every
/// trial diverged.
#[derive(Debug, Clone)]
pub struct LrAttackOutcome {
    pub model: Option<lr::LrModel>,
    pub trials: u64,
    pub epochs: usize,
    pub wall_time: Duration,
}

/// The full LR attack procedure. Trial stage: up to [`LR_TRIALS`]
/// restarts under the base schedule, accepted as soon as validation
/// accuracy clears the threshold; otherwise the best-validation trial is
/// kept. Refine stage: the selected model resumes training at the base
/// rate divided by [`LR_REFINE_RATE_DIVISOR`], which rides the noisy
/// descent tail to its floor. Selection never sees test data.
pub fn lr_attack_with_restarts(
    train_set: &CrpSet,
    val_set: &CrpSet,
    init_seed: u64,
    shuffle_seed: u64,
    success_threshold: f64,
    budget: Duration,
) -> Result<LrAttackOutcome> {
    let start = Instant::now();
    let mut epochs = 0usize;
    let mut trials = 0u64;
    let mut best: Option<(f64, lr::LrModel)> = None;
    for trial in 0..LR_TRIALS {
        trials = trial + 1;
        let mut train_config = LrTrainConfig::new(
            derive_seed(init_seed, &[trial]),
            derive_seed(shuffle_seed, &[trial]),
        );
        train_config.wall_clock_budget = Some(budget.saturating_sub(start.elapsed()));
        match lr::train(train_set, val_set, &train_config) {
            Ok((model, train_report)) => {
                epochs += train_report.epochs;
                let val_acc = train_report.final_val_accuracy;
                if best.as_ref().is_none_or(|(b, _)| val_acc > *b) {
                    best = Some((val_acc, model));
                }
                if is_success(val_acc, success_threshold) {
                    break;
                }
            }
            Err(lr::TrainError::Diverged {
                report: train_report,
                ..
            }) => {
                epochs += train_report.epochs;
            }
            Err(lr::TrainError::Invalid(e)) => return Err(e),
        }
        if start.elapsed() >= budget {
            break;
        }
    }
    let Some((_, model)) = best else {
        return Ok(LrAttackOutcome {
            model: None,
            trials,
            epochs,
            wall_time: start.elapsed(),
        });
    };
    let mut refine_config = LrTrainConfig::new(
        derive_seed(init_seed, &[u64::MAX]),
        derive_seed(shuffle_seed, &[u64::MAX]),
    );
    refine_config.base_learning_rate /= LR_REFINE_RATE_DIVISOR;
    refine_config.wall_clock_budget = Some(budget.saturating_sub(start.elapsed()));
    let model = match lr::train_from(model.clone(), train_set, val_set, &refine_config) {
        Ok((refined, refine_report)) => {
            epochs += refine_report.epochs;
            refined
        }
        // divergence during refinement falls back to the trial model
        Err(lr::TrainError::Diverged { .. }) => model,
        Err(lr::TrainError::Invalid(e)) => return Err(e),
    };
    Ok(LrAttackOutcome {
        model: Some(model),
        trials,
        epochs,
        wall_time: start.elapsed(),
    })
}

/// One (instance, training size) run under the experiment protocol:
/// generate the instance and its challenge stream from derived seeds,
/// build CRPs, split 80/20 with 1% of the training portion for
/// validation, train, and score on the held-out test part. Test data
/// never influences training or stopping.
pub fn run_attack_once(
    config: &ExperimentConfig,
    instance_id: u32,
    training_size: u64,
) -> Result<AttackReport> {
    if training_size == 0 {
        return Err(Error::invalid("training size must be >= 1"));
    }
    let needed = crps_required(training_size);
    if needed > config.max_crp_budget {
        return Err(Error::Budget(format!(
            "run needs {needed} CRPs but the budget is {}",
            config.max_crp_budget
        )));
    }
    let seeds = derive_run_seeds(config.master_seed, instance_id, training_size, config.attack);
    let puf = CdcXorPuf::sample(config.n, config.k, seeds.instance, 0.0)?;
    let batch = match config.puf_type {
        PufType::Cdc => ChallengeBatch::uniform(config.n, config.k, needed, seeds.challenges)?,
        PufType::Xor => {
            ChallengeBatch::uniform_broadcast(config.n, config.k, needed, seeds.challenges)?
        }
    };
    let crps = CrpSet::build(&puf, &batch)?;
    let (train_set, val_set, test_set) = crps.split(0.8, 0.01, seeds.split)?;
    let budget = Duration::from_secs(config.wall_clock_budget_secs);

    let report = |test_accuracy: Option<f64>, converged: bool, epochs: usize, wall: f64| {
        AttackReport {
            puf_type: config.puf_type,
            n: config.n,
            k: config.k,
            attack: config.attack,
            instance_id,
            training_size,
            test_accuracy,
            converged,
            epochs,
            wall_time_secs: wall,
            seeds,
        }
    };

    match config.attack {
        AttackKind::Lr => {
            let outcome = lr_attack_with_restarts(
                &train_set,
                &val_set,
                seeds.init,
                seeds.shuffle,
                config.success_threshold,
                budget,
            )?;
            match outcome.model {
                Some(model) => {
                    let accuracy = model.accuracy(&test_set)?;
                    Ok(report(
                        Some(accuracy),
                        true,
                        outcome.epochs,
                        outcome.wall_time.as_secs_f64(),
                    ))
                }
                None => Ok(report(
                    None,
                    false,
                    outcome.epochs,
                    outcome.wall_time.as_secs_f64(),
                )),
            }
        }
        AttackKind::Nn => {
            let mut train_config = NnTrainConfig::new(seeds.init, seeds.shuffle);
            train_config.wall_clock_budget = Some(budget);
            let (model, train_report) = nn::train(&train_set, &val_set, &train_config)?;
            if train_report.converged() {
                let accuracy = model.accuracy(&test_set)?;
                Ok(report(
                    Some(accuracy),
                    true,
                    train_report.epochs,
                    train_report.wall_time.as_secs_f64(),
                ))
            } else {
                Ok(report(
                    None,
                    false,
                    train_report.epochs,
                    train_report.wall_time.as_secs_f64(),
                ))
            }
        }
    }
}

/// Runs the full grid: every instance at each size in ascending order,
/// stopping after the first size whose success rate reaches
/// [`BREAK_SUCCESS_RATE`]. Sizes beyond the CRP budget are not run; a
/// sweep that exhausts its grid or budget without a breaking size leaves
/// `minimal_breaking_size` empty.
pub fn run_sweep(config: &ExperimentConfig) -> Result<(SweepSummary, Vec<AttackReport>)> {
    config.validate()?;
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    let mut minimal_breaking_size = None;
    for &size in &config.training_sizes {
        if crps_required(size) > config.max_crp_budget {
            break;
        }
        let mut size_reports = Vec::with_capacity(config.instance_count);
        for instance_id in 0..config.instance_count as u32 {
            size_reports.push(run_attack_once(config, instance_id, size)?);
        }
        let row = summarize_size(&size_reports, size, config.success_threshold);
        let success_rate = row.success_rate;
        rows.push(row);
        reports.extend(size_reports);
        if success_rate >= BREAK_SUCCESS_RATE {
            minimal_breaking_size = Some(size);
            break;
        }
    }
    Ok((
        SweepSummary {
            puf_type: config.puf_type,
            n: config.n,
            k: config.k,
            attack: config.attack,
            success_threshold: config.success_threshold,
            rows,
            minimal_breaking_size,
        },
        reports,
    ))
}

fn summarize_size(reports: &[AttackReport], size: u64, threshold: f64) -> SizeSummary {
    let successes: Vec<f64> = reports
        .iter()
        .filter_map(|r| r.test_accuracy)
        .filter(|&a| is_success(a, threshold))
        .collect();
    let average_accuracy = if successes.is_empty() {
        None
    } else {
        Some(successes.iter().sum::<f64>() / successes.len() as f64)
    };
    let mut walls: Vec<f64> = reports.iter().map(|r| r.wall_time_secs).collect();
    walls.sort_by(|a, b| a.total_cmp(b));
    let median_wall_time_secs = if walls.is_empty() {
        0.0
    } else if walls.len() % 2 == 1 {
        walls[walls.len() / 2]
    } else {
        (walls[walls.len() / 2 - 1] + walls[walls.len() / 2]) / 2.0
    };
    SizeSummary {
        training_size: size,
        runs: reports.len(),
        success_rate: successes.len() as f64 / reports.len().max(1) as f64,
        average_accuracy,
        median_wall_time_secs,
    }
}

/// Rebuilds per-configuration summaries from stored run records, grouping
/// by (pufType, n, k, attack) and ordering sizes ascending.
pub fn summarize_reports(reports: &[AttackReport], threshold: f64) -> Vec<SweepSummary> {
    let mut groups: BTreeMap<(PufType, usize, usize, AttackKind), BTreeMap<u64, Vec<&AttackReport>>> =
        BTreeMap::new();
    for r in reports {
        groups
            .entry((r.puf_type, r.n, r.k, r.attack))
            .or_default()
            .entry(r.training_size)
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((puf_type, n, k, attack), sizes)| {
            let rows: Vec<SizeSummary> = sizes
                .iter()
                .map(|(&size, rs)| {
                    let owned: Vec<AttackReport> = rs.iter().map(|&r| r.clone()).collect();
                    summarize_size(&owned, size, threshold)
                })
                .collect();
            let minimal_breaking_size = rows
                .iter()
                .find(|row| row.success_rate >= BREAK_SUCCESS_RATE)
                .map(|row| row.training_size);
            SweepSummary {
                puf_type,
                n,
                k,
                attack,
                success_threshold: threshold,
                rows,
                minimal_breaking_size,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Csv,
    JsonLines,
}

impl FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "table" => Ok(ReportFormat::Table),
            "csv" => Ok(ReportFormat::Csv),
            "json-lines" | "jsonl" => Ok(ReportFormat::JsonLines),
            other => Err(Error::Config(format!("unknown report format \"{other}\""))),
        }
    }
}

fn format_percent(fraction: f64) -> String {
    let pct = fraction * 100.0;
    if (pct - pct.round()).abs() < 1e-9 {
        format!("{:.0}%", pct.round())
    } else {
        format!("{pct:.1}%")
    }
}

/// Renders summaries with the columns pufType, n, k, attack, trainingSize,
/// averageAccuracy, successRate, medianWallTime, in deterministic order.
pub fn emit_report(summaries: &[SweepSummary], format: ReportFormat) -> String {
    let mut rows: Vec<(&SweepSummary, &SizeSummary)> = summaries
        .iter()
        .flat_map(|s| s.rows.iter().map(move |row| (s, row)))
        .collect();
    rows.sort_by(|(a, ra), (b, rb)| {
        (a.puf_type, a.n, a.k, a.attack, ra.training_size)
            .cmp(&(b.puf_type, b.n, b.k, b.attack, rb.training_size))
    });

    let mut out = String::new();
    match format {
        ReportFormat::Table => {
            out.push_str(&format!(
                "{:<8} {:>5} {:>3} {:<7} {:>13} {:>17} {:>12} {:>15}\n",
                "pufType",
                "n",
                "k",
                "attack",
                "trainingSize",
                "averageAccuracy",
                "successRate",
                "medianWallTime"
            ));
            for (s, row) in &rows {
                let accuracy = row
                    .average_accuracy
                    .map(format_percent)
                    .unwrap_or_else(|| "No convergence".into());
                out.push_str(&format!(
                    "{:<8} {:>5} {:>3} {:<7} {:>13} {:>17} {:>12} {:>15}\n",
                    s.puf_type.to_string(),
                    s.n,
                    s.k,
                    s.attack.to_string(),
                    row.training_size,
                    accuracy,
                    format_percent(row.success_rate),
                    format!("{:.1} s", row.median_wall_time_secs),
                ));
            }
            for s in summaries {
                if let Some(size) = s.minimal_breaking_size {
                    out.push_str(&format!(
                        "# {} n={} k={} {}: minimal breaking size {}\n",
                        s.puf_type, s.n, s.k, s.attack, size
                    ));
                }
            }
        }
        ReportFormat::Csv => {
            out.push_str(
                "pufType,n,k,attack,trainingSize,averageAccuracy,successRate,medianWallTime\n",
            );
            for (s, row) in &rows {
                let accuracy = row
                    .average_accuracy
                    .map(|a| format!("{a:.6}"))
                    .unwrap_or_default();
                out.push_str(&format!(
                    "{},{},{},{},{},{},{:.6},{:.3}\n",
                    s.puf_type,
                    s.n,
                    s.k,
                    s.attack,
                    row.training_size,
                    accuracy,
                    row.success_rate,
                    row.median_wall_time_secs,
                ));
            }
        }
        ReportFormat::JsonLines => {
            for (s, row) in &rows {
                let value = serde_json::json!({
                    "pufType": s.puf_type,
                    "n": s.n,
                    "k": s.k,
                    "attack": s.attack,
                    "trainingSize": row.training_size,
                    "averageAccuracy": row.average_accuracy,
                    "successRate": row.success_rate,
                    "medianWallTime": row.median_wall_time_secs,
                });
                out.push_str(&value.to_string());
                out.push('\n');
            }
        }
    }
    out
}

/// Appends run records to a line-delimited JSON log.
pub fn write_reports_jsonl<W: Write>(mut w: W, reports: &[AttackReport]) -> Result<()> {
    for r in reports {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::Config(format!("serialize report: {e}")))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn save_reports_jsonl(path: impl AsRef<Path>, reports: &[AttackReport]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_reports_jsonl(&mut w, reports)?;
    w.flush()?;
    Ok(())
}

pub fn load_reports_jsonl(path: impl AsRef<Path>) -> Result<Vec<AttackReport>> {
    let reader = BufReader::new(File::open(path)?);
    let mut reports = Vec::new();
    for (line_no, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let report: AttackReport = serde_json::from_str(&line)
            .map_err(|e| Error::Config(format!("log line {}: {e}", line_no + 1)))?;
        reports.push(report);
    }
    Ok(reports)
}

/// The deterministic portion of a run log: identical master seeds yield
/// byte-identical transcripts. Wall-clock fields are zeroed because they
/// are physically nondeterministic; everything else is model state.
pub fn canonical_transcript(reports: &[AttackReport]) -> String {
    let mut out = String::new();
    for r in reports {
        let mut canon = r.clone();
        canon.wall_time_secs = 0.0;
        out.push_str(&serde_json::to_string(&canon).expect("report serializes"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_derivation_is_deterministic_and_separated() {
        let a = derive_run_seeds(1, 0, 1000, AttackKind::Lr);
        let b = derive_run_seeds(1, 0, 1000, AttackKind::Lr);
        assert_eq!(a, b);
        let c = derive_run_seeds(1, 1, 1000, AttackKind::Lr);
        assert_ne!(a.instance, c.instance);
        assert_ne!(a.challenges, c.challenges);
        // same instance at a larger size keeps the same stream seeds
        let d = derive_run_seeds(1, 0, 2000, AttackKind::Lr);
        assert_eq!(a.instance, d.instance);
        assert_eq!(a.challenges, d.challenges);
        assert_ne!(a.split, d.split);
        // attack kind separates training seeds
        let e = derive_run_seeds(1, 0, 1000, AttackKind::Nn);
        assert_ne!(a.init, e.init);
        assert_eq!(a.instance, e.instance);
    }

    #[test]
    fn crp_requirement_is_a_quarter_extra() {
        assert_eq!(crps_required(6_000), 7_500);
        assert_eq!(crps_required(80_000), 100_000);
        assert_eq!(crps_required(10), 13);
    }

    #[test]
    fn success_predicate() {
        assert!(!is_success(0.90, 0.90)); // strictly greater
        assert!(is_success(0.9000001, 0.90));
        assert!(!is_success(0.40, 0.90));
        assert!(is_success(1.0, 1.0)); // perfect prediction always counts
        assert!(!is_success(0.999, 1.0));
    }

    #[test]
    fn aggregation_counts_only_successes() {
        let make = |id: u32, acc: f64| AttackReport {
            puf_type: PufType::Cdc,
            n: 8,
            k: 2,
            attack: AttackKind::Lr,
            instance_id: id,
            training_size: 100,
            test_accuracy: Some(acc),
            converged: true,
            epochs: 1,
            wall_time_secs: id as f64,
            seeds: derive_run_seeds(0, id, 100, AttackKind::Lr),
        };
        let reports = vec![make(0, 0.96), make(1, 0.40), make(2, 0.97)];
        let row = summarize_size(&reports, 100, 0.90);
        assert!((row.success_rate - 2.0 / 3.0).abs() < 1e-12);
        assert!((row.average_accuracy.unwrap() - 0.965).abs() < 1e-12);
        assert_eq!(row.median_wall_time_secs, 1.0);
    }

    #[test]
    fn config_parsing_and_overrides() {
        let text = "\
# experiment
puf_type = cdc
n = 64
k = 3
instance_count = 10
attack = lr
training_sizes = 2k,4k,6k
success_threshold = 0.9
max_crp_budget = 1m
wall_clock_budget_secs = 60
master_seed = 7
";
        let mut config = ExperimentConfig::from_key_values(text).unwrap();
        assert_eq!(config.training_sizes, vec![2_000, 4_000, 6_000]);
        assert_eq!(config.max_crp_budget, 1_000_000);
        assert_eq!(config.master_seed, 7);
        config.set("attack", "nn").unwrap();
        assert_eq!(config.attack, AttackKind::Nn);
        assert!(config.set("bogus", "1").is_err());
        assert!(ExperimentConfig::from_key_values("training_sizes = 5,5").is_err()
            || {
                let c = ExperimentConfig::from_key_values("training_sizes = 5,5").unwrap();
                c.validate().is_err()
            });
    }

    #[test]
    fn size_parsing() {
        assert_eq!(parse_size("6000").unwrap(), 6_000);
        assert_eq!(parse_size("6k").unwrap(), 6_000);
        assert_eq!(parse_size("2.5m").unwrap(), 2_500_000);
        assert_eq!(parse_size("1.2M").unwrap(), 1_200_000);
        assert!(parse_size("1.2345k").is_err());
        assert!(parse_size("x").is_err());
    }

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            puf_type: PufType::Cdc,
            n: 8,
            k: 2,
            instance_count: 2,
            attack: AttackKind::Lr,
            training_sizes: vec![400],
            success_threshold: 0.75,
            max_crp_budget: 10_000,
            wall_clock_budget_secs: 120,
            master_seed: 5,
        }
    }

    #[test]
    fn single_run_is_deterministic_up_to_wall_time() {
        let config = tiny_config();
        let mut a = run_attack_once(&config, 0, 400).unwrap();
        let mut b = run_attack_once(&config, 0, 400).unwrap();
        a.wall_time_secs = 0.0;
        b.wall_time_secs = 0.0;
        assert_eq!(a, b);
        assert!(a.converged);
        assert!(a.test_accuracy.is_some());
    }

    #[test]
    fn budget_violations_error() {
        let mut config = tiny_config();
        config.max_crp_budget = 100;
        assert!(matches!(
            run_attack_once(&config, 0, 400),
            Err(Error::Budget(_))
        ));
    }

    #[test]
    fn sweep_runs_sizes_in_order_and_stops_at_success() {
        let mut config = tiny_config();
        config.training_sizes = vec![50, 400, 800];
        let (summary, reports) = run_sweep(&config).unwrap();
        // rows cover a prefix of the grid, in order
        let run_sizes: Vec<u64> = summary.rows.iter().map(|r| r.training_size).collect();
        assert!(config.training_sizes.starts_with(&run_sizes));
        if let Some(breaking) = summary.minimal_breaking_size {
            assert_eq!(breaking, *run_sizes.last().unwrap());
            // no earlier size was skipped
            for (i, &size) in run_sizes.iter().enumerate() {
                assert_eq!(size, config.training_sizes[i]);
            }
        }
        assert_eq!(
            reports.len(),
            summary.rows.iter().map(|r| r.runs).sum::<usize>()
        );
    }

    #[test]
    fn sweep_skips_sizes_beyond_budget() {
        let mut config = tiny_config();
        config.training_sizes = vec![400, 5_000_000];
        config.success_threshold = 0.999999; // force the sweep past size 400
        let (summary, _) = run_sweep(&config).unwrap();
        let run_sizes: Vec<u64> = summary.rows.iter().map(|r| r.training_size).collect();
        assert_eq!(run_sizes, vec![400]);
    }

    #[test]
    fn transcripts_are_reproducible() {
        let config = tiny_config();
        let (_, r1) = run_sweep(&config).unwrap();
        let (_, r2) = run_sweep(&config).unwrap();
        assert_eq!(canonical_transcript(&r1), canonical_transcript(&r2));
    }

    #[test]
    fn jsonl_roundtrip_and_summaries() {
        let config = tiny_config();
        let (summary, reports) = run_sweep(&config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        save_reports_jsonl(&path, &reports).unwrap();
        let loaded = load_reports_jsonl(&path).unwrap();
        assert_eq!(loaded, reports);
        let summaries = summarize_reports(&loaded, config.success_threshold);
        assert_eq!(summaries.len(), 1);
        assert_eq!(summaries[0].rows, summary.rows);
    }

    #[test]
    fn report_rendering() {
        assert_eq!(
            emit_report(&[], ReportFormat::Csv),
            "pufType,n,k,attack,trainingSize,averageAccuracy,successRate,medianWallTime\n"
        );
        let summary = SweepSummary {
            puf_type: PufType::Cdc,
            n: 64,
            k: 3,
            attack: AttackKind::Lr,
            success_threshold: 0.9,
            rows: vec![SizeSummary {
                training_size: 6000,
                runs: 10,
                success_rate: 0.9,
                average_accuracy: Some(0.9634),
                median_wall_time_secs: 10.25,
            }],
            minimal_breaking_size: Some(6000),
        };
        let table = emit_report(std::slice::from_ref(&summary), ReportFormat::Table);
        assert!(table.contains("90%"), "table output: {table}");
        assert!(table.contains("96.3%"));
        assert!(table.contains("minimal breaking size 6000"));

        let csv = emit_report(std::slice::from_ref(&summary), ReportFormat::Csv);
        let row = csv.lines().nth(1).unwrap();
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 8);
        assert_eq!(fields[0], "cdc");
        assert_eq!(fields[4], "6000");
        assert!((fields[6].parse::<f64>().unwrap() - 0.9).abs() < 1e-9);

        let jsonl = emit_report(std::slice::from_ref(&summary), ReportFormat::JsonLines);
        let value: serde_json::Value = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
        assert_eq!(value["trainingSize"], 6000);
        assert_eq!(value["pufType"], "cdc");

        // a no-convergence row renders without an accuracy
        let none = SweepSummary {
            rows: vec![SizeSummary {
                training_size: 100,
                runs: 2,
                success_rate: 0.0,
                average_accuracy: None,
                median_wall_time_secs: 1.0,
            }],
            minimal_breaking_size: None,
            ..summary
        };
        let table = emit_report(&[none], ReportFormat::Table);
        assert!(table.contains("No convergence"));
    }
}
