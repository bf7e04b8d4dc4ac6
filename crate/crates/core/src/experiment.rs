//! Seeded batch experiments and their JSON/CSV reports.
//!
//! Every trial derives its own seed from `(master_seed, trial_index)`, so the
//! report does not depend on how trials are scheduled across threads.

use std::fmt::Write as _;
use std::io::Write;
use std::path::PathBuf;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{GainError, Result};
use crate::kalman_update::{analytic_gain, FilterProblem, GainMatrix, ObservationOperator};
use crate::matrix_core::{random_spd, Matrix};
use crate::objectives::{evaluate, finite_difference_gradient, logdet_gradient, ObjectiveKind};
use crate::optimizer::{
    cross_objective_equivalence, stationarity_residual, EquivalenceReport, OptimizerConfig,
};

/// A trial passes when every minimizer lands this close (Frobenius) to the
/// closed-form gain.
pub const GAIN_DISTANCE_THRESHOLD: f64 = 1e-5;
/// Relative bound on `||K S - P^f H^T||_F / (1 + ||P^f H^T||_F)` at the closed-form gain.
pub const STATIONARITY_THRESHOLD: f64 = 1e-8;
/// Relative Frobenius agreement required between analytic and finite-difference gradients.
pub const GRADIENT_CHECK_THRESHOLD: f64 = 1e-5;

pub const CSV_HEADER: &str = "trial_index,seed_used,gain_distance_logdet,gain_distance_trace,\
gain_distance_entropy,stationarity_residual,iter_logdet,iter_trace,iter_entropy,converged_all";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OutputTarget {
    Stdout,
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub state_dim: usize,
    pub obs_dim: usize,
    pub trials: usize,
    pub master_seed: u64,
    pub cond_target: f64,
    pub grad_tol: f64,
    pub max_iters: usize,
    pub output_format: OutputFormat,
    #[serde(skip)]
    pub output_path: OutputTarget,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            state_dim: 4,
            obs_dim: 3,
            trials: 50,
            master_seed: 0,
            cond_target: 10.0,
            grad_tol: 1e-9,
            max_iters: 5000,
            output_format: OutputFormat::Json,
            output_path: OutputTarget::Stdout,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.obs_dim == 0 {
            return Err(GainError::InvalidParameter(
                "state and observation dimensions must be at least 1".into(),
            ));
        }
        if self.trials == 0 {
            return Err(GainError::InvalidParameter("trials must be at least 1".into()));
        }
        if !(self.cond_target >= 1.0) || !self.cond_target.is_finite() {
            return Err(GainError::InvalidParameter(format!(
                "cond must be a finite value >= 1, got {}",
                self.cond_target
            )));
        }
        self.optimizer_config().validate()
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            grad_tol: self.grad_tol,
            max_iters: self.max_iters,
            ..Default::default()
        }
    }
}

/// SplitMix64 finalizer.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of trial `index` under `master_seed`.
pub fn trial_seed(master_seed: u64, index: u64) -> u64 {
    splitmix64(master_seed ^ splitmix64(index))
}

/// Random problem: `P^f` and `R` from [`random_spd`], `H` standard Gaussian.
pub fn generate_problem(
    state_dim: usize,
    obs_dim: usize,
    seed: u64,
    cond_target: f64,
) -> Result<FilterProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prior_seed = rng.next_u64();
    let noise_seed = rng.next_u64();
    let h: Vec<f64> = (0..obs_dim * state_dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    FilterProblem::new(
        random_spd(state_dim, prior_seed, cond_target)?,
        ObservationOperator::new(Matrix::from_row_slice(obs_dim, state_dim, &h)?),
        random_spd(obs_dim, noise_seed, cond_target)?,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PerObjective<T> {
    pub trace: T,
    pub logdet: T,
    pub entropy: T,
}

impl<T: Copy> PerObjective<T> {
    fn from_fn(mut f: impl FnMut(ObjectiveKind) -> T) -> Self {
        Self {
            trace: f(ObjectiveKind::TotalVariance),
            logdet: f(ObjectiveKind::LogGeneralizedVariance),
            entropy: f(ObjectiveKind::DifferentialEntropy),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Passed,
    /// Ran to completion but missed a threshold.
    Failed,
    /// Aborted by a numerical error; replay with `seed_used`.
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRecord {
    pub trial_index: usize,
    pub seed_used: u64,
    pub status: TrialStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub gain_distance_logdet: Option<f64>,
    pub gain_distance_trace: Option<f64>,
    pub gain_distance_entropy: Option<f64>,
    /// At the closed-form gain.
    pub stationarity_residual: Option<f64>,
    pub objective_at_analytic: Option<PerObjective<f64>>,
    pub iterations: Option<PerObjective<usize>>,
    pub converged: Option<PerObjective<bool>>,
}

impl TrialRecord {
    fn failed(trial_index: usize, seed_used: u64, err: &GainError) -> Self {
        Self {
            trial_index,
            seed_used,
            status: TrialStatus::Error,
            error: Some(err.to_string()),
            gain_distance_logdet: None,
            gain_distance_trace: None,
            gain_distance_entropy: None,
            stationarity_residual: None,
            objective_at_analytic: None,
            iterations: None,
            converged: None,
        }
    }

    fn distances(&self) -> [Option<f64>; 3] {
        [
            self.gain_distance_logdet,
            self.gain_distance_trace,
            self.gain_distance_entropy,
        ]
    }

    pub fn max_gain_distance(&self) -> Option<f64> {
        self.distances()
            .into_iter()
            .try_fold(0.0f64, |acc, d| d.map(|d| acc.max(d)))
    }

    pub fn converged_all(&self) -> Option<bool> {
        self.converged.map(|c| c.trace && c.logdet && c.entropy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistanceStats {
    pub max: Option<f64>,
    pub mean: Option<f64>,
}

impl DistanceStats {
    fn of(values: impl Iterator<Item = f64>) -> Self {
        let (mut max, mut sum, mut count) = (f64::NEG_INFINITY, 0.0, 0usize);
        for v in values {
            max = max.max(v);
            sum += v;
            count += 1;
        }
        if count == 0 {
            Self {
                max: None,
                mean: None,
            }
        } else {
            Self {
                max: Some(max),
                mean: Some(sum / count as f64),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRecord {
    pub trials: usize,
    pub passed: usize,
    pub failed: usize,
    pub errors: usize,
    pub gain_distance_logdet: DistanceStats,
    pub gain_distance_trace: DistanceStats,
    pub gain_distance_entropy: DistanceStats,
    pub max_gain_distance: Option<f64>,
    pub max_stationarity_residual: Option<f64>,
    pub all_converged: usize,
}

impl SummaryRecord {
    pub fn from_trials(trials: &[TrialRecord]) -> Self {
        let count = |s: TrialStatus| trials.iter().filter(|t| t.status == s).count();
        let stats = |f: fn(&TrialRecord) -> Option<f64>| {
            DistanceStats::of(trials.iter().filter_map(f))
        };
        let max_of = |it: &mut dyn Iterator<Item = f64>| it.reduce(f64::max);
        Self {
            trials: trials.len(),
            passed: count(TrialStatus::Passed),
            failed: count(TrialStatus::Failed),
            errors: count(TrialStatus::Error),
            gain_distance_logdet: stats(|t| t.gain_distance_logdet),
            gain_distance_trace: stats(|t| t.gain_distance_trace),
            gain_distance_entropy: stats(|t| t.gain_distance_entropy),
            max_gain_distance: max_of(&mut trials.iter().filter_map(|t| t.max_gain_distance())),
            max_stationarity_residual: max_of(
                &mut trials.iter().filter_map(|t| t.stationarity_residual),
            ),
            all_converged: trials
                .iter()
                .filter(|t| t.converged_all() == Some(true))
                .count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub trials: Vec<TrialRecord>,
    pub summary: SummaryRecord,
}

impl ExperimentReport {
    pub fn all_passed(&self) -> bool {
        self.summary.passed == self.summary.trials
    }
}

/// One trial: builds the problem from `seed` and runs all three minimizations.
pub fn run_trial(
    config: &ExperimentConfig,
    seed: u64,
) -> Result<(FilterProblem, EquivalenceReport)> {
    let p = generate_problem(config.state_dim, config.obs_dim, seed, config.cond_target)?;
    let eq = cross_objective_equivalence(&p, &config.optimizer_config())?;
    Ok((p, eq))
}

fn trial_record(config: &ExperimentConfig, trial_index: usize) -> TrialRecord {
    let seed = trial_seed(config.master_seed, trial_index as u64);
    let outcome = run_trial(config, seed).and_then(|(p, eq)| {
        let k_star = &eq.analytic_gain;
        let residual = stationarity_residual(&p, k_star)?;
        let objective = PerObjective {
            trace: evaluate(ObjectiveKind::TotalVariance, &p, k_star)?,
            logdet: evaluate(ObjectiveKind::LogGeneralizedVariance, &p, k_star)?,
            entropy: evaluate(ObjectiveKind::DifferentialEntropy, &p, k_star)?,
        };
        let scale = 1.0 + p.cross_covariance().frobenius_norm();
        let passed = eq.max_distance_to_analytic() <= GAIN_DISTANCE_THRESHOLD
            && residual <= STATIONARITY_THRESHOLD * scale;
        Ok(TrialRecord {
            trial_index,
            seed_used: seed,
            status: if passed {
                TrialStatus::Passed
            } else {
                TrialStatus::Failed
            },
            error: None,
            gain_distance_logdet: Some(eq.distance_to_analytic(ObjectiveKind::LogGeneralizedVariance)),
            gain_distance_trace: Some(eq.distance_to_analytic(ObjectiveKind::TotalVariance)),
            gain_distance_entropy: Some(eq.distance_to_analytic(ObjectiveKind::DifferentialEntropy)),
            stationarity_residual: Some(residual),
            objective_at_analytic: Some(objective),
            iterations: Some(PerObjective::from_fn(|k| eq.run(k).iterations)),
            converged: Some(PerObjective::from_fn(|k| eq.run(k).converged)),
        })
    });
    outcome.unwrap_or_else(|e| TrialRecord::failed(trial_index, seed, &e))
}

/// Runs every trial (in parallel on the current rayon pool) and returns them in
/// index order with a summary.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let trials: Vec<TrialRecord> = (0..config.trials)
        .into_par_iter()
        .map(|i| trial_record(config, i))
        .collect();
    let summary = SummaryRecord::from_trials(&trials);
    Ok(ExperimentReport {
        config: config.clone(),
        trials,
        summary,
    })
}

fn fmt_float(v: f64) -> String {
    ryu::Buffer::new().format(v).to_string()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_float).unwrap_or_default()
}

/// Renders the report as text in the given format.
pub fn render_report(report: &ExperimentReport, format: OutputFormat) -> Result<String> {
    if report.trials.is_empty() {
        return Err(GainError::EmptyReport);
    }
    match format {
        OutputFormat::Json => {
            let mut s = serde_json::to_string_pretty(report)?;
            s.push('\n');
            Ok(s)
        }
        OutputFormat::Csv => Ok(render_csv(report)),
    }
}

fn render_csv(report: &ExperimentReport) -> String {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for t in &report.trials {
        let iters = |f: fn(&PerObjective<usize>) -> usize| {
            t.iterations.as_ref().map(|i| f(i).to_string()).unwrap_or_default()
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            t.trial_index,
            t.seed_used,
            fmt_opt(t.gain_distance_logdet),
            fmt_opt(t.gain_distance_trace),
            fmt_opt(t.gain_distance_entropy),
            fmt_opt(t.stationarity_residual),
            iters(|i| i.logdet),
            iters(|i| i.trace),
            iters(|i| i.entropy),
            t.converged_all().map(|c| c.to_string()).unwrap_or_default(),
        );
    }
    let s = &report.summary;
    let _ = writeln!(
        out,
        "# summary trials={} passed={} failed={} errors={} max_gain_distance={} \
mean_gain_distance_logdet={} mean_gain_distance_trace={} mean_gain_distance_entropy={} \
max_stationarity_residual={} all_converged={}",
        s.trials,
        s.passed,
        s.failed,
        s.errors,
        fmt_opt(s.max_gain_distance),
        fmt_opt(s.gain_distance_logdet.mean),
        fmt_opt(s.gain_distance_trace.mean),
        fmt_opt(s.gain_distance_entropy.mean),
        fmt_opt(s.max_stationarity_residual),
        s.all_converged,
    );
    out
}

/// Writes the report to a file or to standard output.
pub fn emit_report(
    report: &ExperimentReport,
    format: OutputFormat,
    target: &OutputTarget,
) -> Result<()> {
    let text = render_report(report, format)?;
    match target {
        OutputTarget::Stdout => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
        }
        OutputTarget::File(path) => std::fs::write(path, text)?,
    }
    Ok(())
}

/// Result of comparing the analytic log-det gradient against central differences.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientCheckRecord {
    pub instance: usize,
    pub state_dim: usize,
    pub obs_dim: usize,
    pub gradient_norm: f64,
    /// `||analytic - fd||_F / (1 + ||analytic||_F)`.
    pub relative_error: f64,
}

/// Gradient check on `instances` random problems with dimensions up to `max_dim`,
/// at gains `K* + E` with a Gaussian perturbation `E`.
pub fn gradient_check_suite(
    instances: usize,
    max_dim: usize,
    master_seed: u64,
    cond_target: f64,
) -> Result<Vec<GradientCheckRecord>> {
    if max_dim == 0 {
        return Err(GainError::InvalidParameter("max_dim must be at least 1".into()));
    }
    (0..instances)
        .into_par_iter()
        .map(|i| {
            let seed = trial_seed(master_seed, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 1 + (rng.next_u64() % max_dim as u64) as usize;
            let m = 1 + (rng.next_u64() % max_dim as u64) as usize;
            let p = generate_problem(n, m, rng.next_u64(), cond_target)?;
            let k_star = analytic_gain(&p)?;
            let noise: Vec<f64> = (0..n * m)
                .map(|_| 0.3 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect();
            let k = GainMatrix::new(
                k_star
                    .matrix()
                    .add(&Matrix::from_row_slice(n, m, &noise)?)?,
            );
            let analytic = logdet_gradient(&p, &k)?;
            let fd = finite_difference_gradient(&p, &k, ObjectiveKind::LogGeneralizedVariance)?;
            let err = analytic.matrix().sub(fd.matrix())?.frobenius_norm();
            Ok(GradientCheckRecord {
                instance: i,
                state_dim: n,
                obs_dim: m,
                gradient_norm: analytic.frobenius_norm(),
                relative_error: err / (1.0 + analytic.frobenius_norm()),
            })
        })
        .collect()
}
