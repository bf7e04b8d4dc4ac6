//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any criterion fails.

use std::process::Command;
use std::time::{Duration, Instant};

use gainlab::experiment::{generate_problem, trial_seed};
use gainlab::matrix_core::{det, log_det};
use gainlab::objectives::{
    directional_logdet_differential, evaluate, finite_difference_gradient, logdet_gradient,
    ObjectiveKind,
};
use gainlab::*;
use nalgebra::DMatrix;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const SUITE_SEED: u64 = 0x5EED_2024;
const SUITE_SIZE: usize = 100;
const CONDS: [f64; 3] = [1.0, 10.0, 100.0];

const GAIN_TOL: f64 = 1e-5;
const ENTROPY_ARGMIN_TOL: f64 = 1e-8;
const ENTROPY_OFFSET_TOL: f64 = 1e-12;
const GRADIENT_TOL: f64 = 1e-5;
const DIFFERENTIAL_TOL: f64 = 1e-9;
const STATIONARITY_TOL: f64 = 1e-8;
const SYMMETRY_TOL: f64 = 1e-12;
// Also the rounding allowance on the inequality itself: det and the diagonal
// product agree to ~1e-16 for diagonal matrices, so a strict `<=` would fail
// on round-off alone.
const HADAMARD_EQUALITY_TOL: f64 = 1e-12;
const PERTURBATION_NORM: f64 = 1e-3;
const PERTURBATION_SLACK: f64 = -1e-12;
const SUITE_RUNTIME: Duration = Duration::from_secs(60);

struct Outcome {
    id: usize,
    title: &'static str,
    passed: bool,
    detail: String,
}

struct SuiteCase {
    problem: FilterProblem,
    oracle_gain: GainMatrix,
    eq: EquivalenceReport,
}

/// Collects every covariance the suite produces for the Hadamard check.
#[derive(Default)]
struct CovarianceLog {
    worst_excess: f64,
    checked: usize,
}

impl CovarianceLog {
    fn record(&mut self, c: &CovarianceMatrix) {
        let log_diag: f64 = c.matrix().diagonal().iter().map(|d| d.ln()).sum();
        self.worst_excess = self.worst_excess.max(log_det(c) - log_diag);
        self.checked += 1;
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let v: Vec<f64> = (0..rows * cols)
        .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect();
    Matrix::from_row_slice(rows, cols, &v).unwrap()
}

/// `P^f H^T (H P^f H^T + R)^{-1}` with nalgebra's LU inverse.
fn oracle_gain(p: &FilterProblem) -> GainMatrix {
    let pf = p.prior().matrix().as_dmatrix();
    let h = p.obs_op().matrix().as_dmatrix();
    let r = p.obs_noise().matrix().as_dmatrix();
    let s: DMatrix<f64> = h * pf * h.transpose() + r;
    let s_inv = s.try_inverse().expect("innovation covariance is invertible");
    GainMatrix::new(Matrix::from_dmatrix(pf * h.transpose() * s_inv).unwrap())
}

/// Problem `i` of the shared suite: dimensions in 1..=8, conditioning cycling
/// through 1, 10, 100.
fn suite_problem(i: usize) -> FilterProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(SUITE_SEED, i as u64));
    let n = rng.random_range(1..=8);
    let m = rng.random_range(1..=8);
    generate_problem(n, m, rng.next_u64(), CONDS[i % 3]).unwrap()
}

fn small_problem(rng: &mut ChaCha8Rng, max_dim: usize) -> FilterProblem {
    let n = rng.random_range(1..=max_dim);
    let m = rng.random_range(1..=max_dim);
    let cond = CONDS[rng.random_range(0..3)];
    generate_problem(n, m, rng.next_u64(), cond).unwrap()
}

fn perturbed_gain(rng: &mut ChaCha8Rng, p: &FilterProblem, scale: f64) -> GainMatrix {
    let k_star = analytic_gain(p).unwrap();
    let e = gaussian_matrix(rng, p.state_dim(), p.obs_dim(), scale);
    GainMatrix::new(k_star.matrix().add(&e).unwrap())
}

fn verdict(id: usize, title: &'static str, passed: bool, detail: String) -> Outcome {
    Outcome {
        id,
        title,
        passed,
        detail,
    }
}

fn criterion_1(cases: &[SuiteCase], elapsed: Duration) -> Outcome {
    let worst = cases
        .iter()
        .map(|c| {
            c.eq.logdet
                .final_gain
                .distance(&c.oracle_gain)
                .unwrap()
        })
        .fold(0.0, f64::max);
    verdict(
        1,
        "log-det minimizer equals the analytic gain",
        worst <= GAIN_TOL && elapsed < SUITE_RUNTIME,
        format!(
            "max ||K_logdet - K*||_F = {worst:.3e} (tol {GAIN_TOL:e}); suite runtime {:.2}s (limit {}s)",
            elapsed.as_secs_f64(),
            SUITE_RUNTIME.as_secs()
        ),
    )
}

fn criterion_2(cases: &[SuiteCase]) -> Outcome {
    let mut to_oracle = 0.0f64;
    let mut pairwise = 0.0f64;
    for c in cases {
        to_oracle = to_oracle.max(c.eq.trace.final_gain.distance(&c.oracle_gain).unwrap());
        pairwise = pairwise.max(c.eq.distance_trace_logdet);
    }
    verdict(
        2,
        "trace and log-det minimizers coincide",
        to_oracle <= GAIN_TOL && pairwise <= GAIN_TOL,
        format!(
            "max ||K_trace - K*||_F = {to_oracle:.3e}, max ||K_trace - K_logdet||_F = {pairwise:.3e} (tol {GAIN_TOL:e})"
        ),
    )
}

fn criterion_3(cases: &[SuiteCase]) -> Outcome {
    let argmin_gap = cases
        .iter()
        .map(|c| c.eq.distance_logdet_entropy)
        .fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(SUITE_SEED ^ 3);
    let mut offset_gap = 0.0f64;
    for i in 0..100 {
        let p = &cases[i % cases.len()].problem;
        let k1 = perturbed_gain(&mut rng, p, 0.5);
        let k2 = perturbed_gain(&mut rng, p, 0.5);
        let dh = evaluate(ObjectiveKind::DifferentialEntropy, p, &k1).unwrap()
            - evaluate(ObjectiveKind::DifferentialEntropy, p, &k2).unwrap();
        let dl = evaluate(ObjectiveKind::LogGeneralizedVariance, p, &k1).unwrap()
            - evaluate(ObjectiveKind::LogGeneralizedVariance, p, &k2).unwrap();
        offset_gap = offset_gap.max((dh - 0.5 * dl).abs());
    }
    verdict(
        3,
        "entropy minimizer equals log-det minimizer",
        argmin_gap <= ENTROPY_ARGMIN_TOL && offset_gap <= ENTROPY_OFFSET_TOL,
        format!(
            "max ||K_entropy - K_logdet||_F = {argmin_gap:.3e} (tol {ENTROPY_ARGMIN_TOL:e}); \
max |dH - dlogdet/2| = {offset_gap:.3e} (tol {ENTROPY_OFFSET_TOL:e})"
        ),
    )
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SUITE_SEED ^ 4);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let p = small_problem(&mut rng, 6);
        let k = perturbed_gain(&mut rng, &p, 0.3);
        let analytic = logdet_gradient(&p, &k).unwrap();
        let fd = finite_difference_gradient(&p, &k, ObjectiveKind::LogGeneralizedVariance)
            .unwrap();
        let err = analytic.matrix().sub(fd.matrix()).unwrap().frobenius_norm()
            / (1.0 + analytic.frobenius_norm());
        worst = worst.max(err);
    }
    verdict(
        4,
        "analytic log-det gradient matches central differences",
        worst <= GRADIENT_TOL,
        format!("max ||g - g_fd||_F / (1 + ||g||_F) = {worst:.3e} (tol {GRADIENT_TOL:e})"),
    )
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SUITE_SEED ^ 5);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let p = small_problem(&mut rng, 8);
        let k = perturbed_gain(&mut rng, &p, 0.5);
        let dk = GainMatrix::new(gaussian_matrix(&mut rng, p.state_dim(), p.obs_dim(), 1.0));
        let trace_form = directional_logdet_differential(&p, &k, &dk).unwrap();
        let inner = logdet_gradient(&p, &k).unwrap().inner(&dk).unwrap();
        let rel = (trace_form - inner).abs() / trace_form.abs().max(inner.abs());
        worst = worst.max(rel);
    }
    verdict(
        5,
        "trace-form differential equals <gradient, dK>",
        worst <= DIFFERENTIAL_TOL,
        format!("max relative gap = {worst:.3e} (tol {DIFFERENTIAL_TOL:e})"),
    )
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SUITE_SEED ^ 6);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let p = small_problem(&mut rng, 8);
        let k = analytic_gain(&p).unwrap();
        let res = stationarity_residual(&p, &k).unwrap();
        worst = worst.max(res / (1.0 + p.cross_covariance().frobenius_norm()));
    }
    verdict(
        6,
        "stationarity residual vanishes at the analytic gain",
        worst <= STATIONARITY_TOL,
        format!("max residual / (1 + ||P^f H^T||_F) = {worst:.3e} (tol {STATIONARITY_TOL:e})"),
    )
}

fn criterion_7(log: &mut CovarianceLog) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SUITE_SEED ^ 7);
    let mut worst_asym = 0.0f64;
    let mut spd_failures = 0;
    let mut zero_gain_exact = true;
    for i in 0..200 {
        let p = small_problem(&mut rng, 8);
        let scale = [0.1, 1.0, 3.0][i % 3];
        let k = GainMatrix::new(gaussian_matrix(&mut rng, p.state_dim(), p.obs_dim(), scale));
        match joseph_update(&p, &k) {
            Ok(pa) => {
                let m = pa.matrix();
                for r in 0..m.nrows() {
                    for c in 0..m.ncols() {
                        let gap = (m.get(r, c) - m.get(c, r)).abs() / m.get(r, c).abs().max(1.0);
                        worst_asym = worst_asym.max(gap);
                    }
                }
                log.record(&pa);
            }
            Err(_) => spd_failures += 1,
        }
        let pa0 = joseph_update(&p, &GainMatrix::zeros(p.state_dim(), p.obs_dim())).unwrap();
        zero_gain_exact &= pa0.matrix() == p.prior().matrix();
    }
    verdict(
        7,
        "Joseph update is symmetric positive definite for any gain",
        worst_asym <= SYMMETRY_TOL && spd_failures == 0 && zero_gain_exact,
        format!(
            "200 gains: max asymmetry {worst_asym:.3e} (tol {SYMMETRY_TOL:e}), SPD failures {spd_failures}, K=0 reproduces P^f: {zero_gain_exact}"
        ),
    )
}

fn criterion_8(log: &CovarianceLog) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SUITE_SEED ^ 8);
    let mut worst_equality = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(1..=8);
        let diag: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..10.0)).collect();
        let obs: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..10.0)).collect();
        let gains: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = FilterProblem::new(
            CovarianceMatrix::from_diagonal(&diag).unwrap(),
            ObservationOperator::new(Matrix::identity(n)),
            CovarianceMatrix::from_diagonal(&obs).unwrap(),
        )
        .unwrap();
        let pa = joseph_update(&p, &GainMatrix::new(Matrix::from_diagonal(&gains).unwrap()))
            .unwrap();
        for c in [p.prior(), &pa] {
            let prod = c.diagonal_product();
            worst_equality = worst_equality.max((det(c) - prod).abs() / prod);
        }
    }
    verdict(
        8,
        "Hadamard bound det <= product of diagonal",
        log.worst_excess <= HADAMARD_EQUALITY_TOL && worst_equality <= HADAMARD_EQUALITY_TOL,
        format!(
            "{} covariances: max log det - sum log diag = {:.3e} (tol {HADAMARD_EQUALITY_TOL:e}); diagonal cases max relative gap {worst_equality:.3e} (tol {HADAMARD_EQUALITY_TOL:e})",
            log.checked, log.worst_excess
        ),
    )
}

fn criterion_9(cases: &[SuiteCase]) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SUITE_SEED ^ 9);
    let mut worst = f64::INFINITY;
    let mut gains = 0;
    for c in cases {
        for kind in ObjectiveKind::ALL {
            let run = c.eq.run(kind);
            if !run.converged {
                continue;
            }
            gains += 1;
            let k = &run.final_gain;
            let base: Vec<f64> = ObjectiveKind::ALL
                .iter()
                .map(|&o| evaluate(o, &c.problem, k).unwrap())
                .collect();
            for _ in 0..50 {
                let e = gaussian_matrix(&mut rng, k.state_dim(), k.obs_dim(), 1.0);
                let e = e.scale(PERTURBATION_NORM / e.frobenius_norm());
                let moved = GainMatrix::new(k.matrix().add(&e).unwrap());
                for (o, &f0) in ObjectiveKind::ALL.iter().zip(&base) {
                    worst = worst.min(evaluate(*o, &c.problem, &moved).unwrap() - f0);
                }
            }
        }
    }
    verdict(
        9,
        "converged gains are local minima of all three objectives",
        worst >= PERTURBATION_SLACK,
        format!(
            "{gains} converged gains x 50 perturbations of norm {PERTURBATION_NORM:e}: min objective increase {worst:.3e} (slack {PERTURBATION_SLACK:e})"
        ),
    )
}

fn run_cli(args: &[&str]) -> Vec<u8> {
    let out = Command::new(env!("CARGO_BIN_EXE_gainlab"))
        .args(args)
        .output()
        .expect("gainlab binary runs");
    assert!(
        out.status.code() == Some(0) || out.status.code() == Some(1),
        "unexpected exit {:?}: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    out.stdout
}

fn criterion_10() -> Outcome {
    let base = [
        "run", "--state-dim", "5", "--obs-dim", "3", "--trials", "24", "--seed", "7",
        "--cond", "100",
    ];
    let mut identical = true;
    let mut sizes = Vec::new();
    for format in ["json", "csv"] {
        let with = |extra: &[&str]| {
            let mut args: Vec<&str> = base.to_vec();
            args.extend_from_slice(&["--format", format]);
            args.extend_from_slice(extra);
            run_cli(&args)
        };
        let first = with(&[]);
        let second = with(&[]);
        let one = with(&["--workers", "1"]);
        let four = with(&["--workers", "4"]);
        identical &= !first.is_empty() && first == second && first == one && first == four;
        sizes.push(first.len());
    }
    verdict(
        10,
        "CLI reports are byte-identical across runs and worker counts",
        identical,
        format!("json {} bytes, csv {} bytes; identical across 2 runs and workers 1/4: {identical}", sizes[0], sizes[1]),
    )
}

fn main() {
    // Respect `cargo test -- <filter>` so that filtered runs of other targets skip this one.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }

    let mut log = CovarianceLog::default();
    let start = Instant::now();
    let config = OptimizerConfig::default();
    let cases: Vec<SuiteCase> = (0..SUITE_SIZE)
        .map(|i| {
            let problem = suite_problem(i);
            let eq = cross_objective_equivalence(&problem, &config).unwrap();
            SuiteCase {
                oracle_gain: oracle_gain(&problem),
                problem,
                eq,
            }
        })
        .collect();
    let elapsed = start.elapsed();
    for c in &cases {
        log.record(c.problem.prior());
        log.record(c.problem.obs_noise());
        log.record(&innovation_covariance(&c.problem));
        log.record(&joseph_update(&c.problem, &c.eq.analytic_gain).unwrap());
        for kind in ObjectiveKind::ALL {
            log.record(&joseph_update(&c.problem, &c.eq.run(kind).final_gain).unwrap());
        }
    }

    let mut outcomes = vec![
        criterion_1(&cases, elapsed),
        criterion_2(&cases),
        criterion_3(&cases),
        criterion_4(),
        criterion_5(),
        criterion_6(),
        criterion_7(&mut log),
    ];
    outcomes.push(criterion_8(&log));
    outcomes.push(criterion_9(&cases));
    outcomes.push(criterion_10());

    let converged = cases.iter().filter(|c| c.eq.all_converged()).count();
    println!("acceptance suite: {SUITE_SIZE} problems, {converged} with all three runs converged");
    let mut failed = 0;
    for o in &outcomes {
        println!(
            "[{}] criterion {:>2}: {} | {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.id,
            o.title,
            o.detail
        );
        failed += usize::from(!o.passed);
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
